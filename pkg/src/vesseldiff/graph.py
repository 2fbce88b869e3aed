"""
Vessel graph construction.

Training graphs come from a ground-truth mask: the volume is cut into
non-overlapping sub-volumes, each sub-volume contributes one node, and
foreground nodes in neighbouring sub-volumes are joined when the travel time
between them (binary mask used as a speed map) stays under a threshold.
Inference graphs are complete graphs over the sub-volume centres.

Coordinates and grids follow the array axis order of the mask passed in.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

BACKGROUND_SPEED = 1e-3


@dataclass
class VesselGraph:
    nodes: np.ndarray  # (N, 3) float64 voxel coordinates
    labels: np.ndarray  # (N,) int8; -1 when unset
    edges: np.ndarray  # (E, 2) int64, i < j, lexicographically sorted
    weights: np.ndarray  # (E,) float64
    grid: Tuple[int, int, int]
    shape: Tuple[int, int, int]
    complete: bool = False

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        np.add.at(deg, self.edges[:, 0], 1)
        np.add.at(deg, self.edges[:, 1], 1)
        return deg

    def subvolume_index(self) -> np.ndarray:
        """(N, 3) grid index of the sub-volume each node belongs to."""
        return np.stack(np.unravel_index(np.arange(self.num_nodes), self.grid), axis=1)

    def validate(self) -> None:
        n = self.num_nodes
        if n != int(np.prod(self.grid)):
            raise ValueError("node count differs from grid product")
        if self.num_edges:
            if self.edges.min() < 0 or self.edges.max() >= n:
                raise ValueError("edge index out of range")
            if np.any(self.edges[:, 0] == self.edges[:, 1]):
                raise ValueError("self-loop in edge list")
            if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
                raise ValueError("edge weights must be finite and non-negative")


@dataclass(frozen=True)
class EdgePolicy:
    """Which foreground node pairs are tested and when they are kept.

    ``neighborhood`` is the Chebyshev radius on the node grid (1 = 26
    neighbourhood). ``threshold`` is in travel-time units; ``None`` means
    ``threshold_pitches`` times the largest sub-volume extent in mm.
    """

    neighborhood: int = 1
    threshold: Optional[float] = None
    threshold_pitches: float = 3.0
    background_speed: float = BACKGROUND_SPEED
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)


def _padding(shape: Sequence[int], grid: Sequence[int]):
    pads = []
    for n, g in zip(shape, grid):
        total = (-n) % g
        pads.append((total // 2, total - total // 2))
    return pads


def _check_grid(grid: Sequence[int]) -> Tuple[int, int, int]:
    grid = tuple(int(g) for g in grid)
    if len(grid) != 3 or min(grid) < 1:
        raise ValueError(f"grid must be three positive integers, got {grid}")
    return grid


def _check_binary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ValueError("mask must be a 3D array")
    if mask.dtype != bool:
        values = np.unique(mask)
        if not np.all(np.isin(values, (0, 1))):
            raise ValueError("mask must be binary")
    return mask.astype(bool)


def build_nodes(mask: np.ndarray, grid: Sequence[int]):
    """One node per sub-volume.

    Returns ``(nodes, labels)``. Foreground sub-volumes place their node at the
    mean vessel-voxel coordinate; empty ones use the central voxel. Shapes not
    divisible by the grid are zero-padded symmetrically; coordinates are
    reported in the unpadded frame.
    """
    mask = _check_binary(mask)
    grid = _check_grid(grid)
    pads = _padding(mask.shape, grid)
    padded = np.pad(mask, pads)
    sub = tuple(s // g for s, g in zip(padded.shape, grid))
    offset = np.array([p[0] for p in pads], dtype=np.float64)

    # (gd, sd, gh, sh, gw, sw) -> (gd, gh, gw, sd*sh*sw)
    blocks = padded.reshape(grid[0], sub[0], grid[1], sub[1], grid[2], sub[2])
    blocks = blocks.transpose(0, 2, 4, 1, 3, 5).reshape(-1, sub[0] * sub[1] * sub[2])
    local = np.stack(np.unravel_index(np.arange(blocks.shape[1]), sub), axis=1).astype(np.float64)
    counts = blocks.sum(axis=1)
    sums = blocks.astype(np.float64) @ local
    origin = np.stack(np.unravel_index(np.arange(len(blocks)), grid), axis=1) * np.array(sub)
    centre = origin + np.array([s // 2 for s in sub], dtype=np.float64)
    fg = counts > 0
    nodes = centre.copy()
    nodes[fg] = origin[fg] + sums[fg] / counts[fg, None]
    return nodes - offset, fg.astype(np.int8)


def _lattice_offsets():
    for d in itertools.product((-1, 0, 1), repeat=3):
        if d > (0, 0, 0):
            yield d


def voxel_graph(mask: np.ndarray, spacing=(1.0, 1.0, 1.0), background_speed: float = BACKGROUND_SPEED):
    """Sparse symmetric 26-connected voxel graph with travel-time edge costs.

    Moving between voxels u and v costs the Euclidean step length times the
    mean slowness (1 / speed) of the two voxels.
    """
    mask = _check_binary(mask)
    shape = mask.shape
    slowness = np.where(mask, 1.0, 1.0 / background_speed)
    index = np.arange(mask.size).reshape(shape)
    rows, cols, vals = [], [], []
    spacing = np.asarray(spacing, dtype=np.float64)
    for d in _lattice_offsets():
        src = tuple(slice(max(0, -k), n - max(0, k)) for k, n in zip(d, shape))
        dst = tuple(slice(max(0, k), n - max(0, -k)) for k, n in zip(d, shape))
        length = float(np.sqrt(np.sum((np.array(d) * spacing) ** 2)))
        rows.append(index[src].ravel())
        cols.append(index[dst].ravel())
        vals.append((0.5 * length * (slowness[src] + slowness[dst])).ravel())
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    n = mask.size
    g = coo_matrix((np.concatenate([vals, vals]), (np.concatenate([rows, cols]), np.concatenate([cols, rows]))), shape=(n, n))
    return g.tocsr()


def _flat(shape, voxel) -> int:
    voxel = tuple(int(v) for v in voxel)
    if len(voxel) != 3 or any(v < 0 or v >= n for v, n in zip(voxel, shape)):
        raise ValueError(f"voxel {voxel} out of bounds for shape {shape}")
    return int(np.ravel_multi_index(voxel, shape))


def travel_time(mask, src, dst, spacing=(1.0, 1.0, 1.0), background_speed: float = BACKGROUND_SPEED) -> float:
    """Shortest arrival time from ``src`` to ``dst`` under the mask speed map."""
    mask = _check_binary(mask)
    a = _flat(mask.shape, src)
    b = _flat(mask.shape, dst)
    if a == b:
        return 0.0
    dist = dijkstra(voxel_graph(mask, spacing, background_speed), directed=True, indices=a)
    return float(dist[b])


def _anchor_voxels(mask: np.ndarray, nodes: np.ndarray, grid, fg: np.ndarray) -> np.ndarray:
    """Vessel voxel closest to each foreground node, searched in its own sub-volume."""
    pads = _padding(mask.shape, grid)
    sub = [(s + p[0] + p[1]) // g for s, p, g in zip(mask.shape, pads, grid)]
    idx = np.stack(np.unravel_index(np.arange(len(nodes)), grid), axis=1)
    anchors = np.full(len(nodes), -1, dtype=np.int64)
    for i in np.flatnonzero(fg):
        lo = [int(k * s - p[0]) for k, s, p in zip(idx[i], sub, pads)]
        sl = tuple(slice(max(0, l), max(0, l + s)) for l, s in zip(lo, sub))
        vox = np.argwhere(mask[sl]) + np.array([s.start for s in sl])
        best = vox[np.argmin(((vox - nodes[i]) ** 2).sum(axis=1))]
        anchors[i] = np.ravel_multi_index(tuple(best), mask.shape)
    return anchors


def build_edges(nodes: np.ndarray, labels: np.ndarray, mask: np.ndarray, grid, policy: Optional[EdgePolicy] = None) -> VesselGraph:
    """Connect nearby foreground nodes whose travel time stays under the threshold."""
    policy = policy or EdgePolicy()
    mask = _check_binary(mask)
    grid = _check_grid(grid)
    nodes = np.asarray(nodes, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int8)
    fg = labels == 1
    empty = VesselGraph(
        nodes=nodes, labels=labels, edges=np.zeros((0, 2), dtype=np.int64), weights=np.zeros(0),
        grid=grid, shape=tuple(mask.shape),
    )
    if not fg.any():
        return empty

    pads = _padding(mask.shape, grid)
    sub = np.array([(s + p[0] + p[1]) // g for s, p, g in zip(mask.shape, pads, grid)])
    tau = policy.threshold
    if tau is None:
        tau = policy.threshold_pitches * float(np.max(sub * np.asarray(policy.spacing)))

    gidx = np.stack(np.unravel_index(np.arange(len(nodes)), grid), axis=1)
    fg_ids = np.flatnonzero(fg)
    pairs = []
    for a_pos, i in enumerate(fg_ids):
        for j in fg_ids[a_pos + 1:]:
            if np.max(np.abs(gidx[i] - gidx[j])) <= policy.neighborhood:
                pairs.append((i, j))
    if not pairs:
        return empty

    anchors = _anchor_voxels(mask, nodes, grid, fg)
    graph = voxel_graph(mask, policy.spacing, policy.background_speed)
    sources = sorted({i for i, _ in pairs})
    dist = dijkstra(graph, directed=True, indices=anchors[sources], limit=tau * (1 + 1e-12))
    row = {s: k for k, s in enumerate(sources)}
    edges, weights = [], []
    for i, j in pairs:
        w = dist[row[i], anchors[j]]
        if np.isfinite(w) and w <= tau:
            edges.append((i, j))
            weights.append(w)
    if not edges:
        return empty
    edges = np.array(edges, dtype=np.int64)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    return VesselGraph(
        nodes=nodes, labels=labels, edges=edges[order], weights=np.array(weights)[order],
        grid=grid, shape=tuple(mask.shape),
    )


def build_graph(mask: np.ndarray, grid, policy: Optional[EdgePolicy] = None) -> VesselGraph:
    nodes, labels = build_nodes(mask, grid)
    return build_edges(nodes, labels, mask, grid, policy)


def grid_centres(shape, grid) -> np.ndarray:
    grid = _check_grid(grid)
    pads = _padding(shape, grid)
    sub = [(s + p[0] + p[1]) // g for s, p, g in zip(shape, pads, grid)]
    idx = np.stack(np.unravel_index(np.arange(int(np.prod(grid))), grid), axis=1)
    return (idx * np.array(sub) + np.array([s // 2 for s in sub]) - np.array([p[0] for p in pads])).astype(np.float64)


def full_graph(grid, shape=None, knn: Optional[int] = None) -> VesselGraph:
    """Inference graph: nodes at every sub-volume centre, all pairs connected.

    With ``knn`` each node is instead joined to its ``knn`` nearest centres
    (symmetrised). ``shape`` defaults to one voxel per sub-volume.
    """
    grid = _check_grid(grid)
    shape = tuple(grid) if shape is None else tuple(int(s) for s in shape)
    nodes = grid_centres(shape, grid)
    n = len(nodes)
    labels = np.full(n, -1, dtype=np.int8)
    if knn is None:
        i, j = np.triu_indices(n, 1)
        edges = np.stack([i, j], axis=1).astype(np.int64)
        return VesselGraph(nodes, labels, edges, np.ones(len(edges)), grid, shape, complete=True)
    from scipy.spatial import cKDTree

    k = min(int(knn), n - 1)
    if k < 1:
        return empty_graph(grid, shape)
    _, nn = cKDTree(nodes).query(nodes, k=k + 1)
    pairs = {(min(a, b), max(a, b)) for a, row in enumerate(nn) for b in row[1:] if a != b}
    edges = np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)
    return VesselGraph(nodes, labels, edges, np.ones(len(edges)), grid, shape)


def empty_graph(grid, shape=None) -> VesselGraph:
    grid = _check_grid(grid)
    shape = tuple(grid) if shape is None else tuple(int(s) for s in shape)
    nodes = grid_centres(shape, grid)
    return VesselGraph(
        nodes, np.full(len(nodes), -1, dtype=np.int8), np.zeros((0, 2), dtype=np.int64), np.zeros(0), grid, shape
    )


def save_graph(graph: VesselGraph, path) -> None:
    """Text format: header, node block (coords + label), edge block (i j weight)."""
    lines = [
        "# vessel-graph v1",
        f"N {graph.num_nodes} E {graph.num_edges}",
        "grid " + " ".join(map(str, graph.grid)),
        "shape " + " ".join(map(str, graph.shape)),
        f"complete {int(graph.complete)}",
        "nodes",
    ]
    lines += [f"{x!r} {y!r} {z!r} {int(l)}" for (x, y, z), l in zip(graph.nodes.tolist(), graph.labels)]
    lines.append("edges")
    lines += [f"{int(i)} {int(j)} {w!r}" for (i, j), w in zip(graph.edges.tolist(), graph.weights.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def load_graph(path) -> VesselGraph:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# vessel-graph"):
        raise ValueError(f"{path}: not a vessel graph file")
    head = lines[1].split()
    n, e = int(head[1]), int(head[3])
    grid = tuple(int(v) for v in lines[2].split()[1:])
    shape = tuple(int(v) for v in lines[3].split()[1:])
    complete = bool(int(lines[4].split()[1]))
    node_rows = [r.split() for r in lines[6:6 + n]]
    edge_rows = [r.split() for r in lines[7 + n:7 + n + e]]
    nodes = np.array([[float(v) for v in r[:3]] for r in node_rows], dtype=np.float64).reshape(n, 3)
    labels = np.array([int(r[3]) for r in node_rows], dtype=np.int8)
    edges = np.array([[int(r[0]), int(r[1])] for r in edge_rows], dtype=np.int64).reshape(e, 2)
    weights = np.array([float(r[2]) for r in edge_rows], dtype=np.float64)
    graph = VesselGraph(nodes, labels, edges, weights, grid, shape, complete)
    graph.validate()
    return graph
