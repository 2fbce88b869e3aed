"""
Graph-attention conditioning.

Node features are pulled from each level of the CT feature pyramid by a 3D
local-feature integration (the 8 enclosing lattice features, each embedded
together with its offset and weighted by the opposing cube volume), mixed by
a GATv2-style attention layer, concatenated over levels, classified per node
and scattered back onto the denoiser's bottleneck grid.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .graph import VesselGraph, grid_centres

CORNERS = np.array(list(itertools.product((0, 1), repeat=3)), dtype=np.int64)  # (8, 3)


def normalize_coords(nodes: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Voxel coordinates -> [-1, 1] with voxel centres at (i + 0.5) / n."""
    shape = np.asarray(shape, dtype=np.float64)
    return (np.asarray(nodes, dtype=np.float64) + 0.5) / shape * 2.0 - 1.0


def liif_corners(coords: np.ndarray, size: Sequence[int]):
    """Enclosing lattice corners of normalised points on a ``size`` feature grid.

    Returns ``(index, weight, offset)``: flat corner indices (N, 8), weights
    S / S_bar where S is the volume of the cube spanned by the point and the
    diagonally opposite corner (N, 8), and point-minus-corner offsets in cell
    units (N, 8, 3). Axes of length 1 collapse onto their single lattice plane.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ValueError("coords must be (N, 3)")
    if np.any(np.abs(coords) > 1.0 + 1e-9):
        raise ValueError("node coordinates must lie in [-1, 1]^3")
    size = np.asarray(size, dtype=np.int64)
    u = (coords + 1.0) / 2.0 * size - 0.5  # continuous lattice index
    u = np.clip(u, 0.0, size - 1.0)
    lo = np.minimum(np.floor(u), np.maximum(size - 2, 0)).astype(np.int64)
    hi = np.minimum(lo + 1, size - 1)
    corner_idx = np.where(CORNERS[None, :, :] == 1, hi[:, None, :], lo[:, None, :])  # (N, 8, 3)
    opposite = np.where(CORNERS[None, :, :] == 1, lo[:, None, :], hi[:, None, :])
    # degenerate axes: both corners coincide; give the whole extent to the low corner
    span = np.where(hi > lo, 1.0, 0.0)[:, None, :]
    extent = np.where(span > 0, np.abs(u[:, None, :] - opposite), np.where(CORNERS[None] == 0, 1.0, 0.0))
    volume = np.prod(extent, axis=2)  # (N, 8)
    total = volume.sum(axis=1, keepdims=True)
    weight = volume / total
    offset = u[:, None, :] - corner_idx
    flat = np.ravel_multi_index(tuple(corner_idx.reshape(-1, 3).T), tuple(size)).reshape(-1, 8)
    return flat, weight, offset


@dataclass
class NodeFeatureSet:
    features: torch.Tensor  # (B, N, F)
    coords: Optional[torch.Tensor] = None  # (B, N, 3) in [-1, 1]
    scale: Optional[int] = None


@dataclass
class GraphBatch:
    """A batch of graphs sharing one node grid (so N is fixed)."""

    coords: np.ndarray  # (B, N, 3) normalised
    edge_index: torch.Tensor  # (2, E) rows (dst, src) over B*N flattened nodes
    complete: bool
    labels: Optional[torch.Tensor]  # (B, N) float or None
    cell_index: torch.Tensor  # (N,) bottleneck cell per node, -1 if not scattered
    num_nodes: int

    @property
    def batch_size(self) -> int:
        return len(self.coords)


def _directed_edges(graph: VesselGraph, self_loops: str) -> np.ndarray:
    n = graph.num_nodes
    e = graph.edges
    pairs = np.concatenate([e, e[:, ::-1]], axis=0) if len(e) else np.zeros((0, 2), np.int64)
    if self_loops == "all":
        loops = np.arange(n)
    else:
        loops = np.flatnonzero(graph.degrees() == 0)
    loops = np.stack([loops, loops], axis=1)
    return np.concatenate([pairs, loops], axis=0)


def scatter_cells(shape: Sequence[int], grid: Sequence[int], out_hw: Sequence[int], center_slice: int) -> np.ndarray:
    """Nearest bottleneck cell for every node whose sub-volume covers the centre slice."""
    centres = grid_centres(shape, grid)
    sub_d = -(-shape[0] // grid[0])
    pad = ((-shape[0]) % grid[0]) // 2
    gz = np.arange(len(centres)) // (grid[1] * grid[2])
    z0 = gz * sub_d - pad
    covers = (z0 <= center_slice) & (center_slice < z0 + sub_d)
    cy = np.clip(np.floor((centres[:, 1] + 0.5) / shape[1] * out_hw[0]), 0, out_hw[0] - 1).astype(np.int64)
    cx = np.clip(np.floor((centres[:, 2] + 0.5) / shape[2] * out_hw[1]), 0, out_hw[1] - 1).astype(np.int64)
    return np.where(covers, cy * out_hw[1] + cx, -1)


def make_graph_batch(graphs: Sequence[VesselGraph], out_hw: Sequence[int], self_loops: str = "isolated") -> GraphBatch:
    first = graphs[0]
    n = first.num_nodes
    for g in graphs:
        if g.num_nodes != n or tuple(g.grid) != tuple(first.grid) or tuple(g.shape) != tuple(first.shape):
            raise ValueError("all graphs in a batch must share grid and volume shape")
    coords = np.stack([normalize_coords(g.nodes, g.shape) for g in graphs])
    complete = all(g.complete for g in graphs) and self_loops != "all"
    if complete:
        edge_index = torch.zeros((2, 0), dtype=torch.long)
    else:
        chunks = [_directed_edges(g, self_loops) + b * n for b, g in enumerate(graphs)]
        e = np.concatenate(chunks, axis=0)
        order = np.lexsort((e[:, 1], e[:, 0]))
        edge_index = torch.as_tensor(e[order].T.copy(), dtype=torch.long)
    labels = None
    if all((g.labels >= 0).all() for g in graphs):
        labels = torch.as_tensor(np.stack([g.labels for g in graphs]).astype(np.float32))
    cells = scatter_cells(first.shape, first.grid, out_hw, first.shape[0] // 2)
    return GraphBatch(coords, edge_index, complete, labels, torch.as_tensor(cells), n)


class LocalFeatureIntegration(nn.Module):
    """Weighted sum over enclosing corners of Linear([corner feature | offset])."""

    def __init__(self, in_channels: int, out_dim: int):
        super().__init__()
        self.proj = nn.Linear(in_channels + 3, out_dim)

    def forward(self, volume: torch.Tensor, coords: np.ndarray) -> torch.Tensor:
        b, c = volume.shape[:2]
        size = volume.shape[2:]
        nb, n = coords.shape[:2]
        if nb != b:
            raise ValueError("coordinate batch does not match feature batch")
        idx, w, off = liif_corners(coords.reshape(-1, 3), size)
        idx = torch.as_tensor(idx.reshape(b, n * 8))
        flat = volume.reshape(b, c, -1)
        gathered = torch.gather(flat, 2, idx[:, None, :].expand(b, c, n * 8))
        gathered = gathered.view(b, c, n, 8).permute(0, 2, 3, 1)
        off = torch.as_tensor(off, dtype=volume.dtype).view(b, n, 8, 3)
        w = torch.as_tensor(w, dtype=volume.dtype).view(b, n, 8, 1)
        return (w * self.proj(torch.cat([gathered, off], dim=-1))).sum(dim=2)


def segment_softmax(logits: torch.Tensor, index: torch.Tensor, num_segments: int) -> torch.Tensor:
    peak = torch.full((num_segments,), -torch.inf, dtype=logits.dtype)
    peak = peak.scatter_reduce(0, index, logits.detach(), reduce="amax", include_self=True)
    ex = torch.exp(logits - peak[index])
    denom = torch.zeros(num_segments, dtype=logits.dtype).index_add(0, index, ex)
    return ex / denom[index]


class GraphAttentionLayer(nn.Module):
    """Single-head GATv2 attention.

    Logits are ``a . LeakyReLU(W (f_i + f_j))``; with ``concat=True`` the
    usual ``W [f_i | f_j]`` form is used instead. The message from ``j`` is
    ``W f_j``.
    """

    def __init__(self, in_dim: int, attn_dim: int, negative_slope: float = 0.2, concat: bool = False,
                 dense_chunk: int = 8):
        super().__init__()
        self.W = nn.Linear(in_dim, attn_dim, bias=False)
        self.W_dst = nn.Linear(in_dim, attn_dim, bias=False) if concat else None
        self.a = nn.Parameter(torch.randn(attn_dim) / attn_dim ** 0.5)
        self.negative_slope = negative_slope
        self.concat = concat
        self.dense_chunk = dense_chunk

    def _logit(self, gi, gj):
        return (F.leaky_relu(gi + gj, self.negative_slope) * self.a).sum(-1)

    def forward(self, x: torch.Tensor, batch: GraphBatch, return_attention: bool = False):
        b, n, _ = x.shape
        g = self.W(x)
        gd = self.W_dst(x) if self.concat else g
        if batch.complete:
            outs, alphas = [], []
            eye = torch.eye(n, dtype=torch.bool)
            for s in range(0, b, self.dense_chunk):
                gi = gd[s:s + self.dense_chunk, :, None, :]
                gj = g[s:s + self.dense_chunk, None, :, :]
                logits = self._logit(gi, gj).masked_fill(eye, -torch.inf)
                if n == 1:
                    logits = torch.zeros_like(logits)
                # reduce each row in logit order so relabelling nodes cannot change rounding
                ranked, order = torch.sort(logits, dim=-1, stable=True)
                alpha_r = torch.softmax(ranked, dim=-1)
                gs = g[s:s + self.dense_chunk]
                msgs = torch.gather(gs[:, None].expand(-1, n, -1, -1), 2,
                                    order[..., None].expand(-1, -1, -1, gs.shape[-1]))
                outs.append((alpha_r[..., None] * msgs).sum(-2))
                if return_attention:
                    alphas.append(torch.zeros_like(alpha_r).scatter(-1, order, alpha_r))
            out = torch.cat(outs)
            if return_attention:
                return out, torch.cat(alphas)
            return out
        dst, src = batch.edge_index
        gf = g.reshape(b * n, -1)
        gdf = gd.reshape(b * n, -1)
        logits = self._logit(gdf[dst], gf[src])
        # same canonical order as the dense path: by destination, then by logit
        by_logit = torch.argsort(logits.detach(), stable=True)
        order = by_logit[torch.argsort(dst[by_logit], stable=True)]
        d, sr = dst[order], src[order]
        alpha_o = segment_softmax(logits[order], d, b * n)
        out = torch.zeros_like(gf).index_add(0, d, alpha_o[:, None] * gf[sr]).view(b, n, -1)
        if return_attention:
            return out, torch.empty_like(alpha_o).scatter(0, order, alpha_o)
        return out


def multiscale_concat(per_scale: Sequence[torch.Tensor]) -> torch.Tensor:
    if not per_scale:
        raise ValueError("no scales given")
    shape = per_scale[0].shape[:-1]
    for f in per_scale:
        if f.shape[:-1] != shape:
            raise ValueError("node count mismatch across scales")
    return torch.cat(list(per_scale), dim=-1)


class NodeHead(nn.Module):
    def __init__(self, in_dim: int):
        super().__init__()
        self.conv = nn.Linear(in_dim, 1)

    def forward(self, f_v: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.conv(f_v)).squeeze(-1)


def graph_loss(probs: torch.Tensor, labels: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Binary cross-entropy, averaged over nodes and summed over the batch."""
    if torch.any((labels != 0) & (labels != 1)):
        raise ValueError("node labels must be 0 or 1")
    p = probs.clamp(eps, 1 - eps)
    bce = -(labels * torch.log(p) + (1 - labels) * torch.log(1 - p))
    if bce.dim() == 1:
        return bce.mean()
    return bce.mean(dim=-1).sum()


def scatter_to_grid(node_feats: torch.Tensor, cell_index: torch.Tensor, out_hw: Sequence[int]) -> torch.Tensor:
    """Average node features into their cells; (B, N, C) -> (B, C, H, W)."""
    b, n, c = node_feats.shape
    valid = cell_index >= 0
    cells = cell_index[valid]
    num = out_hw[0] * out_hw[1]
    summed = torch.zeros(b, num, c, dtype=node_feats.dtype).index_add(1, cells, node_feats[:, valid])
    count = torch.zeros(num, dtype=node_feats.dtype).index_add(0, cells, torch.ones(len(cells), dtype=node_feats.dtype))
    grid = summed / count.clamp(min=1)[None, :, None]
    return grid.permute(0, 2, 1).reshape(b, c, out_hw[0], out_hw[1])


@dataclass
class FusedCondition:
    f: torch.Tensor
    f_c: torch.Tensor
    f_v: Optional[torch.Tensor]


def fuse(f_c: torch.Tensor, f_v: Optional[torch.Tensor]) -> FusedCondition:
    if f_v is None:
        return FusedCondition(f_c, f_c, None)
    if f_c.shape != f_v.shape:
        raise ValueError(f"cannot fuse {tuple(f_c.shape)} with {tuple(f_v.shape)}")
    return FusedCondition(f_c + f_v, f_c, f_v)


class GraphConditioner(nn.Module):
    """Per-level LFI + GATv2, multiscale concatenation, node head and scatter projection."""

    def __init__(self, level_channels: Sequence[int], node_dim: int, attn_dim: int, out_channels: int,
                 negative_slope: float = 0.2, concat: bool = False, levels: Optional[Sequence[int]] = None):
        super().__init__()
        self.levels = list(range(len(level_channels))) if levels is None else list(levels)
        self.lfi = nn.ModuleList([LocalFeatureIntegration(level_channels[k], node_dim) for k in self.levels])
        self.gat = nn.ModuleList(
            [GraphAttentionLayer(node_dim, attn_dim, negative_slope, concat) for _ in self.levels]
        )
        self.out_dim = attn_dim * len(self.levels)
        self.head = NodeHead(self.out_dim)
        self.proj = nn.Linear(self.out_dim, out_channels)

    def node_features(self, volumes: Sequence[torch.Tensor], batch: GraphBatch, return_attention: bool = False):
        per_scale, attn = [], []
        for lfi, gat, k in zip(self.lfi, self.gat, self.levels):
            f_hat = lfi(volumes[k], batch.coords)
            if return_attention:
                out, alpha = gat(f_hat, batch, return_attention=True)
                attn.append(alpha)
            else:
                out = gat(f_hat, batch)
            per_scale.append(out)
        f_v = multiscale_concat(per_scale)
        return (f_v, attn) if return_attention else f_v

    def forward(self, volumes: Sequence[torch.Tensor], batch: GraphBatch, out_hw: Sequence[int]):
        f_v = self.node_features(volumes, batch)
        probs = self.head(f_v)
        grid = scatter_to_grid(self.proj(f_v), batch.cell_index, out_hw)
        return grid, probs
