"""
Volume I/O, CT preprocessing into 2.5D blocks, dataset splits and a
procedural vessel-tree phantom for desk-scale experiments.

Arrays are kept in (z, y, x) order with spacing in mm per axis in the same
order; NIfTI files store (x, y, z) and are transposed on the way in and out.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import nibabel as nib
import numpy as np
from scipy import ndimage
from skimage.transform import resize

from .conditioning import ConditionBlock

HU_WINDOW = (0.0, 400.0)


@dataclass
class Volume:
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    units: str = ""

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"bad spacing {self.spacing}")

    @property
    def shape(self):
        return self.data.shape


def load_volume(path, units: str = "") -> Volume:
    img = nib.load(str(path))
    data = np.asarray(img.dataobj)
    if data.ndim != 3:
        raise ValueError(f"{path}: expected a 3D image, got shape {data.shape}")
    zooms = img.header.get_zooms()[:3]
    return Volume(np.ascontiguousarray(data.transpose(2, 1, 0)), tuple(zooms[::-1]), units)


def save_volume(vol: Volume, path) -> None:
    data = vol.data
    if data.dtype == bool:
        data = data.astype(np.uint8)
    affine = np.diag(list(vol.spacing[::-1]) + [1.0])
    img = nib.Nifti1Image(np.ascontiguousarray(data.transpose(2, 1, 0)), affine)
    img.header.set_zooms(vol.spacing[::-1])
    nib.save(img, str(path))


# ---------------------------------------------------------------- preprocessing


def normalize_hu(ct: np.ndarray, window: Tuple[float, float] = HU_WINDOW) -> np.ndarray:
    lo, hi = window
    return ((np.clip(ct, lo, hi) - lo) / (hi - lo)).astype(np.float32)


def bounding_box(mask: np.ndarray) -> Tuple[slice, ...]:
    idx = np.nonzero(mask)
    if not len(idx[0]):
        raise ValueError("liver mask is empty")
    return tuple(slice(int(i.min()), int(i.max()) + 1) for i in idx)


def _square_pad(h: int, w: int) -> Tuple[Tuple[int, int], Tuple[int, int]]:
    s = max(h, w)
    return ((s - h) // 2, s - h - (s - h) // 2), ((s - w) // 2, s - w - (s - w) // 2)


def resize_slices(arr: np.ndarray, size: int, order: int, letterbox: bool = False) -> np.ndarray:
    """In-plane resize of a (D, H, W) stack; order 1 for CT, 0 for masks."""
    if letterbox:
        ph, pw = _square_pad(*arr.shape[1:])
        arr = np.pad(arr, ((0, 0), ph, pw))
    if arr.shape[1:] == (size, size):
        return arr.copy()
    out = resize(arr.astype(np.float64), (arr.shape[0], size, size), order=order,
                 mode="edge", anti_aliasing=False, preserve_range=True)
    return out.astype(arr.dtype) if order == 0 else out


@dataclass
class PreparedCase:
    """A cropped, resized and normalised case ready for block sampling."""

    ct: np.ndarray  # (D, S, S) float32 in [0, 1]
    mask: Optional[np.ndarray]  # (D, S, S) bool
    spacing: Tuple[float, float, float]  # spacing after resizing
    source_shape: Tuple[int, int, int]
    source_spacing: Tuple[float, float, float]
    crop: Tuple[slice, slice, slice]
    letterbox: bool = False
    annotated: Optional[Sequence[int]] = None
    name: str = ""

    @property
    def depth(self) -> int:
        return self.ct.shape[0]

    def slices(self) -> List[int]:
        return list(range(self.depth)) if self.annotated is None else [int(z) for z in self.annotated]

    def block(self, z: int) -> ConditionBlock:
        zs = np.clip([z - 1, z, z + 1], 0, self.depth - 1)
        return ConditionBlock(self.ct[zs], self.spacing, int(z))

    def mask_block(self, z: int) -> np.ndarray:
        zs = np.clip([z - 1, z, z + 1], 0, self.depth - 1)
        return self.mask[zs]

    def blocks(self) -> Iterator[ConditionBlock]:
        for z in self.slices():
            yield self.block(z)

    def restore(self, pred: np.ndarray, order: int = 0) -> np.ndarray:
        """Map a (D, S, S) prediction back into the source volume grid."""
        h = self.crop[1].stop - self.crop[1].start
        w = self.crop[2].stop - self.crop[2].start
        if self.letterbox:
            ph, pw = _square_pad(h, w)
            s = max(h, w)
            full = resize(pred.astype(np.float64), (pred.shape[0], s, s), order=order,
                          mode="edge", anti_aliasing=False, preserve_range=True)
            full = full[:, ph[0]:ph[0] + h, pw[0]:pw[0] + w]
        else:
            full = resize(pred.astype(np.float64), (pred.shape[0], h, w), order=order,
                          mode="edge", anti_aliasing=False, preserve_range=True)
        out = np.zeros(self.source_shape, dtype=pred.dtype)
        out[self.crop] = full.astype(pred.dtype) if order == 0 else full
        return out


def prepare_case(ct: Volume, liver: Volume, mask: Optional[Volume] = None, size: int = 256,
                 letterbox: bool = False, annotated: Optional[Sequence[int]] = None,
                 window: Tuple[float, float] = HU_WINDOW, name: str = "") -> PreparedCase:
    if ct.shape != liver.shape or (mask is not None and mask.shape != ct.shape):
        raise ValueError("CT, liver mask and vessel mask shapes differ")
    crop = bounding_box(liver.data > 0)
    cropped = ct.data[crop].astype(np.float64)
    if cropped.shape[0] < 3:
        raise ValueError("need at least 3 slices inside the liver crop")
    h, w = cropped.shape[1:]
    side_h, side_w = (max(h, w),) * 2 if letterbox else (h, w)
    spacing = (ct.spacing[0], ct.spacing[1] * side_h / size, ct.spacing[2] * side_w / size)
    img = normalize_hu(resize_slices(cropped, size, 1, letterbox), window)
    m = None
    if mask is not None:
        m = resize_slices(mask.data[crop] > 0, size, 0, letterbox)
    if annotated is not None:
        annotated = [z - crop[0].start for z in annotated if crop[0].start <= z < crop[0].stop]
    return PreparedCase(img, m, spacing, ct.shape, ct.spacing, crop, letterbox, annotated, name)


def preprocess(ct: Volume, liver: Volume, size: int = 256, letterbox: bool = False,
               annotated: Optional[Sequence[int]] = None) -> Iterator[ConditionBlock]:
    """Stream 3-slice condition blocks centred on annotated slices of the liver crop."""
    yield from prepare_case(ct, liver, size=size, letterbox=letterbox, annotated=annotated).blocks()


# ----------------------------------------------------------------------- splits


def split_dataset(cases: Sequence, k: int, seed: int = 0) -> List[Tuple[list, list]]:
    """Seeded k-fold partition; leave-one-out when k equals the case count."""
    n = len(cases)
    if k <= 0:
        raise ValueError("k must be positive")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of cases ({n})")
    order = np.random.default_rng(seed).permutation(n)
    folds = []
    for test_idx in np.array_split(order, k):
        test = set(test_idx.tolist())
        folds.append(([cases[i] for i in range(n) if i not in test], [cases[i] for i in sorted(test)]))
    return folds


# ---------------------------------------------------------------------- phantom


@dataclass
class Branch:
    start: np.ndarray  # mm, (z, y, x)
    direction: np.ndarray  # unit vector
    length: float
    radius: float
    children: List[int] = field(default_factory=list)
    parent: int = -1

    @property
    def end(self) -> np.ndarray:
        return self.start + self.direction * self.length


@dataclass
class Phantom:
    ct: Volume
    mask: Volume
    tree: List[Branch]
    liver: Optional[Volume] = None


def _rotate_away(d: np.ndarray, angle: float, rng: np.random.Generator, flat: float) -> np.ndarray:
    """Random unit vector at ``angle`` from ``d``; ``flat`` damps the z component."""
    helper = np.array([1.0, 0, 0]) if abs(d[0]) < 0.9 else np.array([0, 1.0, 0])
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    v = np.cross(d, u)
    phi = rng.uniform(0, 2 * np.pi)
    out = np.cos(angle) * d + np.sin(angle) * (np.cos(phi) * u + np.sin(phi) * v)
    out[0] *= flat
    return out / np.linalg.norm(out)


def capsule_mask(shape, spacing, a, b, radius) -> np.ndarray:
    grid = np.stack(np.indices(shape), axis=-1) * np.asarray(spacing)
    ab = b - a
    denom = float(ab @ ab)
    s = np.clip(((grid - a) @ ab) / denom, 0, 1) if denom > 0 else np.zeros(shape)
    closest = a + s[..., None] * ab
    return np.sum((grid - closest) ** 2, axis=-1) <= radius ** 2


def generate_phantom(seed: int, size=(16, 64, 64), n_branches: int = 9,
                     radius_range: Tuple[float, float] = (1.5, 3.5), noise_sigma: float = 20.0,
                     spacing=(1.0, 1.0, 1.0), vessel_hu: float = 250.0, background_hu: float = 100.0,
                     flat: float = 0.5) -> Phantom:
    """Random binary tree of capsules rendered into a noisy CT.

    Children start at the parent's end point with a smaller radius, so the
    tree is connected and radii shrink child-ward. ``flat`` keeps branches
    mostly in-plane, which suits thin slabs.
    """
    if np.isscalar(size):
        size = (int(size),) * 3
    size = tuple(int(s) for s in size)
    r_lo, r_hi = radius_range
    if not 0 < r_lo < r_hi:
        raise ValueError(f"degenerate radius range {radius_range}")
    if n_branches < 1:
        raise ValueError("need at least one branch")
    rng = np.random.default_rng(seed)
    spacing = np.asarray(spacing, dtype=np.float64)
    extent = (np.asarray(size) - 1) * spacing
    margin = np.minimum(extent * 0.1, r_hi)

    def inside(p):
        return np.all(p >= margin) and np.all(p <= extent - margin)

    def clip_length(start, d, length):
        # shorten a branch until its end stays inside the volume
        while length > 2 * r_lo and not inside(start + d * length):
            length *= 0.8
        return length if inside(start + d * length) else 0.0

    # root enters near the centre of one in-plane edge, heading inward
    start = extent / 2
    side = rng.integers(4)
    axis, pos = (1 + side // 2), (margin[1 + side // 2] if side % 2 == 0 else extent[1 + side // 2] - margin[1 + side // 2])
    start = start.copy()
    start[axis] = pos
    start[0] = rng.uniform(0.35, 0.65) * extent[0]
    d = extent / 2 - start
    d[0] = 0
    d = _rotate_away(d / np.linalg.norm(d), rng.uniform(0, 0.3), rng, flat)
    length = clip_length(start, d, rng.uniform(0.45, 0.7) * extent[1:].max())
    tree = [Branch(start, d, max(length, 2 * r_lo), r_hi)]

    attempts = 0
    while len(tree) < n_branches and attempts < 50 * n_branches:
        attempts += 1
        open_ids = [i for i, b in enumerate(tree) if len(b.children) < 2 and b.radius > r_lo * (1 + 1e-9)]
        if not open_ids:
            break
        pid = open_ids[int(rng.integers(len(open_ids)))]
        parent = tree[pid]
        radius = max(parent.radius * rng.uniform(0.65, 0.85), r_lo)
        if radius >= parent.radius:
            continue
        d = _rotate_away(parent.direction, rng.uniform(0.35, 1.0), rng, flat)
        length = clip_length(parent.end, d, parent.length * rng.uniform(0.6, 0.9))
        if length <= 0:
            continue
        tree.append(Branch(parent.end.copy(), d, length, radius, parent=pid))
        parent.children.append(len(tree) - 1)

    mask = np.zeros(size, bool)
    for b in tree:
        mask |= capsule_mask(size, spacing, b.start, b.end, b.radius)

    texture = ndimage.gaussian_filter(rng.normal(0, 1, size), 2.0)
    texture *= 15.0 / max(texture.std(), 1e-8)
    ct = background_hu + texture
    ct[mask] = vessel_hu
    ct = ct + rng.normal(0, noise_sigma, size)
    sp = tuple(spacing.tolist())
    return Phantom(Volume(ct.astype(np.float32), sp, "HU"), Volume(mask, sp), tree,
                   Volume(np.ones(size, np.uint8), sp))
