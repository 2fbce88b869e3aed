"""Reverse-diffusion sampling, seed ensembles, rescaling and connected-component clean-up."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .diffusion import NoiseSchedule, posterior_step, signed_to_mask
from .graph import VesselGraph, full_graph
from .graph_attention import make_graph_batch
from .model import VesselDiffusionModel

STRUCTURE_26 = np.ones((3, 3, 3), dtype=bool)


@dataclass
class SegmentationResult:
    prob: np.ndarray  # pre-threshold signed sample (or vote fraction for ensembles)
    mask: np.ndarray  # bool
    seeds: tuple
    steps: int
    ensemble_size: int = 1


class NonFiniteSample(RuntimeError):
    pass


def run_chain(predict_eps: Callable[[torch.Tensor, torch.Tensor], torch.Tensor], shape, sched: NoiseSchedule,
              generator: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    """x_T ~ N(0, I), then T posterior steps using ``predict_eps(x_t, t)``."""
    x = torch.randn(shape, generator=generator, dtype=dtype)
    for step in range(sched.T, 0, -1):
        t = torch.full((shape[0],), step, dtype=torch.long)
        eps_hat = predict_eps(x, t)
        z = torch.randn(shape, generator=generator, dtype=dtype) if step > 1 else None
        x = posterior_step(x, eps_hat, t, sched, z)
        if not torch.isfinite(x).all():
            raise NonFiniteSample(f"non-finite values at t={step}")
    return x


def inference_graph(model: VesselDiffusionModel, graph: Optional[VesselGraph] = None) -> VesselGraph:
    cfg = model.cfg
    return graph if graph is not None else full_graph(cfg.node_grid, cfg.block_shape)


def model_predictor(model: VesselDiffusionModel, cond: torch.Tensor, graph: Optional[VesselGraph] = None):
    graphs = None
    if model.uses_graph:
        g = inference_graph(model, graph)
        graphs = make_graph_batch([g] * cond.shape[0], model.cfg.bottleneck_hw, model.cfg.self_loops)

    def predict(x_t, t):
        return model(x_t, cond, t, graphs).eps

    return predict


def _as_batch(cond) -> torch.Tensor:
    c = torch.as_tensor(np.asarray(cond, dtype=np.float32))
    if c.dim() == 3:
        c = c[None]
    if c.dim() != 4 or c.shape[1] != 3:
        raise ValueError(f"condition must be (B, 3, H, W), got {tuple(c.shape)}")
    return c


@torch.no_grad()
def sample(model: VesselDiffusionModel, cond, sched: NoiseSchedule, seed: int, steps: Optional[int] = None,
           graph: Optional[VesselGraph] = None, batch_size: int = 0) -> SegmentationResult:
    """Segment the central slice of each block; ``cond`` is (3, H, W) or (B, 3, H, W).

    The inference graph defaults to the complete graph over the node grid.
    ``batch_size`` splits large stacks; each chunk gets its own seeded stream.
    """
    if steps is not None and steps != sched.T:
        raise ValueError(f"requested {steps} steps but the checkpoint schedule has T={sched.T}")
    c = _as_batch(cond)
    model.eval()
    bs = batch_size or len(c)
    out = []
    for k, start in enumerate(range(0, len(c), bs)):
        chunk = c[start:start + bs]
        gen = torch.Generator().manual_seed(int(seed) * 1_000_003 + k)
        x = run_chain(model_predictor(model, chunk, graph), (len(chunk), 1) + tuple(chunk.shape[-2:]), sched, gen)
        out.append(x[:, 0])
    x = torch.cat(out).numpy()
    if np.ndim(cond) == 3:
        x = x[0]
    return SegmentationResult(x, signed_to_mask(x), (int(seed),), sched.T)


def vote(masks: Sequence[np.ndarray]) -> np.ndarray:
    """Per-voxel majority; ties go to foreground."""
    stack = np.asarray(masks, dtype=bool)
    return 2 * stack.sum(axis=0) >= len(stack)


def combine(results: Sequence[SegmentationResult], mode: str = "vote") -> SegmentationResult:
    if not results:
        raise ValueError("nothing to ensemble")
    seeds = tuple(s for r in results for s in r.seeds)
    if mode == "vote":
        frac = np.mean([r.mask for r in results], axis=0)
        mask = vote([r.mask for r in results])
        return SegmentationResult(frac, mask, seeds, results[0].steps, len(results))
    if mode == "average":
        mean = np.mean([r.prob for r in results], axis=0)
        return SegmentationResult(mean, signed_to_mask(mean), seeds, results[0].steps, len(results))
    raise ValueError(f"unknown ensemble mode {mode!r}")


def ensemble(model: VesselDiffusionModel, cond, sched: NoiseSchedule, seeds: Sequence[int],
             steps: Optional[int] = None, mode: str = "vote", graph: Optional[VesselGraph] = None,
             batch_size: int = 0) -> SegmentationResult:
    if len(seeds) == 0:
        raise ValueError("ensemble needs at least one seed")
    runs = [sample(model, cond, sched, s, steps, graph, batch_size) for s in seeds]
    if len(runs) == 1:
        return runs[0]
    return combine(runs, mode)


def rescale(grid: np.ndarray, target, kind: str = "binary") -> np.ndarray:
    """Resize the trailing (H, W) axes: nearest for masks, bilinear for probabilities."""
    th, tw = (int(v) for v in target)
    if th <= 0 or tw <= 0:
        raise ValueError(f"target size must be positive, got {target}")
    arr = np.asarray(grid)
    if arr.shape[-2:] == (th, tw):
        return arr.copy()
    lead = arr.shape[:-2]
    x = torch.as_tensor(arr.reshape((-1, 1) + arr.shape[-2:]).astype(np.float64))
    if kind == "binary":
        y = F.interpolate(x, size=(th, tw), mode="nearest-exact")
        return (y.numpy() > 0.5).reshape(lead + (th, tw)).astype(arr.dtype)
    if kind == "prob":
        y = F.interpolate(x, size=(th, tw), mode="bilinear", align_corners=False)
        return y.numpy().reshape(lead + (th, tw))
    raise ValueError(f"kind must be 'binary' or 'prob', got {kind!r}")


def remove_small_components(mask: np.ndarray, frac: float = 0.01) -> np.ndarray:
    """Drop 26-connected regions smaller than ``frac`` of the largest region."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    labels, n = ndimage.label(mask, structure=STRUCTURE_26)
    sizes = np.bincount(labels.ravel())[1:]
    keep = np.zeros(n + 1, dtype=bool)
    keep[1:] = sizes >= frac * sizes.max()
    return keep[labels]


def segment_case(model: VesselDiffusionModel, case, sched: NoiseSchedule, seeds: Sequence[int] = (0,),
                 mode: str = "vote", postprocess: bool = True, graph: Optional[VesselGraph] = None,
                 batch_size: int = 0, restore: bool = False):
    """Segment every annotated slice of a prepared case; returns (mask volume, per-slice result).

    Slices that are not annotated stay background. With ``restore`` the mask
    is mapped back to the source grid before clean-up.
    """
    zs = case.slices()
    cond = np.stack([case.block(z).slices for z in zs])
    res = ensemble(model, cond, sched, list(seeds), None, mode, graph, batch_size)
    vol = np.zeros(case.ct.shape, dtype=bool)
    vol[zs] = res.mask
    if restore:
        vol = case.restore(vol.astype(np.uint8), order=0).astype(bool)
    if postprocess:
        vol = remove_small_components(vol)
    return vol, res
