"""Loss composition, the optimisation loop and checkpoint archives."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from .diffusion import NoiseSchedule, denoising_loss, forward_sample, make_linear_schedule, mask_to_signed
from .graph import EdgePolicy, VesselGraph, build_graph
from .graph_attention import GraphBatch, graph_loss, make_graph_batch
from .model import ModelConfig, VesselDiffusionModel

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "vesseldiff-checkpoint-1"
LOSS_COLUMNS = ["step", "loss_total", "loss_den", "loss_graph", "lr", "skipped"]


class NonFiniteLoss(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 10
    iterations: int = 10_000
    seed: int = 0
    weight_decay: float = 1e-2
    graph_weight: float = 1.0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    checkpoint_every: int = 0  # 0 = only at the end
    log_every: int = 1
    lr_schedule: str = "none"  # or "cosine"
    ema_decay: float = 0.0  # 0 disables the weight average
    divergence_factor: float = 10.0
    divergence_patience: int = 100
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        for name in ("lr", "batch_size", "iterations", "T", "beta_start", "beta_end",
                     "divergence_factor", "divergence_patience"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("weight_decay", "graph_weight", "checkpoint_every", "ema_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lr_schedule not in ("none", "cosine"):
            raise ValueError("lr_schedule must be 'none' or 'cosine'")
        if not self.ema_decay < 1:
            raise ValueError("ema_decay must be below 1")

    @property
    def tier(self) -> str:
        return self.model.tier

    @property
    def node_grid(self):
        return self.model.node_grid

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.as_dict()
        return d


# ------------------------------------------------------------------------- data


@dataclass
class BlockDataset:
    """Aligned condition blocks, central-slice targets and per-block graphs."""

    cond: np.ndarray  # (N, 3, H, W) float32
    target: np.ndarray  # (N, H, W) bool
    graphs: Optional[List[VesselGraph]] = None
    keys: Optional[List[tuple]] = None  # (case, slice) per sample

    def __len__(self):
        return len(self.cond)

    def __post_init__(self):
        if self.cond.ndim != 4 or self.cond.shape[1] != 3:
            raise ValueError("condition blocks must be (N, 3, H, W)")
        if self.target.shape != (self.cond.shape[0],) + self.cond.shape[2:]:
            raise ValueError("targets are not aligned with condition blocks")
        if self.graphs is not None and len(self.graphs) != len(self.cond):
            raise ValueError("one graph per block is required")


def block_dataset(cases, grid=None, policy: Optional[EdgePolicy] = None) -> BlockDataset:
    """Stack every annotated slice of prepared cases; graphs come from the ground truth."""
    cond, target, graphs, keys = [], [], [], []
    for case in cases:
        for z in case.slices():
            cond.append(case.block(z).slices)
            target.append(case.mask[z])
            keys.append((case.name, z))
            if grid is not None:
                graphs.append(build_graph(case.mask_block(z), grid, policy))
    return BlockDataset(np.asarray(cond, np.float32), np.asarray(target, bool),
                        graphs if grid is not None else None, keys)


# ------------------------------------------------------------------------- loss


@dataclass
class LossTerms:
    total: torch.Tensor
    den: torch.Tensor
    graph: torch.Tensor


def total_loss(model: VesselDiffusionModel, x0: torch.Tensor, cond: torch.Tensor, t: torch.Tensor,
               eps: torch.Tensor, sched: NoiseSchedule, graphs: Optional[GraphBatch] = None,
               graph_weight: float = 1.0) -> LossTerms:
    """L_den + weight * L_graph; the graph term is zero when the tier has no graph branch."""
    state = forward_sample(x0, t, eps, sched)
    out = model(state.x_t, cond, t, graphs)
    den = denoising_loss(eps, out.eps)
    if out.node_probs is None:
        g = torch.zeros((), dtype=den.dtype)
        total = den
    else:
        if graphs is None or graphs.labels is None:
            raise ValueError("graph loss needs node labels from ground-truth graphs")
        g = graph_loss(out.node_probs, graphs.labels.to(out.node_probs.dtype))
        total = den + graph_weight * g
    if not (torch.isfinite(den) and torch.isfinite(g)):
        raise NonFiniteLoss(f"non-finite loss: den={float(den)} graph={float(g)}")
    return LossTerms(total, den, g)


# ------------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: VesselDiffusionModel, sched: NoiseSchedule, cfg: Optional[TrainConfig] = None,
                    step: int = 0) -> None:
    archive = {
        "format": CHECKPOINT_FORMAT,
        "model_config": model.cfg.as_dict(),
        "train_config": None if cfg is None else cfg.as_dict(),
        "schedule": sched.to_text(),
        "step": step,
        "state_dict": model.state_dict(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(archive, buf)
    path.write_bytes(buf.getvalue())


def load_checkpoint(path, expect_schedule: Optional[NoiseSchedule] = None):
    """Return (model, schedule, archive dict)."""
    archive = torch.load(str(path), map_location="cpu", weights_only=True)
    if archive.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint archive")
    mc = dict(archive["model_config"])
    model = VesselDiffusionModel(ModelConfig(**mc))
    model.load_state_dict(archive["state_dict"])
    model.eval()
    sched = NoiseSchedule.from_text(archive["schedule"])
    if expect_schedule is not None and expect_schedule.as_dict() != sched.as_dict():
        raise ValueError(f"schedule mismatch: checkpoint {sched.as_dict()} vs requested {expect_schedule.as_dict()}")
    return model, sched, archive


# ------------------------------------------------------------------------- loop


@dataclass
class TrainResult:
    model: VesselDiffusionModel
    schedule: NoiseSchedule
    losses: List[dict]
    skipped: List[int]


class DivergenceMonitor:
    def __init__(self, factor: float, patience: int):
        self.factor = factor
        self.patience = patience
        self.initial = None
        self.run = 0

    def update(self, loss: float) -> bool:
        if self.initial is None:
            self.initial = loss
            return False
        self.run = self.run + 1 if loss > self.factor * self.initial else 0
        return self.run >= self.patience


def _lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_schedule == "cosine":
        return 0.5 * cfg.lr * (1 + math.cos(math.pi * step / cfg.iterations))
    return cfg.lr


def write_loss_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def train(cfg: TrainConfig, data: BlockDataset, out_dir=None,
          callback: Optional[Callable[[int, LossTerms], None]] = None) -> TrainResult:
    """Run the optimisation loop; writes loss.csv and checkpoint.pt when ``out_dir`` is set."""
    torch.manual_seed(cfg.seed)
    mcfg = cfg.model
    if data.cond.shape[-1] != mcfg.image_size or data.cond.shape[-2] != mcfg.image_size:
        raise ValueError(f"data is {data.cond.shape[-2:]} but the model expects {mcfg.image_size}")
    needs_graph = mcfg.tier == "ABC"
    if needs_graph and data.graphs is None:
        raise ValueError("tier ABC needs ground-truth graphs in the dataset")
    model = VesselDiffusionModel(mcfg)
    model.train()
    sched = cfg.schedule()
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    ema = copy.deepcopy(model).eval() if cfg.ema_decay > 0 else None

    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    cond_all = torch.from_numpy(data.cond)
    x0_all = mask_to_signed(torch.from_numpy(data.target).float())[:, None]
    monitor = DivergenceMonitor(cfg.divergence_factor, cfg.divergence_patience)
    out_dir = None if out_dir is None else Path(out_dir)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    rows, skipped = [], []
    order, pos = rng.permutation(len(data)), 0
    for step in range(1, cfg.iterations + 1):
        if pos + cfg.batch_size > len(order):
            order, pos = rng.permutation(len(data)), 0
        idx = order[pos:pos + cfg.batch_size]
        pos += cfg.batch_size
        t = torch.randint(1, sched.T + 1, (len(idx),), generator=gen)
        eps = torch.randn(x0_all[idx].shape, generator=gen)
        graphs = None
        if needs_graph:
            graphs = make_graph_batch([data.graphs[i] for i in idx], mcfg.bottleneck_hw, mcfg.self_loops)
        lr = _lr_at(cfg, step - 1)
        for group in opt.param_groups:
            group["lr"] = lr
        try:
            terms = total_loss(model, x0_all[idx], cond_all[idx], t, eps, sched, graphs, cfg.graph_weight)
        except NonFiniteLoss as exc:
            keys = [data.keys[i] for i in idx] if data.keys else idx.tolist()
            log.warning("step %d skipped (%s); batch %s", step, exc, keys)
            skipped.append(step)
            rows.append({"step": step, "loss_total": float("nan"), "loss_den": float("nan"),
                         "loss_graph": float("nan"), "lr": lr, "skipped": 1})
            continue
        opt.zero_grad(set_to_none=True)
        terms.total.backward()
        opt.step()
        if ema is not None:
            with torch.no_grad():
                for pe, p in zip(ema.parameters(), model.parameters()):
                    pe.mul_(cfg.ema_decay).add_(p, alpha=1 - cfg.ema_decay)
        value = float(terms.total.detach())
        if step % cfg.log_every == 0 or step == cfg.iterations:
            rows.append({"step": step, "loss_total": value, "loss_den": float(terms.den.detach()),
                         "loss_graph": float(terms.graph.detach()), "lr": lr, "skipped": 0})
        if callback is not None:
            callback(step, terms)
        if monitor.update(value):
            raise TrainingDiverged(
                f"loss above {cfg.divergence_factor}x the initial {monitor.initial:.4g} "
                f"for {cfg.divergence_patience} steps (step {step}, loss {value:.4g})"
            )
        if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"checkpoint_{step:07d}.pt", ema or model, sched, cfg, step)

    final = ema or model
    final.eval()
    if out_dir is not None:
        write_loss_csv(rows, out_dir / "loss.csv")
        save_checkpoint(out_dir / "checkpoint.pt", final, sched, cfg, cfg.iterations)
    return TrainResult(final, sched, rows, skipped)
