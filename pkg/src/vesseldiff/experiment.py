"""Desk-scale phantom suite: generate cases, train tiers, sample and score."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import PreparedCase, generate_phantom, prepare_case
from .graph import EdgePolicy, VesselGraph, empty_graph
from .inference import segment_case
from .metrics import MetricReport, evaluate_case, summarize, write_report_csv
from .model import VesselDiffusionModel
from .training import TrainConfig, block_dataset, train

log = logging.getLogger(__name__)


@dataclass
class SuiteConfig:
    n_train: int = 20
    n_test: int = 5
    depth: int = 16
    size: int = 64
    n_branches: int = 9
    radius_min: float = 1.5
    radius_max: float = 3.5
    noise_sigma: float = 20.0
    test_seed_offset: int = 1000

    def phantom(self, seed: int):
        return generate_phantom(seed, (self.depth, self.size, self.size), self.n_branches,
                                (self.radius_min, self.radius_max), self.noise_sigma)


@dataclass
class Suite:
    train: List[PreparedCase]
    test: List[PreparedCase]


def make_suite(cfg: SuiteConfig, image_size: Optional[int] = None) -> Suite:
    size = image_size or cfg.size

    def case(seed, prefix):
        p = cfg.phantom(seed)
        return prepare_case(p.ct, p.liver, p.mask, size=size, name=f"{prefix}{seed:04d}")

    return Suite(
        [case(s, "train") for s in range(cfg.n_train)],
        [case(cfg.test_seed_offset + s, "test") for s in range(cfg.n_test)],
    )


def evaluate_model(model: VesselDiffusionModel, sched, cases: Sequence[PreparedCase], seeds=(0,),
                   postprocess: bool = True, graph: Optional[VesselGraph] = None, batch_size: int = 0):
    """Segment and score each case; returns (reports, masks)."""
    reports, masks = [], []
    for case in cases:
        pred, _ = segment_case(model, case, sched, seeds, postprocess=postprocess, graph=graph,
                               batch_size=batch_size)
        reports.append(evaluate_case(case.name, pred, case.mask, case.spacing))
        masks.append(pred)
        log.info("%s dsc=%.4f con=%s", case.name, reports[-1].dsc or 0.0, reports[-1].con_label)
    return reports, masks


def empty_inference_graph(model: VesselDiffusionModel) -> VesselGraph:
    return empty_graph(model.cfg.node_grid, model.cfg.block_shape)


def train_tier(cfg: TrainConfig, suite: Suite, out_dir=None, policy: Optional[EdgePolicy] = None):
    grid = cfg.model.node_grid if cfg.model.tier == "ABC" else None
    data = block_dataset(suite.train, grid, policy)
    return train(cfg, data, out_dir)


COMPARISON_COLUMNS = ["tier", "cases", "dsc_mean", "dsc_std", "sen_mean", "spe_mean", "cldice_mean",
                      "con_mean", "excluded"]


def comparison_row(tier: str, reports: Sequence[MetricReport]) -> dict:
    s = summarize(reports)
    row = {"tier": tier, "cases": len(reports), "excluded": sum(r.excluded for r in reports)}
    for key in ("dsc", "sen", "spe", "cldice", "con"):
        mean, std = s.get(key, (None, None))
        row[f"{key}_mean"] = mean
        if key == "dsc":
            row["dsc_std"] = std
    return row


def write_comparison(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARISON_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else (f"{v:.6f}" if isinstance(v, float) else v)) for k, v in r.items()})
