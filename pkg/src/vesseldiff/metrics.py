"""Overlap, centerline and connectivity metrics for binary vessel volumes."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize

CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)
REPORT_COLUMNS = ["case", "dsc", "sen", "spe", "cldice", "con", "comp_pred", "comp_gt", "excluded"]


@dataclass
class MetricReport:
    case: str
    dsc: Optional[float]
    sen: Optional[float]
    spe: Optional[float]
    cldice: Optional[float]
    con: Optional[float]
    comp_pred: int
    comp_gt: int
    excluded: bool
    spacing: tuple = (1.0, 1.0, 1.0)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("spacing")
        return {k: ("" if v is None else v) for k, v in d.items()}

    @property
    def con_label(self) -> str:
        if self.con is None:
            return f"n/a ({self.comp_pred}/{self.comp_gt})"
        return f"{self.con:.2f} ({self.comp_pred}/{self.comp_gt})"


def _pair(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return pred, gt


def _ratio(num, den) -> Optional[float]:
    return None if den == 0 else float(num) / float(den)


def overlap_metrics(pred, gt):
    """(dsc, sen, spe) from confusion counts; ``None`` where undefined."""
    pred, gt = _pair(pred, gt)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(pred.size - tp - fp - fn)
    return _ratio(2 * tp, 2 * tp + fp + fn), _ratio(tp, tp + fn), _ratio(tn, tn + fp)


def skeleton(mask) -> np.ndarray:
    """Deterministic thinning (Lee's simple-point removal, 2D or 3D)."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        return mask.copy()
    return skeletonize(mask).astype(bool)


def cl_dice(pred, gt) -> Optional[float]:
    """Harmonic mean of topology precision and topology sensitivity."""
    pred, gt = _pair(pred, gt)
    s_pred = skeleton(pred)
    s_gt = skeleton(gt)
    if not s_pred.any() or not s_gt.any():
        return None
    tprec = np.count_nonzero(s_pred & gt) / np.count_nonzero(s_pred)
    tsens = np.count_nonzero(s_gt & pred) / np.count_nonzero(s_gt)
    if tprec + tsens == 0:
        return 0.0
    return float(2 * tprec * tsens / (tprec + tsens))


def label_components(mask):
    """26-connected labelling; returns (labels, sizes) with sizes[k] for label k+1."""
    labels, n = ndimage.label(np.asarray(mask).astype(bool), structure=CONNECTIVITY_26)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    return labels, sizes


def count_components(mask, spacing=(1.0, 1.0, 1.0), min_volume: float = 120.0) -> int:
    """Number of 26-connected regions with physical volume strictly above ``min_volume`` (mm^3)."""
    _, sizes = label_components(mask)
    voxel = float(np.prod(spacing))
    return int(np.count_nonzero(sizes * voxel > min_volume))


def connectivity(pred, gt, spacing=(1.0, 1.0, 1.0), min_volume: float = 120.0):
    """Con = |comp(pred)| / |comp(gt)|.

    Returns ``(con, (n_pred, n_gt), excluded)``; ``con`` is ``None`` when the
    ground truth has no qualifying region, and ``excluded`` marks over-connected
    cases (con < 1).
    """
    pred, gt = _pair(pred, gt)
    n_pred = count_components(pred, spacing, min_volume)
    n_gt = count_components(gt, spacing, min_volume)
    if n_gt == 0:
        return None, (n_pred, n_gt), False
    con = n_pred / n_gt
    return con, (n_pred, n_gt), con < 1.0


def evaluate_case(case: str, pred, gt, spacing=(1.0, 1.0, 1.0), min_volume: float = 120.0) -> MetricReport:
    dsc, sen, spe = overlap_metrics(pred, gt)
    con, (n_pred, n_gt), excluded = connectivity(pred, gt, spacing, min_volume)
    return MetricReport(
        case=case, dsc=dsc, sen=sen, spe=spe, cldice=cl_dice(pred, gt), con=con,
        comp_pred=n_pred, comp_gt=n_gt, excluded=bool(excluded), spacing=tuple(float(s) for s in spacing),
    )


def summarize(reports: Sequence[MetricReport], skip_excluded: bool = True) -> dict:
    """Mean and standard deviation per metric over cases with a defined value."""
    out = {}
    for key in ("dsc", "sen", "spe", "cldice", "con"):
        vals = [
            getattr(r, key) for r in reports
            if getattr(r, key) is not None and not (skip_excluded and key == "con" and r.excluded)
        ]
        out[key] = (float(np.mean(vals)), float(np.std(vals))) if vals else (math.nan, math.nan)
    return out


def write_report_csv(reports: Iterable[MetricReport], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in reports:
            row = r.row()
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
