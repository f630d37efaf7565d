"""Segmentation quality metrics with per-organ aggregation and report output.

Undefined values (e.g. HD95 when exactly one mask is empty, RVD with an empty
ground truth) are carried as NaN, surfaced in the report, and excluded from
averages rather than silently zeroed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .errors import DimMismatch
from .grids import LabelMap
from .priors import BinaryMask, squared_edt

METRIC_COLUMNS = ("dsc", "iou", "f1_50", "f1", "f2", "precision", "recall", "hd95")


@dataclass
class OrganMetrics:
    dsc: float = math.nan
    iou: float = math.nan
    f1_50: float = math.nan
    f1: float = math.nan
    f2: float = math.nan
    precision: float = math.nan
    recall: float = math.nan
    hd95: float = math.nan
    rvd: float = math.nan


@dataclass
class MetricsReport:
    per_organ: dict[int, OrganMetrics]
    averages: OrganMetrics
    undefined_counts: dict[str, int]


def _check_dims(pred: np.ndarray, gt: np.ndarray):
    if pred.shape != gt.shape:
        raise DimMismatch(f"mask dims {pred.shape} vs {gt.shape}")


def dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice overlap 2|P&G| / (|P|+|G|); both empty -> 1, one empty -> 0."""
    _check_dims(pred, gt)
    p = int(np.count_nonzero(pred))
    g = int(np.count_nonzero(gt))
    if p == 0 and g == 0:
        return 1.0
    inter = int(np.count_nonzero(np.logical_and(pred, gt)))
    return 2.0 * inter / (p + g)


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Jaccard index |P&G| / |P|G|; same empty-mask conventions as dsc."""
    _check_dims(pred, gt)
    inter = int(np.count_nonzero(np.logical_and(pred, gt)))
    union = int(np.count_nonzero(np.logical_or(pred, gt)))
    if union == 0:
        return 1.0
    return inter / union


def miou(per_class_iou: dict[int, float]) -> float:
    """Mean IoU over foreground classes (background never enters)."""
    vals = [v for c, v in per_class_iou.items() if c != 0 and not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def precision_recall_fbeta(
    pred: np.ndarray, gt: np.ndarray, beta: float = 1.0
) -> tuple[float, float, float]:
    """Standard voxel-count precision / recall / F-beta; 0/0 counts as 0."""
    _check_dims(pred, gt)
    tp = int(np.count_nonzero(np.logical_and(pred, gt)))
    fp = int(np.count_nonzero(np.logical_and(pred, np.logical_not(gt))))
    fn = int(np.count_nonzero(np.logical_and(np.logical_not(pred), gt)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    b2 = beta * beta
    denom = b2 * precision + recall
    fbeta = (1.0 + b2) * precision * recall / denom if denom else 0.0
    return precision, recall, fbeta


def hd95(
    pred: np.ndarray, gt: np.ndarray, spacing: tuple[float, float, float]
) -> float:
    """Symmetric 95th-percentile Hausdorff distance in mm.

    Directed distances come from the exact EDT of one mask sampled at the
    other's voxels; each direction takes the linear-interpolation percentile
    at rank 0.95*(n-1); the symmetric value is the max of the two.  Both
    masks empty -> 0; exactly one empty -> NaN.
    """
    _check_dims(pred, gt)
    p_any = bool(pred.any())
    g_any = bool(gt.any())
    if not p_any and not g_any:
        return 0.0
    if p_any != g_any:
        return math.nan
    d_to_gt = np.sqrt(squared_edt(BinaryMask(gt, spacing)).data)
    d_to_pred = np.sqrt(squared_edt(BinaryMask(pred, spacing)).data)
    d_pg = np.sort(d_to_gt[pred.astype(bool)])
    d_gp = np.sort(d_to_pred[gt.astype(bool)])
    return float(max(np.percentile(d_pg, 95), np.percentile(d_gp, 95)))


def rvd(pred: np.ndarray, gt: np.ndarray) -> float:
    """Relative volume difference in percent; undefined for empty ground truth."""
    _check_dims(pred, gt)
    g = int(np.count_nonzero(gt))
    if g == 0:
        return math.nan
    p = int(np.count_nonzero(pred))
    return (p - g) / g * 100.0


def evaluate_masks(
    pred: np.ndarray, gt: np.ndarray, spacing: tuple[float, float, float]
) -> OrganMetrics:
    """All metrics for one binary pair.  F1_50 is F1 after thresholding soft
    predictions at 0.5, which for hard labels equals F1 exactly."""
    precision, recall, f1 = precision_recall_fbeta(pred, gt, beta=1.0)
    _, _, f2 = precision_recall_fbeta(pred, gt, beta=2.0)
    return OrganMetrics(
        dsc=dsc(pred, gt),
        iou=iou(pred, gt),
        f1_50=f1,
        f1=f1,
        f2=f2,
        precision=precision,
        recall=recall,
        hd95=hd95(pred, gt, spacing),
        rvd=rvd(pred, gt),
    )


def evaluate_labelmaps(pred: LabelMap, gt: LabelMap, num_classes: int) -> MetricsReport:
    """Binarize per foreground class and evaluate; skip organs absent in both."""
    if pred.dims != gt.dims:
        raise DimMismatch(f"label dims {pred.dims} vs {gt.dims}")
    if pred.spacing != gt.spacing:
        raise DimMismatch(f"label spacing {pred.spacing} vs {gt.spacing}")
    per_organ: dict[int, OrganMetrics] = {}
    for cid in range(1, num_classes):
        p = pred.data == cid
        g = gt.data == cid
        if not p.any() and not g.any():
            per_organ[cid] = OrganMetrics()  # all NaN: absent everywhere
            continue
        per_organ[cid] = evaluate_masks(p, g, gt.spacing)

    averages = OrganMetrics()
    undefined: dict[str, int] = {}
    for f in fields(OrganMetrics):
        vals = [getattr(m, f.name) for m in per_organ.values()]
        defined = [v for v in vals if not math.isnan(v)]
        undefined[f.name] = len(vals) - len(defined)
        setattr(averages, f.name, float(np.mean(defined)) if defined else math.nan)
    return MetricsReport(per_organ, averages, undefined)


# --- report emission -------------------------------------------------------

def _fmt(value: float, width: int = 8) -> str:
    if math.isnan(value):
        return "n/a".rjust(width)
    return f"{value:.4f}".rjust(width)


def format_report_table(report: MetricsReport, organ_names: dict[int, str] | None = None) -> str:
    """Text table with the standard column order (DSC ... HD95) plus averages."""
    names = organ_names or {}
    header = "Organ".ljust(24) + "".join(c.upper().rjust(10) for c in METRIC_COLUMNS)
    lines = [header, "-" * len(header)]
    for cid, m in sorted(report.per_organ.items()):
        label = names.get(cid, f"class {cid}")
        lines.append(
            label.ljust(24) + "".join(_fmt(getattr(m, c), 10) for c in METRIC_COLUMNS)
        )
    lines.append("-" * len(header))
    lines.append(
        "Average (per organ)".ljust(24)
        + "".join(_fmt(getattr(report.averages, c), 10) for c in METRIC_COLUMNS)
    )
    return "\n".join(lines)


def format_report_kv(report: MetricsReport) -> str:
    """Machine-readable key:value lines, including RVD and undefined counts."""
    lines = []
    all_fields = [f.name for f in fields(OrganMetrics)]
    for cid, m in sorted(report.per_organ.items()):
        for name in all_fields:
            lines.append(f"organ.{cid}.{name}={getattr(m, name)!r}")
    for name in all_fields:
        lines.append(f"average.{name}={getattr(report.averages, name)!r}")
    for name, count in report.undefined_counts.items():
        lines.append(f"undefined.{name}={count}")
    return "\n".join(lines) + "\n"
