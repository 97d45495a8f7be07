"""Evaluation measures for saliency maps against binary ground truth:
MAE, the 256-threshold precision/recall sweep with max F-measure, the
adaptive-threshold average F-measure, balanced error rate, and mean IoU.

Conventions (declared here because benchmarks differ):
- F_beta uses beta^2 = 0.3 and is 0 when its denominator is 0.
- A pixel is predicted positive at threshold t iff pred >= t AND pred > 0;
  the second clause only matters at t = 0 and makes an all-zero map an empty
  prediction rather than an all-positive one.
- maxF sweeps thresholds t = i/255 (i = 0..255), averages precision and
  recall across images per threshold, then takes the best F over thresholds.
- avgF binarizes each map at min(2*mean(map), 1) and averages per-image F.
- An empty prediction has precision 0 unless the ground truth is also empty,
  in which case precision = recall = 1.
"""

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

BETA_SQ = 0.3
N_THRESHOLDS = 256


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")


def mae(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean absolute error over pixels of one image."""
    _check_pair(pred, gt)
    return float(np.abs(pred.astype(np.float64) - gt).mean())


def dataset_mae(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> float:
    """Dataset MAE is the mean of per-image MAEs."""
    return float(np.mean([mae(p, g) for p, g in zip(preds, gts)]))


@dataclass
class PrPoint:
    threshold: float
    precision: float
    recall: float


def _pr_at_counts(tp: float, pred_pos: float, gt_pos: float) -> tuple[float, float]:
    if pred_pos == 0:
        if gt_pos == 0:
            return 1.0, 1.0
        return 0.0, 0.0
    precision = tp / pred_pos
    recall = tp / gt_pos if gt_pos > 0 else 1.0
    return precision, recall


def _f_beta(p: float, r: float) -> float:
    denom = BETA_SQ * p + r
    if denom == 0:
        return 0.0
    return (1 + BETA_SQ) * p * r / denom


@dataclass
class FMeasureResult:
    max_f: float
    avg_f: float
    curve: list = field(default_factory=list)


def f_measure_curve(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> FMeasureResult:
    """Threshold-swept max F plus adaptive-threshold average F.

    The sweep uses a histogram per image: counting predictions in the bins
    [i/255, (i+1)/255) makes #(pred >= i/255) an exclusive cumulative sum,
    which reproduces the brute-force >= comparison exactly.
    """
    if len(preds) == 0:
        raise ValueError("f_measure_curve needs a non-empty dataset")
    thresholds = np.arange(N_THRESHOLDS) / 255.0
    edges = np.concatenate([thresholds, [np.inf]])
    n = len(preds)
    precisions = np.zeros((n, N_THRESHOLDS))
    recalls = np.zeros((n, N_THRESHOLDS))
    per_image_f = np.zeros(n)
    for i, (pred, gt) in enumerate(zip(preds, gts)):
        _check_pair(pred, gt)
        pos = gt >= 0.5
        nonzero = pred > 0
        gt_pos = int(pos.sum())
        hist_pos, _ = np.histogram(pred[pos & nonzero], bins=edges)
        hist_all, _ = np.histogram(pred[nonzero], bins=edges)
        tp = hist_pos[::-1].cumsum()[::-1].astype(np.float64)
        pred_pos = hist_all[::-1].cumsum()[::-1].astype(np.float64)
        for j in range(N_THRESHOLDS):
            precisions[i, j], recalls[i, j] = _pr_at_counts(tp[j], pred_pos[j], gt_pos)

        tau = min(2.0 * float(pred.mean()), 1.0)
        binary = (pred >= tau) & nonzero
        tp_a = float((binary & pos).sum())
        p_a, r_a = _pr_at_counts(tp_a, float(binary.sum()), gt_pos)
        per_image_f[i] = _f_beta(p_a, r_a)

    mp = precisions.mean(axis=0)
    mr = recalls.mean(axis=0)
    curve = [PrPoint(float(t), float(p), float(r)) for t, p, r in zip(thresholds, mp, mr)]
    f_values = [_f_beta(pt.precision, pt.recall) for pt in curve]
    return FMeasureResult(max_f=float(max(f_values)), avg_f=float(per_image_f.mean()),
                          curve=curve)


def ber(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    """Balanced error rate percent: 100*(1 - (TPR + TNR)/2).  When the
    ground truth has a single class, the absent class's rate is excluded and
    the average runs over the present class only."""
    _check_pair(pred, gt)
    pos = gt >= 0.5
    hit = pred >= threshold
    rates = []
    n_pos = int(pos.sum())
    n_neg = int((~pos).sum())
    if n_pos:
        rates.append(float((hit & pos).sum()) / n_pos)
    if n_neg:
        rates.append(float((~hit & ~pos).sum()) / n_neg)
    return 100.0 * (1.0 - float(np.mean(rates)))


def gt_single_class(gt: np.ndarray) -> bool:
    pos = gt >= 0.5
    return bool(pos.all() or (~pos).all())


def iou(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    _check_pair(pred, gt)
    p = pred >= threshold
    g = gt >= 0.5
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return float((p & g).sum()) / union


def mean_iou(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray],
             threshold: float = 0.5) -> float:
    return float(np.mean([iou(p, g, threshold) for p, g in zip(preds, gts)]))


@dataclass
class ImageRow:
    id: str
    mae: float
    iou: float
    ber: float
    gt_single_class: bool


@dataclass
class MetricReport:
    mae: float
    max_f: float
    avg_f: float
    ber: float
    mean_iou: float
    rows: list = field(default_factory=list)


def evaluate_dataset(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray],
                     ids: Sequence[str] | None = None) -> MetricReport:
    if len(preds) != len(gts) or len(preds) == 0:
        raise ValueError("evaluate_dataset needs matching non-empty prediction/gt lists")
    if ids is None:
        ids = [f"{i:05d}" for i in range(len(preds))]
    fres = f_measure_curve(preds, gts)
    rows = [ImageRow(id=i, mae=mae(p, g), iou=iou(p, g), ber=ber(p, g),
                     gt_single_class=gt_single_class(g))
            for i, p, g in zip(ids, preds, gts)]
    return MetricReport(
        mae=dataset_mae(preds, gts),
        max_f=fres.max_f,
        avg_f=fres.avg_f,
        ber=float(np.mean([r.ber for r in rows])),
        mean_iou=mean_iou(preds, gts),
        rows=rows,
    )


def report_to_tsv(reports: dict[str, MetricReport], include_ber: bool = False) -> str:
    """TSV with one aggregate row per labeled report plus per-image rows."""
    cols = ["branch", "mae", "maxF", "avgF", "meanIoU"] + (["BER"] if include_ber else [])
    lines = ["\t".join(cols)]
    for label, rep in reports.items():
        row = [label, f"{rep.mae:.6f}", f"{rep.max_f:.6f}", f"{rep.avg_f:.6f}",
               f"{rep.mean_iou:.6f}"]
        if include_ber:
            row.append(f"{rep.ber:.4f}")
        lines.append("\t".join(row))
    header = ["branch", "image", "mae", "iou"] + (["ber", "gt_single_class"] if include_ber else [])
    lines.append("")
    lines.append("\t".join(header))
    for label, rep in reports.items():
        for r in rep.rows:
            row = [label, r.id, f"{r.mae:.6f}", f"{r.iou:.6f}"]
            if include_ber:
                row += [f"{r.ber:.4f}", str(int(r.gt_single_class))]
            lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def report_summary(reports: dict[str, MetricReport], include_ber: bool = False) -> str:
    lines = []
    for label, rep in reports.items():
        parts = [f"{label:>10s}: MAE {rep.mae:.4f}", f"maxF {rep.max_f:.4f}",
                 f"avgF {rep.avg_f:.4f}", f"mIoU {rep.mean_iou:.4f}"]
        if include_ber:
            parts.append(f"BER {rep.ber:.2f}")
        lines.append("  ".join(parts))
    return "\n".join(lines)
