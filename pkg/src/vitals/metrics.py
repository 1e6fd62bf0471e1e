"""Frame accuracy and per-phase precision/recall/Jaccard.

Metrics are frame-based per phase and macro-averaged. 0/0 cases are
excluded rather than defined to 1: a phase absent from both ground truth
and predictions is dropped entirely; a phase that was predicted but never
occurs in ground truth contributes to macro precision only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MetricError, ShapeError


def confusion_matrix(gt, pred, num_phases):
    """K x K counts indexed [ground truth][prediction]."""
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ShapeError(f"gt/pred length mismatch: {gt.shape} vs {pred.shape}")
    if gt.size and (max(gt.max(), pred.max()) >= num_phases or min(gt.min(), pred.min()) < 0):
        raise ShapeError(f"labels must lie in [0,{num_phases})")
    m = np.zeros((num_phases, num_phases), dtype=np.int64)
    np.add.at(m, (gt, pred), 1)
    return m


def frame_accuracy(m):
    total = m.sum()
    if total == 0:
        raise MetricError("accuracy undefined on an empty confusion matrix")
    return float(np.trace(m)) / float(total)


@dataclass
class MetricsReport:
    """Per-video metrics; macro averages follow the 0/0 exclusion rules."""

    video_id: str
    accuracy: float
    per_phase: dict  # phase -> {"pr": float|None, "re": float|None, "ja": float|None}
    precision_macro: float
    recall_macro: float
    jaccard_macro: float


def per_phase_metrics(m):
    """Per-phase PR/RE/JA plus macro averages from a confusion matrix.

    Returns (per_phase dict, macro dict); undefined entries are None.
    """
    tp = np.diag(m).astype(np.float64)
    gt_count = m.sum(axis=1).astype(np.float64)
    pred_count = m.sum(axis=0).astype(np.float64)
    fp = pred_count - tp
    fn = gt_count - tp

    per_phase = {}
    prs, res, jas = [], [], []
    for k in range(m.shape[0]):
        in_gt = gt_count[k] > 0
        predicted = pred_count[k] > 0
        if not in_gt and not predicted:
            continue
        pr = tp[k] / pred_count[k] if predicted else None
        re = tp[k] / gt_count[k] if in_gt else None
        ja = tp[k] / (tp[k] + fp[k] + fn[k]) if in_gt else None
        per_phase[k] = {"pr": pr, "re": re, "ja": ja}
        if pr is not None:
            prs.append(pr)
        if re is not None:
            res.append(re)
        if ja is not None:
            jas.append(ja)

    def macro(vals):
        if not vals:
            raise MetricError("no phase has a defined value for this metric")
        return float(np.mean(vals))

    macros = {"precision": macro(prs), "recall": macro(res), "jaccard": macro(jas)}
    return per_phase, macros


def video_report(gt, pred, num_phases, video_id="") -> MetricsReport:
    m = confusion_matrix(gt, pred, num_phases)
    per_phase, macros = per_phase_metrics(m)
    return MetricsReport(
        video_id=video_id,
        accuracy=frame_accuracy(m),
        per_phase=per_phase,
        precision_macro=macros["precision"],
        recall_macro=macros["recall"],
        jaccard_macro=macros["jaccard"],
    )


@dataclass
class AggregateReport:
    """Unweighted mean and population std across videos, in percent."""

    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)


METRIC_KEYS = ("accuracy", "precision_macro", "recall_macro", "jaccard_macro")


def aggregate(reports) -> AggregateReport:
    if not reports:
        raise MetricError("cannot aggregate an empty report list")
    agg = AggregateReport()
    for key in METRIC_KEYS:
        vals = np.array([getattr(r, key) for r in reports], dtype=np.float64) * 100.0
        agg.mean[key] = float(vals.mean())
        agg.std[key] = float(vals.std())  # population std
    return agg


def format_report(reports, agg: AggregateReport):
    """Machine-readable key/value document plus a one-line summary."""
    lines = []
    for r in sorted(reports, key=lambda r: r.video_id):
        if r.video_id:
            lines.append(f"# video {r.video_id}")
        lines.append(f"accuracy={r.accuracy:.6f}")
        lines.append(f"precision_macro={r.precision_macro:.6f}")
        lines.append(f"recall_macro={r.recall_macro:.6f}")
        lines.append(f"jaccard_macro={r.jaccard_macro:.6f}")
        for k, vals in sorted(r.per_phase.items()):
            for name in ("pr", "re", "ja"):
                if vals[name] is not None:
                    lines.append(f"per_phase.{k}.{name}={vals[name]:.6f}")
    for key in METRIC_KEYS:
        lines.append(f"aggregate.mean.{key}={agg.mean[key]:.4f}")
        lines.append(f"aggregate.std.{key}={agg.std[key]:.4f}")
    return "\n".join(lines) + "\n"


def summary_line(agg: AggregateReport):
    return (f"accuracy={agg.mean['accuracy']:.2f}±{agg.std['accuracy']:.2f}%")
