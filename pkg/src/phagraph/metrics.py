"""ROC curve, AUC, average precision and TPR at fixed FPR."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FPR_TARGETS = (1e-4, 1e-3, 5e-3)
REPORT_VERSION = "1"


class MetricError(ValueError):
    pass


@dataclass
class OperatingPoint:
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def tpr(self) -> float:
        return self.tp / (self.tp + self.fn)

    @property
    def fpr(self) -> float:
        return self.fp / (self.fp + self.tn)


@dataclass
class EvalReport:
    roc: np.ndarray
    tpr_at: dict[float, float]
    auc: float
    ap: float
    counts: dict[float, OperatingPoint]
    meta: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "auc": self.auc,
            "ap": self.ap,
            **{f"tpr@{t:g}": v for t, v in self.tpr_at.items()},
        }

    def to_json(self) -> dict:
        return {
            "schema_version": REPORT_VERSION,
            "metrics": self.summary(),
            "counts": {
                f"{t:g}": {"threshold": p.threshold, "tp": p.tp, "fp": p.fp, "tn": p.tn, "fn": p.fn}
                for t, p in self.counts.items()
            },
            "meta": self.meta,
        }

    def write_roc(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write("fpr,tpr\n")
            for f, t in self.roc:
                fh.write(f"{f!r},{t!r}\n")


def roc_and_metrics(scores, labels, targets=FPR_TARGETS, meta: dict | None = None) -> EvalReport:
    """Threshold sweep over the distinct scores.

    Tied scores form one operating point. TPR at a target FPR is the best TPR
    among points whose FPR does not exceed the target. AP is the sum over
    operating points of recall gain times precision.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError("scores and labels must be 1-d arrays of equal length")
    n_pos = int(labels.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("both classes must be present")
    if not np.isfinite(scores).all():
        raise MetricError("scores must be finite")

    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.shape[0] - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    thresholds = s[last]

    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1])) / 2.0)
    precision = tps / (tps + fps)
    ap = float(np.sum(np.diff(tpr) * precision))

    tpr_at, counts = {}, {}
    all_tp = np.r_[0, tps]
    all_fp = np.r_[0, fps]
    all_thr = np.r_[np.inf, thresholds]
    for t in targets:
        ok = np.flatnonzero(fpr <= t + 1e-15)
        k = ok[np.argmax(tpr[ok])]
        tpr_at[t] = float(tpr[k])
        tp, fp = int(all_tp[k]), int(all_fp[k])
        counts[t] = OperatingPoint(float(all_thr[k]), tp, fp, n_neg - fp, n_pos - tp)
    return EvalReport(np.column_stack([fpr, tpr]), tpr_at, auc, ap, counts, dict(meta or {}))


def write_report(path: str | Path, rows: list[EvalReport], extra: dict | None = None) -> None:
    doc = {"schema_version": REPORT_VERSION, **(extra or {}), "reports": [r.to_json() for r in rows]}
    Path(path).write_text(json.dumps(doc, indent=2, default=_json_default))


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
