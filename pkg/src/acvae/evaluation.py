"""Point-wise detection metrics and precision-recall curve area."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(labels, predictions) -> ConfusionCounts:
    y = np.asarray(labels, dtype=bool)
    p = np.asarray(predictions, dtype=bool)
    if y.shape != p.shape:
        raise ValueError(f"labels {y.shape} and predictions {p.shape} differ in shape")
    tp = int(np.sum(y & p))
    fp = int(np.sum(~y & p))
    fn = int(np.sum(y & ~p))
    return ConfusionCounts(tp, fp, int(y.size) - tp - fp - fn, fn)


def _ratio(num: float, den: float, what: str) -> float:
    if den == 0:
        warnings.warn(f"{what} is 0/0; reporting 0", RuntimeWarning, stacklevel=3)
        return 0.0
    return num / den


def precision_recall_f1(c: ConfusionCounts) -> tuple[float, float, float]:
    """0/0 cases yield 0 with a RuntimeWarning so reports stay total."""
    p = _ratio(c.tp, c.tp + c.fp, "precision")
    r = _ratio(c.tp, c.tp + c.fn, "recall")
    f1 = _ratio(2 * p * r, p + r, "f1")
    return p, r, f1


@dataclass
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray  # threshold per point; nan for the recall-0 anchor

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.recall.tolist(), self.precision.tolist()))


def pr_curve(scores, labels) -> PrCurve:
    """Sweep every distinct score as a threshold (plus +inf).

    A threshold ``t`` flags the points with ``score >= t``; this enumerates
    exactly the prediction sets ``score > c`` reachable by any real cut ``c``,
    from "nothing flagged" (``t = inf``) to "everything flagged" (``t = min``).
    Thresholds flagging nothing have undefined precision and are skipped. The
    curve starts at recall 0 with the precision of its first defined point and
    is ordered by recall, ties by descending threshold.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and equal length")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("pr_curve needs at least one positive label")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    # the last index of each run of equal scores: all tied points enter together
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], len(s) - 1]
    recall = tp[last] / n_pos
    precision = tp[last] / (tp[last] + fp[last])
    thr = s_sorted[last]
    return PrCurve(np.r_[0.0, recall], np.r_[precision[0], precision], np.r_[np.nan, thr])


def prauc(points) -> float:
    """Trapezoidal area under (recall, precision) points sorted by recall."""
    if isinstance(points, PrCurve):
        r, p = points.recall, points.precision
    else:
        arr = np.asarray(points, dtype=np.float64)
        r, p = arr[:, 0], arr[:, 1]
    if len(r) < 2:
        raise ValueError("prauc needs at least two points")
    if np.any(np.diff(r) < 0):
        raise ValueError("points must be sorted by recall")
    return float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2.0))


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    prauc: float
    confusion: ConfusionCounts
    pr_points: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pr_points"] = [list(p) for p in self.pr_points]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        c = self.confusion
        rows = [("precision", f"{self.precision:.4f}"), ("recall", f"{self.recall:.4f}"),
                ("f1", f"{self.f1:.4f}"), ("prauc", f"{self.prauc:.4f}"),
                ("tp", str(c.tp)), ("fp", str(c.fp)), ("tn", str(c.tn)), ("fn", str(c.fn))]
        rows += [(k, f"{v:.4f}" if isinstance(v, float) else str(v)) for k, v in self.extra.items()]
        width = max(len(k) for k, _ in rows)
        vw = max(len(v) for _, v in rows)
        return "\n".join(f"{k:<{width}}  {v:>{vw}}" for k, v in rows)


def evaluate(scores, labels, flags) -> EvalReport:
    """Hard-decision metrics from ``flags`` and PRAUC from the raw scores."""
    c = confusion(labels, flags)
    p, r, f1 = precision_recall_f1(c)
    curve = pr_curve(scores, labels)
    return EvalReport(p, r, f1, prauc(curve), c, curve.points())


def write_pr_csv(curve: PrCurve, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["recall", "precision", "threshold"])
        for r, p, t in zip(curve.recall, curve.precision, curve.thresholds):
            w.writerow([repr(float(r)), repr(float(p)), "" if np.isnan(t) else repr(float(t))])
