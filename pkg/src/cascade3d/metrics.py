"""Overlap metrics, the dilation-radius sweep and per-class summary tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .errors import DataError
from .morphology import dilate


def _same_dims(a, b):
    if a.shape != b.shape:
        raise DataError(f"mask dims differ: {a.shape} vs {b.shape}")


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """``2|a & b| / (|a| + |b|)``; 1.0 when both masks are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    _same_dims(a, b)
    total = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / total


def per_class_dice(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> dict[int, float]:
    """Dice of each foreground class's indicator masks."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    _same_dims(pred, truth)
    return {k: dice(pred == k, truth == k) for k in range(1, num_classes)}


def recall_fpr(pred_region, truth_fg, universe) -> tuple[float, float]:
    pred = np.asarray(pred_region, dtype=bool)
    truth = np.asarray(truth_fg, dtype=bool)
    uni = np.asarray(universe, dtype=bool)
    _same_dims(pred, truth)
    _same_dims(pred, uni)
    n_truth = int(np.count_nonzero(truth))
    if n_truth == 0:
        raise DataError("recall is undefined for an empty ground truth")
    if np.any(truth & ~uni):
        raise DataError("ground-truth foreground must lie inside the universe")
    recall = int(np.count_nonzero(pred & truth)) / n_truth
    negatives = uni & ~truth
    n_neg = int(np.count_nonzero(negatives))
    fpr = int(np.count_nonzero(pred & negatives)) / n_neg if n_neg else 0.0
    return recall, fpr


@dataclass(frozen=True)
class SweepRow:
    r: int
    recall: float
    fpr: float


@dataclass(frozen=True)
class SweepResult:
    rows: tuple[SweepRow, ...]
    r_star: int | None  # smallest r reaching the recall target, None if never

    def row(self, r: int) -> SweepRow:
        return next(x for x in self.rows if x.r == r)


def dilation_sweep(stage1_fg, truth_fg, universe, r_range, target: float = 0.99) -> SweepResult:
    """Recall/FPR of the dilated stage-1 foreground for each radius.

    Several cases can be pooled by passing lists of masks; counts are summed
    before the rates are formed.
    """
    r_range = list(r_range)
    if not r_range:
        raise ValueError("r_range must be non-empty")
    preds = stage1_fg if isinstance(stage1_fg, (list, tuple)) else [stage1_fg]
    truths = truth_fg if isinstance(truth_fg, (list, tuple)) else [truth_fg]
    unis = universe if isinstance(universe, (list, tuple)) else [universe]
    rows = []
    for r in sorted(r_range):
        tp = n_truth = fp = n_neg = 0
        for p, t, u in zip(preds, truths, unis):
            d = dilate(p, r)
            t = np.asarray(t, dtype=bool)
            u = np.asarray(u, dtype=bool)
            tp += int(np.count_nonzero(d & t))
            n_truth += int(np.count_nonzero(t))
            neg = u & ~t
            fp += int(np.count_nonzero(d & neg))
            n_neg += int(np.count_nonzero(neg))
        if n_truth == 0:
            raise DataError("recall is undefined for an empty ground truth")
        rows.append(SweepRow(int(r), tp / n_truth, fp / n_neg if n_neg else 0.0))
    r_star = next((row.r for row in rows if row.recall >= target), None)
    return SweepResult(tuple(rows), r_star)


# ------------------------------------------------------------------- reports


def percent(x: float) -> str:
    """Percentage with one decimal, rounded half-up."""
    return str(Decimal(repr(100.0 * x)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def _summary(values: list[float]) -> dict[str, float]:
    v = np.asarray(values, dtype=np.float64)
    return {
        "mean": float(v.mean()),
        "std": float(v.std()),
        "median": float(np.median(v)),
        "min": float(v.min()),
        "max": float(v.max()),
    }


@dataclass
class CaseMetrics:
    case_id: str
    dice: dict[int, float]
    recall: dict[int, float] = field(default_factory=dict)
    fpr: dict[int, float] = field(default_factory=dict)


@dataclass
class SegmentationReport:
    """Per-case, per-class metrics with Table-style aggregates."""

    cases: list[CaseMetrics]
    class_names: dict[int, str]
    stage: int = 2
    tiling: str = "nonoverlap"

    def __post_init__(self):
        self.cases = sorted(self.cases, key=lambda c: c.case_id)

    @property
    def classes(self) -> list[int]:
        return sorted(self.class_names)

    def summary(self) -> dict[str, dict[str, float]]:
        out = {}
        for k in self.classes:
            out[self.class_names[k]] = _summary([c.dice[k] for c in self.cases])
        out["avg"] = _summary([self.case_mean(c) for c in self.cases])
        return out

    def case_mean(self, c: CaseMetrics) -> float:
        return float(np.mean([c.dice[k] for k in self.classes]))

    def mean_dice(self) -> float:
        return float(np.mean([self.case_mean(c) for c in self.cases]))

    def class_mean(self, k: int) -> float:
        return float(np.mean([c.dice[k] for c in self.cases]))

    def per_case_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["case_id", "class", "dice", "recall", "fpr"])
        for c in self.cases:
            for k in self.classes:
                w.writerow([
                    c.case_id, self.class_names[k], _fmt(c.dice[k]),
                    _fmt(c.recall.get(k, math.nan)), _fmt(c.fpr.get(k, math.nan)),
                ])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["mean", "std", "median", "min", "max"]
        w.writerow(["class"] + cols + [f"{c}_pct" for c in cols])
        for name, s in self.summary().items():
            w.writerow([name] + [_fmt(s[c]) for c in cols] + [percent(s[c]) for c in cols])
        return buf.getvalue()

    def table(self) -> str:
        """Plain-text table in the layout of a Dice-by-organ results table."""
        s = self.summary()
        names = list(s)
        lines = [f"Stage {self.stage}: {self.tiling}", "Dice [%] " + " ".join(f"{n:>12}" for n in names)]
        for stat in ("mean", "std", "median", "min", "max"):
            lines.append(f"{stat.capitalize():<8} " + " ".join(f"{percent(s[n][stat]):>12}" for n in names))
        return "\n".join(lines)


def _fmt(x: float) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else repr(float(x))


def sweep_csv(result: SweepResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["r", "recall", "fpr"])
    for row in result.rows:
        w.writerow([row.r, _fmt(row.recall), _fmt(row.fpr)])
    return buf.getvalue()
