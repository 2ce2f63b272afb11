"""Per-patient prediction metrics: confusion-matrix scores, AUROC/AUPRC, calibration, run aggregation."""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "auroc", "auprc", "ece", "mce", "brier")


@dataclass
class PredictionSet:
    scores: np.ndarray
    labels: np.ndarray
    patient_ids: Optional[list] = None
    seed: Optional[int] = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).astype(np.int64).ravel()
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels differ in length")
        if ((self.scores < 0) | (self.scores > 1) | ~np.isfinite(self.scores)).any():
            raise ValueError("scores must lie in [0, 1]")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        if self.patient_ids is not None:
            if len(self.patient_ids) != len(self.scores):
                raise ValueError("patient_ids length mismatch")
            if len(set(self.patient_ids)) != len(self.patient_ids):
                raise ValueError("duplicate patient ids within a run")

    def __len__(self):
        return len(self.scores)


def _unpack(preds, labels=None):
    if isinstance(preds, PredictionSet):
        return preds.scores, preds.labels
    p = PredictionSet(preds, labels)
    return p.scores, p.labels


@dataclass
class ThresholdMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    flags: list = field(default_factory=list)


def threshold_metrics(preds, labels=None, threshold: float = 0.5) -> ThresholdMetrics:
    """Confusion-matrix metrics at ``score >= threshold``; 0/0 ratios become 0 and are flagged."""
    s, y = _unpack(preds, labels)
    if len(s) == 0:
        raise ValueError("no predictions")
    hat = s >= threshold
    tp = int(np.sum(hat & (y == 1)))
    fp = int(np.sum(hat & (y == 0)))
    fn = int(np.sum(~hat & (y == 1)))
    tn = int(np.sum(~hat & (y == 0)))
    flags = []
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision = 0.0
        flags.append("precision_undefined")
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall = 0.0
        flags.append("recall_undefined")
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return ThresholdMetrics((tp + tn) / len(s), precision, recall, f1, tp, fp, fn, tn, flags)


def auroc(preds, labels=None) -> float:
    """Mann-Whitney statistic with half credit for ties."""
    s, y = _unpack(preds, labels)
    n_pos = int((y == 1).sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes")
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(preds, labels=None) -> float:
    """Average precision: sum over distinct thresholds of (R_k - R_{k-1}) * P_k."""
    s, y = _unpack(preds, labels)
    n_pos = int((y == 1).sum())
    if n_pos == 0:
        raise ValueError("AUPRC needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tps = np.cumsum(y)
    fps = np.cumsum(1 - y)
    # last index of each run of tied scores
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp, fp = tps[ends], fps[ends]
    dtp = np.diff(np.r_[0, tp])
    terms = [(int(d) * int(t), int(t + f)) for d, t, f in zip(dtp, tp, fp) if d]
    # exact rational sum over a common denominator, rounded once
    common = math.lcm(*(k for _, k in terms))
    num = sum(a * (common // k) for a, k in terms)
    return num / (common * n_pos)


@dataclass
class BinnedCalibration:
    n_bins: int
    counts: np.ndarray
    confidence: np.ndarray  # mean score per bin (nan when empty)
    accuracy: np.ndarray  # empirical positive rate per bin (nan when empty)
    ece: float
    mce: float

    def to_dict(self) -> dict:
        def clean(a):
            return [None if not np.isfinite(v) else float(v) for v in a]

        return {
            "n_bins": self.n_bins,
            "counts": [int(c) for c in self.counts],
            "confidence": clean(self.confidence),
            "accuracy": clean(self.accuracy),
            "ece": self.ece,
            "mce": self.mce,
        }


def reliability(preds, labels=None, n_bins: int = 10) -> BinnedCalibration:
    """Equal-width bins on [0, 1] over positive-class confidence."""
    s, y = _unpack(preds, labels)
    if len(s) == 0:
        raise ValueError("no predictions")
    idx = np.minimum((s * n_bins).astype(np.int64), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    sums = np.bincount(idx, weights=s, minlength=n_bins)
    hits = np.bincount(idx, weights=y.astype(np.float64), minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        conf = sums / counts
        acc = hits / counts
    occupied = counts > 0
    gaps = np.abs(acc[occupied] - conf[occupied])
    ece = float(np.sum(counts[occupied] / len(s) * gaps))
    mce = float(gaps.max())
    return BinnedCalibration(n_bins, counts, conf, acc, ece, mce)


def brier(preds, labels=None) -> float:
    s, y = _unpack(preds, labels)
    if len(s) == 0:
        raise ValueError("no predictions")
    return float(np.mean((s - y) ** 2))


@dataclass
class GainCurve:
    values: np.ndarray  # per-run metric, ascending
    observed: np.ndarray
    expected: np.ndarray
    mae: float
    degenerate: bool = False


def cumulative_gain_mae(run_metrics: Sequence[float], normalization: str = "total") -> GainCurve:
    """Deviation of the sorted cumulative gain from the identity line.

    ``normalization="total"`` divides the running sum by the grand total so
    equal runs lie on the diagonal.  ``"running_mean"`` divides by ``i``
    instead and is kept only for comparison.
    """
    m = np.sort(np.asarray(run_metrics, dtype=np.float64))
    n = len(m)
    if n < 1:
        raise ValueError("need at least one run")
    if (m < 0).any():
        raise ValueError("run metrics must be non-negative")
    expected = np.arange(1, n + 1) / n
    csum = np.cumsum(m)
    if normalization == "running_mean":
        observed = csum / np.arange(1, n + 1)
    elif normalization == "total":
        if csum[-1] == 0:
            return GainCurve(m, np.zeros(n), expected, 0.0, degenerate=True)
        # exact rationals so equal runs land on i/n without rounding drift
        exact = np.cumsum([Fraction(float(v)) for v in m])
        observed = np.array([float(c / exact[-1]) for c in exact])
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    return GainCurve(m, observed, expected, float(np.mean(np.abs(observed - expected))))


def evaluate_predictions(preds: PredictionSet, threshold: float = 0.5, n_bins: int = 10) -> dict:
    """All per-run metrics for one prediction set."""
    tm = threshold_metrics(preds, threshold=threshold)
    cal = reliability(preds, n_bins=n_bins)
    out = {
        "accuracy": tm.accuracy,
        "precision": tm.precision,
        "recall": tm.recall,
        "f1": tm.f1,
        "ece": cal.ece,
        "mce": cal.mce,
        "brier": brier(preds),
    }
    has_both = 0 < preds.labels.sum() < len(preds)
    out["auroc"] = auroc(preds) if has_both else float("nan")
    out["auprc"] = auprc(preds) if preds.labels.sum() > 0 else float("nan")
    out["flags"] = tm.flags
    return out


@dataclass
class MetricsReport:
    runs: list  # dicts with "seed" plus METRIC_NAMES
    mean: dict
    std: dict
    schema_version: int = 1
    label: str = ""

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "label": self.label,
            "runs": self.runs,
            "aggregate": {"mean": self.mean, "std": self.std, "n_runs": len(self.runs)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        agg = d["aggregate"]
        return cls(d["runs"], agg["mean"], agg["std"], d["schema_version"], d.get("label", ""))


def aggregate_runs(runs: Sequence[dict], label: str = "") -> MetricsReport:
    """Mean and sample standard deviation (n - 1) per metric; std is 0 for one run."""
    if not runs:
        raise ValueError("need at least one run")
    mean, std = {}, {}
    for name in METRIC_NAMES:
        vals = [float(r[name]) for r in runs]
        if not all(math.isfinite(v) for v in vals):
            mean[name] = std[name] = float("nan")
            continue
        mean[name] = float(statistics.mean(vals))
        std[name] = float(statistics.stdev(vals)) if len(vals) > 1 else 0.0
    return MetricsReport([dict(r) for r in runs], mean, std, label=label)


def relative_change(baseline: float, value: float) -> Optional[float]:
    """``(value - baseline) / baseline``; ``None`` when undefined."""
    if baseline == 0 or not (math.isfinite(baseline) and math.isfinite(value)):
        return None
    return (value - baseline) / baseline
