"""Ranking metrics and bootstrap confidence intervals.

AUROC uses the rank (Mann-Whitney) formulation with midranks; Harrell's
C-index counts comparable pairs through the backend kernel. Both produce
numerators that are exact integers plus halves, so they match brute-force
pair enumeration bit-for-bit, which the test suite asserts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from nep import backend
from nep.errors import ValidationError


def auroc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 * P(tie) over all pos/neg pairs."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValidationError("scores and labels must be 1-D and aligned")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUROC needs both classes present")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def c_index(risk_scores, times, event_indicators) -> float:
    """Harrell's concordance: pairs (i, j) with times_i < times_j and
    event_i = 1 are comparable; higher risk for the earlier event is
    concordant, risk ties earn half credit. Equal-time pairs are never
    comparable."""
    risk = np.asarray(risk_scores, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(event_indicators, dtype=np.int64)
    if not (risk.shape == times.shape == events.shape) or risk.ndim != 1:
        raise ValidationError("risk/times/events must be 1-D and aligned")
    conc, tied, comparable = backend.concordance_counts(risk, times, events)
    if comparable == 0:
        raise ValidationError("no comparable pairs (all censored?)")
    return (conc + 0.5 * tied) / comparable


def bootstrap_ci(metric_fn, n: int, n_resamples: int = 1000, seed: int = 0,
                 level: float = 0.95):
    """Percentile bootstrap over row indices [0, n).

    metric_fn(indices) -> float and may raise ValidationError for a
    degenerate resample (single class, no comparable pairs); such resamples
    are skipped. Returns (lo, hi, n_used).
    """
    rng = np.random.default_rng(seed)
    values = []
    for _ in range(n_resamples):
        idx = rng.integers(0, n, size=n)
        try:
            values.append(metric_fn(idx))
        except ValidationError:
            continue
    if not values:
        raise ValidationError("every bootstrap resample was degenerate")
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [tail, 100.0 - tail])
    return float(lo), float(hi), len(values)


@dataclass
class MetricReport:
    """One metric with CV folds and a bootstrap interval."""

    metric: str
    point: float
    folds: list
    median: float
    ci_lo: float
    ci_hi: float
    n_resamples: int = 0
    stratified: bool = True
    warning: str = ""
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        # The interval always covers the point estimate.
        self.ci_lo = min(self.ci_lo, self.point)
        self.ci_hi = max(self.ci_hi, self.point)
        if not self.ci_lo <= self.point <= self.ci_hi:
            raise ValidationError("CI must bracket the point estimate")

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "point": self.point,
            "folds": list(self.folds),
            "median": self.median,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "n_resamples": self.n_resamples,
            "stratified": self.stratified,
            "warning": self.warning,
            "config_hash": self.config_hash,
            "extra": self.extra,
        }

    def write_json(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def csv_row(self) -> str:
        folds = ";".join(f"{v:.6f}" for v in self.folds)
        return (f"{self.metric},{self.point:.6f},{self.median:.6f},"
                f"{self.ci_lo:.6f},{self.ci_hi:.6f},{folds}")


def load_report(path) -> MetricReport:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    return MetricReport(**obj)
