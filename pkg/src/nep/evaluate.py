"""Downstream heads and evaluation protocols.

Frozen features (embeddings or bag-of-events counts) feed an L2-regularized
logistic head fit by full-batch gradient descent with backtracking line
search. Binary tasks report AUROC; survival tasks train the head on the
12-month mortality binarization and report Harrell's C-index of the
predicted risk over the full (time, event) data. Cross-validation is
stratified (event-stratified for survival) and the label-efficiency sweep
uses fixed nested subsets so smaller training sets are strict subsets of
larger ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from nep.errors import ValidationError
from nep.events import EventVocabulary
from nep.metrics import MetricReport, auroc, bootstrap_ci, c_index


@dataclass(frozen=True)
class BinaryTask:
    name: str
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))


@dataclass(frozen=True)
class SurvivalTask:
    name: str
    times: np.ndarray
    events: np.ndarray
    threshold_days: float = 365.0

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=np.float64))
        object.__setattr__(self, "events", np.asarray(self.events, dtype=np.int64))
        if (self.times <= 0).any():
            raise ValidationError("survival times must be > 0")


def twelve_month_labels(times, events, threshold_days: float = 365.0):
    """Binary mortality-by-threshold labels plus a known-status mask.

    Status is unknown for subjects censored before the threshold.
    """
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=np.int64)
    died = (events == 1) & (times <= threshold_days)
    known = died | (times > threshold_days)
    labels = died.astype(np.int64)
    return labels, known


@dataclass
class LogisticHead:
    weights: np.ndarray
    bias: float
    converged: bool
    n_iter: int
    grad_norm: float


def _logistic_objective(x, y_pm, w, b, l2):
    z = x @ w + b
    margins = y_pm * z
    value = float(np.logaddexp(0.0, -margins).mean() + 0.5 * l2 * (w @ w))
    s = 1.0 / (1.0 + np.exp(margins))  # sigmoid(-margin)
    dz = -(y_pm * s) / len(y_pm)
    gw = x.T @ dz + l2 * w
    gb = float(dz.sum())
    return value, gw, gb


def train_logistic(features, labels, l2_strength: float = 0.0,
                   max_iter: int = 10_000, tol: float = 1e-6) -> LogisticHead:
    """Full-batch gradient descent with Armijo backtracking until the
    gradient norm drops below tol (or max_iter). Deterministic."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValidationError("logistic head needs both classes present")
    y_pm = np.where(y == 1, 1.0, -1.0)

    w = np.zeros(x.shape[1])
    b = 0.0
    step = 1.0
    value, gw, gb = _logistic_objective(x, y_pm, w, b, l2_strength)
    n_iter = 0
    grad_norm = float(np.sqrt(gw @ gw + gb * gb))
    while grad_norm >= tol and n_iter < max_iter:
        g_sq = gw @ gw + gb * gb
        accepted = False
        for _ in range(60):
            w_new = w - step * gw
            b_new = b - step * gb
            v_new, gw_new, gb_new = _logistic_objective(x, y_pm, w_new, b_new,
                                                        l2_strength)
            if v_new <= value - 1e-4 * step * g_sq:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        w, b, value, gw, gb = w_new, b_new, v_new, gw_new, gb_new
        step = min(step * 2.0, 1e6)
        grad_norm = float(np.sqrt(gw @ gw + gb * gb))
        n_iter += 1
    return LogisticHead(w, float(b), grad_norm < tol, n_iter, grad_norm)


def predict_scores(head: LogisticHead, features) -> np.ndarray:
    return np.asarray(features, dtype=np.float64) @ head.weights + head.bias


# ---------------------------------------------------------------------------
# cross-validation


def _fold_assignment(strata, k, seed):
    """Round-robin within shuffled strata; falls back to unstratified when
    the smallest stratum has fewer members than folds."""
    strata = np.asarray(strata)
    n = len(strata)
    rng = np.random.default_rng(seed)
    values, counts = np.unique(strata, return_counts=True)
    folds = np.empty(n, dtype=np.int64)
    if counts.min() < k:
        perm = rng.permutation(n)
        folds[perm] = np.arange(n) % k
        return folds, False
    for value in values:
        idx = np.flatnonzero(strata == value)
        rng.shuffle(idx)
        folds[idx] = np.arange(len(idx)) % k
    return folds, True


def _fit_and_score(task, x_train, idx_train, x_test, idx_test, l2):
    """Train the head on the fold's training side; return held-out scores
    and the fold metric."""
    if isinstance(task, BinaryTask):
        head = train_logistic(x_train, task.labels[idx_train], l2)
        scores = predict_scores(head, x_test)
        return scores, auroc(scores, task.labels[idx_test])
    labels, known = twelve_month_labels(task.times, task.events,
                                        task.threshold_days)
    keep = known[idx_train]
    head = train_logistic(x_train[keep], labels[idx_train][keep], l2)
    scores = predict_scores(head, x_test)
    return scores, c_index(scores, task.times[idx_test], task.events[idx_test])


def _pooled_metric(task, scores, indices):
    if isinstance(task, BinaryTask):
        return lambda sub: auroc(scores[sub], task.labels[indices][sub])
    return lambda sub: c_index(scores[sub], task.times[indices][sub],
                               task.events[indices][sub])


def cross_validate(features, task, k: int = 5, seed: int = 0,
                   l2_strength: float = 1e-2, n_resamples: int = 1000,
                   config_hash: str = "") -> MetricReport:
    """Stratified k-fold CV; reports per-fold values, their median, the
    pooled out-of-fold point estimate, and its percentile bootstrap CI."""
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if n < k:
        raise ValidationError(f"need at least {k} rows for {k}-fold CV")
    strata = task.labels if isinstance(task, BinaryTask) else task.events
    folds, stratified = _fold_assignment(strata, k, seed)

    per_fold = []
    oof_scores = np.zeros(n)
    for f in range(k):
        test = np.flatnonzero(folds == f)
        train = np.flatnonzero(folds != f)
        scores, value = _fit_and_score(task, x[train], train, x[test], test, l2_strength)
        oof_scores[test] = scores
        per_fold.append(float(value))

    all_idx = np.arange(n)
    pooled = _pooled_metric(task, oof_scores, all_idx)
    point = pooled(all_idx)
    lo, hi, used = bootstrap_ci(pooled, n, n_resamples, seed)
    metric_name = "auroc" if isinstance(task, BinaryTask) else "c_index"
    return MetricReport(
        metric=metric_name,
        point=float(point),
        folds=per_fold,
        median=float(np.median(per_fold)),
        ci_lo=lo,
        ci_hi=hi,
        n_resamples=used,
        stratified=stratified,
        warning="" if stratified else "stratification impossible; unstratified folds",
        config_hash=config_hash,
        extra={"task": task.name, "n": int(n), "k": k},
    )


# ---------------------------------------------------------------------------
# label-efficiency sweep


@dataclass
class SweepRow:
    feature_source: str
    size: int
    metric: str
    median: float
    ci_lo: float
    ci_hi: float
    point: float
    folds: list = field(default_factory=list)


def label_efficiency_sweep(feature_sets: dict, task, sizes, k: int = 5,
                           seed: int = 0, l2_strength: float = 1e-2,
                           n_resamples: int = 1000):
    """Evaluate every feature source at every training-set size.

    Within each fold, the training indices are permuted once and size s uses
    exactly the first s entries, so smaller subsets nest inside larger ones.
    Raises when a size exceeds the fold's training side.
    """
    sizes = sorted(int(s) for s in sizes)
    names = sorted(feature_sets)
    mats = {name: np.asarray(feature_sets[name], dtype=np.float64)
            for name in names}
    n = len(next(iter(mats.values())))
    for name, m in mats.items():
        if len(m) != n:
            raise ValidationError(f"feature source {name!r} has {len(m)} rows, "
                                  f"expected {n}")

    strata = task.labels if isinstance(task, BinaryTask) else task.events
    folds, _ = _fold_assignment(strata, k, seed)
    rng = np.random.default_rng(seed)

    fold_train_order = []
    for f in range(k):
        train = np.flatnonzero(folds != f)
        if sizes[-1] > len(train):
            raise ValidationError(
                f"sweep size {sizes[-1]} exceeds fold {f} training rows "
                f"({len(train)})")
        fold_train_order.append(rng.permutation(train))

    rows = []
    metric_name = "auroc" if isinstance(task, BinaryTask) else "c_index"
    for name in names:
        x = mats[name]
        for size in sizes:
            per_fold = []
            oof_scores = np.zeros(n)
            for f in range(k):
                test = np.flatnonzero(folds == f)
                train = fold_train_order[f][:size]
                scores, value = _fit_and_score(task, x[train], train,
                                               x[test], test, l2_strength)
                oof_scores[test] = scores
                per_fold.append(float(value))
            all_idx = np.arange(n)
            pooled = _pooled_metric(task, oof_scores, all_idx)
            point = float(pooled(all_idx))
            lo, hi, _ = bootstrap_ci(pooled, n, n_resamples, seed)
            rows.append(SweepRow(name, size, metric_name,
                                 float(np.median(per_fold)), min(lo, point),
                                 max(hi, point), point, per_fold))
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("feature_source,size,metric,median,ci_lo,ci_hi\n")
        for r in rows:
            fh.write(f"{r.feature_source},{r.size},{r.metric},"
                     f"{r.median:.6f},{r.ci_lo:.6f},{r.ci_hi:.6f}\n")


def write_sweep_json(rows, path, config_hash: str = ""):
    payload = {
        "config_hash": config_hash,
        "rows": [{"feature_source": r.feature_source, "size": r.size,
                  "metric": r.metric, "median": r.median, "ci_lo": r.ci_lo,
                  "ci_hi": r.ci_hi, "point": r.point, "folds": r.folds}
                 for r in rows],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# count-based baseline


def bag_of_events_baseline(cohort, vocab: EventVocabulary) -> np.ndarray:
    """log(1 + count) of every vocabulary event per patient; order-blind by
    construction. Width equals the non-special vocabulary size."""
    from nep.events import N_SPECIAL

    counts = np.zeros((len(cohort), vocab.n_events), dtype=np.float64)
    for row, record in enumerate(cohort):
        for event in record.events:
            token = vocab.encode(event.pair)
            if token >= N_SPECIAL:
                counts[row, token - N_SPECIAL] += 1.0
    return np.log1p(counts)


def tasks_from_cohort(cohort, threshold_days: float = 365.0):
    """Instantiate every task present in the cohort outcomes."""
    tasks = []
    names = sorted({t for r in cohort for t in r.outcomes})
    for name in names:
        sample = next(r.outcomes[name] for r in cohort if name in r.outcomes)
        if "label" in sample:
            labels = np.array([r.outcomes[name]["label"] for r in cohort])
            tasks.append(BinaryTask(name, labels))
        else:
            times = np.array([r.outcomes[name]["time"] for r in cohort])
            events = np.array([r.outcomes[name]["event"] for r in cohort])
            tasks.append(SurvivalTask(name, times, events, threshold_days))
    return tasks
