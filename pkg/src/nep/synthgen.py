"""Synthetic cohorts from a known first-order Markov process.

Each risk group gets its own transition matrix built as a smoothed mixture
of random permutation matrices. That construction is doubly stochastic, so
every group shares the same uniform stationary distribution: marginal token
frequencies carry no group signal and only the transition *structure*
separates the groups. Count-based baselines are handicapped by design while
the ground-truth next-event distribution and the conditional-entropy loss
floor stay exactly computable.

Determinism contract: oracle parameters come from an independent stream of
the spec seed; patient i draws everything from default_rng(seed ^ i), so
parallel per-patient generation is bitwise equal to sequential.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from nep import backend
from nep.errors import NonErgodicChainError, ValidationError
from nep.events import EVENT_TYPES, ClinicalEvent, PatientRecord

_CODE_PREFIX = {
    "diagnosis": "D",
    "medication": "M",
    "lab": "L",
    "vital": "V",
    "procedure": "X",
}

_STATIONARY_TOL = 1e-10


@dataclass(frozen=True)
class CohortSpec:
    """Knobs for one synthetic cohort; everything flows from `seed`."""

    n_patients: int
    codes_per_type: dict
    n_risk_groups: int = 2
    mode_weights: tuple = (0.6, 0.3, 0.1)
    transition_smoothing: float = 0.01
    hazards: tuple = (math.log(2) / 180.0, math.log(2) / 1080.0)
    gap_mean_days: dict = field(default_factory=dict)
    min_events: int = 10
    max_events: int = 40
    censor_horizon_days: float = 1095.0
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 1:
            raise ValidationError("n_patients must be >= 1")
        if not self.codes_per_type:
            raise ValidationError("codes_per_type is empty")
        for etype, n in self.codes_per_type.items():
            if etype not in _CODE_PREFIX:
                raise ValidationError(f"unsupported chain event type {etype!r}")
            if n < 1:
                raise ValidationError(f"codes_per_type[{etype!r}] must be >= 1")
        if self.n_risk_groups < 1:
            raise ValidationError("n_risk_groups must be >= 1")
        if len(self.hazards) != self.n_risk_groups:
            raise ValidationError("one hazard per risk group required")
        if any(lam <= 0 for lam in self.hazards):
            raise ValidationError("hazards must be > 0")
        if not self.mode_weights or any(w <= 0 for w in self.mode_weights):
            raise ValidationError("mode_weights must be positive")
        if not 0 <= self.transition_smoothing < 1:
            raise ValidationError("transition_smoothing must be in [0, 1)")
        if not 1 <= self.min_events <= self.max_events:
            raise ValidationError("need 1 <= min_events <= max_events")
        if self.censor_horizon_days <= 0:
            raise ValidationError("censor_horizon_days must be > 0")
        for etype, gap in self.gap_mean_days.items():
            if etype not in self.codes_per_type or gap < 0:
                raise ValidationError(f"bad gap_mean_days entry {etype!r}: {gap}")


class MarkovOracle:
    """Ground-truth generative parameters for a synthetic cohort."""

    def __init__(self, tokens, pi, transition, hazards, gap_mean_days, assignments):
        self.tokens = tuple(tuple(t) for t in tokens)
        self.pi = np.asarray(pi, dtype=np.float64)
        self.transition = np.asarray(transition, dtype=np.float64)
        self.hazards = tuple(float(h) for h in hazards)
        self.gap_mean_days = dict(gap_mean_days)
        self.assignments = dict(assignments)
        self._index = {t: i for i, t in enumerate(self.tokens)}
        self.validate()

    def validate(self):
        k = len(self.tokens)
        if self.pi.shape != (k,) or self.transition.shape[1:] != (k, k):
            raise ValidationError("oracle shape mismatch")
        if abs(self.pi.sum() - 1.0) > 1e-12 or (self.pi < 0).any():
            raise ValidationError("initial distribution must sum to 1 +/- 1e-12")
        rows = self.transition.sum(axis=-1)
        if np.abs(rows - 1.0).max() > 1e-12 or (self.transition < 0).any():
            raise ValidationError("transition rows must sum to 1 +/- 1e-12")

    @property
    def n_groups(self) -> int:
        return self.transition.shape[0]

    def token_index(self, token) -> int:
        if isinstance(token, (int, np.integer)):
            idx = int(token)
            if not 0 <= idx < len(self.tokens):
                raise ValidationError(f"token index {idx} out of range")
            return idx
        pair = token.pair if isinstance(token, ClinicalEvent) else tuple(token)
        try:
            return self._index[pair]
        except KeyError:
            raise ValidationError(f"unknown token {pair!r}") from None


def _token_space(codes_per_type):
    tokens = []
    for etype in sorted(codes_per_type):
        prefix = _CODE_PREFIX[etype]
        tokens.extend((etype, f"{prefix}{i:03d}") for i in range(codes_per_type[etype]))
    return tokens


def _group_transition(rng, k, weights, smoothing):
    t = np.full((k, k), smoothing / k)
    body = 1.0 - smoothing
    for w in weights:
        perm = rng.permutation(k)
        t[np.arange(k), perm] += body * w
    return t


def build_oracle(spec: CohortSpec) -> MarkovOracle:
    """Oracle parameters for a spec (assignments filled during generation)."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x6F7263]))
    tokens = _token_space(spec.codes_per_type)
    k = len(tokens)
    weights = np.asarray(spec.mode_weights, dtype=np.float64)
    weights = weights / weights.sum()
    transition = np.stack(
        [_group_transition(rng, k, weights, spec.transition_smoothing)
         for _ in range(spec.n_risk_groups)]
    )
    pi = np.full(k, 1.0 / k)
    return MarkovOracle(tokens, pi, transition, spec.hazards,
                        dict(spec.gap_mean_days), {})


def _geometric_gaps(uniforms, means):
    """Inverse-CDF geometric on {0,1,2,...} with per-step mean."""
    gaps = np.zeros(len(uniforms), dtype=np.int64)
    pos = means > 0
    if pos.any():
        q = means[pos] / (1.0 + means[pos])
        gaps[pos] = np.floor(np.log1p(-uniforms[pos]) / np.log(q)).astype(np.int64)
    return gaps


def generate_cohort(spec: CohortSpec):
    """Sample a cohort and return (records, oracle).

    Per patient: risk group, then a Markov chain of events with geometric
    inter-event gaps; survival ~ Exponential(hazard of the group), censored
    at the horizon. Outcomes carry the binary high-risk task (1 = highest
    hazard group) and the survival task (time, event).
    """
    oracle = build_oracle(spec)
    k = len(oracle.tokens)
    cum_pi = np.cumsum(oracle.pi)
    cum_t = [np.cumsum(oracle.transition[g], axis=1) for g in range(spec.n_risk_groups)]
    token_gap_mean = np.array(
        [float(spec.gap_mean_days.get(t[0], 0.0)) for t in oracle.tokens]
    )
    risk_group = int(np.argmax(oracle.hazards))

    records = []
    for i in range(spec.n_patients):
        prng = np.random.default_rng(spec.seed ^ i)
        group = int(prng.integers(spec.n_risk_groups))
        length = int(prng.integers(spec.min_events, spec.max_events + 1))

        first = int(np.searchsorted(cum_pi, prng.random(), side="right"))
        first = min(first, k - 1)
        rest = backend.markov_walk(cum_t[group], first, prng.random(length - 1))
        chain = np.concatenate([[first], rest])

        gaps = _geometric_gaps(prng.random(length - 1), token_gap_mean[chain[1:]])
        ts = np.concatenate([[0], np.cumsum(gaps)])

        surv_time = prng.exponential(1.0 / oracle.hazards[group])
        observed = surv_time <= spec.censor_horizon_days
        outcome_time = float(surv_time if observed else spec.censor_horizon_days)

        events = tuple(
            ClinicalEvent(oracle.tokens[tok][0], oracle.tokens[tok][1], int(day))
            for tok, day in zip(chain, ts)
        )
        pid = f"P{i:06d}"
        records.append(
            PatientRecord(
                pid,
                events,
                {
                    "high_risk": {"label": int(group == risk_group)},
                    "survival": {"time": outcome_time, "event": int(observed)},
                },
            )
        )
        oracle.assignments[pid] = group
    return records, oracle


def oracle_next_event_dist(oracle: MarkovOracle, patient_id: str, history):
    """Exact next-token distribution: the transition row of the last event
    under the patient's risk group."""
    if not len(history):
        raise ValidationError("history must be non-empty")
    if patient_id not in oracle.assignments:
        raise ValidationError(f"unknown patient {patient_id!r}")
    group = oracle.assignments[patient_id]
    last = oracle.token_index(history[-1])
    return oracle.transition[group, last].copy()


def _row_entropies(t):
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(t > 0, np.log(t), 0.0)
    return -(t * logs).sum(axis=1)


def _recurrent_classes(t):
    n_comp, labels = connected_components(csr_matrix(t > 0), connection="strong")
    outgoing = set()
    src, dst = np.nonzero(t > 0)
    for a, b in zip(labels[src], labels[dst]):
        if a != b:
            outgoing.add(a)
    return [tuple(np.flatnonzero(labels == c)) for c in range(n_comp)
            if c not in outgoing]


def _stationary(t):
    """Power iteration on the lazy chain (T + I)/2 to 1e-10 in L1."""
    k = t.shape[0]
    mu = np.full(k, 1.0 / k)
    for _ in range(500_000):
        nxt = 0.5 * (mu + mu @ t)
        nxt /= nxt.sum()
        if np.abs(nxt - mu).sum() < _STATIONARY_TOL:
            return nxt
        mu = nxt
    raise ValidationError("stationary distribution did not converge")


def oracle_conditional_entropy(oracle: MarkovOracle) -> float:
    """Loss floor in nats: stationary-weighted expected row entropy,
    mixture-weighted over risk groups by their patient shares.

    Raises NonErgodicChainError when a group's chain has several recurrent
    classes; the error carries each class's own stationary-weighted entropy.
    """
    if oracle.assignments:
        counts = np.bincount(
            [g for g in oracle.assignments.values()], minlength=oracle.n_groups
        ).astype(np.float64)
        group_w = counts / counts.sum()
    else:
        group_w = np.full(oracle.n_groups, 1.0 / oracle.n_groups)

    total = 0.0
    for g in range(oracle.n_groups):
        t = oracle.transition[g]
        classes = _recurrent_classes(t)
        if len(classes) > 1:
            per_component = {}
            for cls in classes:
                idx = np.asarray(cls)
                sub = t[np.ix_(idx, idx)]
                mu = _stationary(sub)
                per_component[cls] = float(mu @ _row_entropies(sub))
            raise NonErgodicChainError(
                f"group {g} chain has {len(classes)} recurrent classes",
                per_component,
            )
        mu = _stationary(t)
        total += group_w[g] * float(mu @ _row_entropies(t))
    return total


def write_oracle(oracle: MarkovOracle, path):
    """Structured-text sidecar with the full generative parameters."""
    payload = {
        "version": 1,
        "tokens": [list(t) for t in oracle.tokens],
        "pi": oracle.pi.tolist(),
        "transition": oracle.transition.tolist(),
        "hazards": list(oracle.hazards),
        "gap_mean_days": dict(sorted(oracle.gap_mean_days.items())),
        "assignments": dict(sorted(oracle.assignments.items())),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, ensure_ascii=False, separators=(",", ":"))
        fh.write("\n")


def load_oracle(path) -> MarkovOracle:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return MarkovOracle(
        [tuple(t) for t in payload["tokens"]],
        payload["pi"],
        payload["transition"],
        payload["hazards"],
        payload["gap_mean_days"],
        payload["assignments"],
    )
