"""Temperature-controlled selection of training targets.

Event types are drawn with probability f_i^alpha / sum_j f_j^alpha, then a
concrete target event of that type is drawn uniformly over all eligible
events cohort-wide (eligible = has at least one predecessor, so every
selection's context is a strict chronological prefix of its record).

Determinism / sharding rule: all randomness for draw j comes from row j of
one uniform array generated up front by default_rng(seed), so workers that
handle disjoint draw ranges reproduce the sequential output exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from nep.errors import SamplingError, ValidationError
from nep.events import FrequencyTable


@dataclass(frozen=True)
class SamplingConfig:
    alpha: float = 0.5
    n_instances: int = 1
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.alpha):
            raise ValidationError("alpha must be finite")
        if self.alpha < 0:
            raise ValidationError("alpha < 0 has no defined meaning")
        if self.n_instances < 1:
            raise ValidationError("n_instances must be >= 1")


@dataclass(frozen=True)
class SamplingDistribution:
    """Per-type selection probabilities derived from a frequency table."""

    types: tuple
    p: tuple

    def __post_init__(self):
        if abs(sum(self.p) - 1.0) > 1e-12:
            raise ValidationError("sampling probabilities must sum to 1 +/- 1e-12")
        if any(x <= 0 for x in self.p):
            raise ValidationError("sampling probabilities must be > 0")

    def as_dict(self) -> dict:
        return dict(zip(self.types, self.p))


@dataclass(frozen=True)
class TargetSelection:
    patient_id: str
    target_index: int
    event_type: str


def type_distribution(freqs: FrequencyTable, alpha: float) -> SamplingDistribution:
    """p_i = f_i^alpha / sum_j f_j^alpha in double precision."""
    if alpha < 0:
        raise ValidationError("alpha < 0 has no defined meaning")
    types = tuple(sorted(freqs.counts))
    f = np.array([freqs.counts[t] for t in types], dtype=np.float64)
    powered = f**alpha
    p = powered / powered.sum()
    return SamplingDistribution(types, tuple(float(x) for x in p))


def _eligible_by_type(cohort):
    """Per-type arrays of (record position, event index), cohort order."""
    table = {}
    for rec_pos, record in enumerate(cohort):
        for idx, event in enumerate(record.events):
            if idx == 0:
                continue
            table.setdefault(event.event_type, []).append((rec_pos, idx))
    return {etype: np.asarray(rows, dtype=np.int64) for etype, rows in table.items()}


def sample_training_positions(cohort, dist: SamplingDistribution,
                              config: SamplingConfig):
    """Draw n_instances target selections; deterministic given the seed.

    Types carrying probability mass but no eligible event are dropped and
    the remaining mass renormalized; if no type has an eligible event,
    raises SamplingError.
    """
    eligible = _eligible_by_type(cohort)
    kept = [(t, p) for t, p in zip(dist.types, dist.p) if len(eligible.get(t, ())) > 0]
    if not kept:
        raise SamplingError("no event type has an eligible target")
    types = [t for t, _ in kept]
    mass = np.array([p for _, p in kept], dtype=np.float64)
    cum = np.cumsum(mass / mass.sum())

    uniforms = np.random.default_rng(config.seed).random((config.n_instances, 2))
    selections = []
    for u_type, u_pos in uniforms:
        ti = min(int(np.searchsorted(cum, u_type, side="right")), len(types) - 1)
        etype = types[ti]
        rows = eligible[etype]
        rec_pos, idx = rows[int(u_pos * len(rows))]
        selections.append(
            TargetSelection(cohort[rec_pos].patient_id, int(idx), etype)
        )
    return selections


def write_selections(selections, path):
    """One JSON line per selection, for dataset reproducibility."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sel in selections:
            fh.write(json.dumps(
                {"patient_id": sel.patient_id, "target_index": sel.target_index,
                 "event_type": sel.event_type},
                separators=(",", ":")))
            fh.write("\n")


def load_selections(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out.append(TargetSelection(obj["patient_id"],
                                           int(obj["target_index"]),
                                           obj["event_type"]))
    return out
