import numpy as np
import pytest

from nep.errors import SamplingError, ValidationError
from nep.events import FrequencyTable, event_type_frequencies
from nep.sampling import (
    SamplingConfig,
    SamplingDistribution,
    TargetSelection,
    load_selections,
    sample_training_positions,
    type_distribution,
    write_selections,
)

from conftest import make_record


def balanced_cohort(n=200, per_type=8):
    """Records alternating lab/diagnosis/vital events."""
    cohort = []
    for i in range(n):
        triples = []
        for j in range(per_type):
            triples.append(("lab", f"L{j % 3}", 2 * j))
            triples.append(("diagnosis", f"D{j % 3}", 2 * j + 1))
        cohort.append(make_record(f"P{i}", triples))
    return cohort


class TestTypeDistribution:
    def test_sqrt_example(self):
        freqs = FrequencyTable({"lab": 100, "diagnosis": 1})
        dist = type_distribution(freqs, 0.5)
        p = dist.as_dict()
        assert abs(p["lab"] - 10 / 11) < 1e-15
        assert abs(p["diagnosis"] - 1 / 11) < 1e-15

    def test_alpha_one_proportional(self):
        freqs = FrequencyTable({"lab": 30, "diagnosis": 10})
        p = type_distribution(freqs, 1.0).as_dict()
        assert abs(p["lab"] - 0.75) < 1e-12
        assert abs(p["diagnosis"] - 0.25) < 1e-12

    def test_alpha_zero_uniform(self):
        freqs = FrequencyTable({"lab": 999, "diagnosis": 2, "vital": 31})
        p = type_distribution(freqs, 0.0).as_dict()
        for v in p.values():
            assert abs(v - 1 / 3) < 1e-12

    def test_negative_alpha_rejected(self):
        freqs = FrequencyTable({"lab": 5})
        with pytest.raises(ValidationError):
            type_distribution(freqs, -0.5)
        with pytest.raises(ValidationError):
            SamplingConfig(alpha=-1.0, n_instances=10)
        with pytest.raises(ValidationError):
            SamplingConfig(alpha=float("nan"), n_instances=10)

    def test_sums_to_one(self):
        freqs = FrequencyTable({"lab": 7, "diagnosis": 13, "vital": 100,
                                "procedure": 1})
        assert abs(sum(type_distribution(freqs, 0.5).p) - 1.0) < 1e-12


class TestSampling:
    def test_single_candidate(self):
        cohort = [
            make_record("P0", [("lab", "A", 0), ("lab", "B", 1)]),
            make_record("P1", [("lab", "A", 0), ("lab", "B", 1),
                               ("lab", "C", 2), ("diagnosis", "D", 3)]),
        ]
        dist = type_distribution(event_type_frequencies(cohort), 0.5)
        sels = sample_training_positions(cohort, dist,
                                         SamplingConfig(0.5, 50, seed=1))
        diag = [s for s in sels if s.event_type == "diagnosis"]
        assert diag and all(s.patient_id == "P1" and s.target_index == 3
                            for s in diag)

    def test_index_zero_never_selected(self):
        cohort = balanced_cohort(20)
        dist = type_distribution(event_type_frequencies(cohort), 0.5)
        sels = sample_training_positions(cohort, dist,
                                         SamplingConfig(0.5, 2000, seed=3))
        assert all(s.target_index >= 1 for s in sels)

    def test_deterministic(self):
        cohort = balanced_cohort(30)
        dist = type_distribution(event_type_frequencies(cohort), 0.5)
        cfg = SamplingConfig(0.5, 500, seed=11)
        assert sample_training_positions(cohort, dist, cfg) == \
            sample_training_positions(cohort, dist, cfg)

    def test_empirical_type_frequencies(self):
        # L1 distance of realized type shares to p over 1e5 draws
        cohort = []
        for i in range(100):
            triples = [("lab", "L0", 0)]
            triples += [("lab", f"L{j}", j + 1) for j in range(6)]
            triples += [("diagnosis", f"D{j}", 10 + j) for j in range(3)]
            triples += [("vital", f"V{j}", 20 + j) for j in range(1)]
            cohort.append(make_record(f"P{i}", triples))
        dist = type_distribution(event_type_frequencies(cohort), 0.5)
        sels = sample_training_positions(cohort, dist,
                                         SamplingConfig(0.5, 100_000, seed=5))
        counts = {t: 0 for t in dist.types}
        for s in sels:
            counts[s.event_type] += 1
        l1 = sum(abs(counts[t] / len(sels) - p)
                 for t, p in zip(dist.types, dist.p))
        assert l1 < 0.01

    def test_alpha_zero_counts_uniform_within_4_sigma(self):
        cohort = balanced_cohort(50)
        dist = type_distribution(event_type_frequencies(cohort), 0.0)
        n = 100_000
        sels = sample_training_positions(cohort, dist,
                                         SamplingConfig(0.0, n, seed=7))
        k = len(dist.types)
        sigma = np.sqrt((1 / k) * (1 - 1 / k) * n)
        for etype in dist.types:
            count = sum(1 for s in sels if s.event_type == etype)
            assert abs(count - n / k) < 4 * sigma

    def test_type_without_eligible_targets_renormalized(self):
        # vitals appear only at index 0, so they are never eligible
        cohort = [make_record(f"P{i}", [("vital", "V0", 0), ("lab", "A", 1),
                                        ("lab", "B", 2)])
                  for i in range(10)]
        dist = type_distribution(event_type_frequencies(cohort), 0.5)
        assert "vital" in dist.as_dict()
        sels = sample_training_positions(cohort, dist,
                                         SamplingConfig(0.5, 300, seed=2))
        assert all(s.event_type == "lab" for s in sels)

    def test_all_types_empty_is_error(self):
        cohort = [make_record("P0", [("lab", "A", 0)])]
        dist = type_distribution(event_type_frequencies(cohort), 0.5)
        with pytest.raises(SamplingError):
            sample_training_positions(cohort, dist, SamplingConfig(0.5, 5, seed=0))

    def test_context_is_strict_prefix(self):
        cohort = balanced_cohort(10)
        dist = type_distribution(event_type_frequencies(cohort), 0.5)
        sels = sample_training_positions(cohort, dist,
                                         SamplingConfig(0.5, 200, seed=9))
        by_pid = {r.patient_id: r for r in cohort}
        for s in sels:
            record = by_pid[s.patient_id]
            assert 1 <= s.target_index < len(record.events)
            assert record.events[s.target_index].event_type == s.event_type


class TestSelectionIO:
    def test_round_trip(self, tmp_path):
        sels = [TargetSelection("P1", 3, "lab"),
                TargetSelection("P2", 1, "diagnosis")]
        path = tmp_path / "sels.jsonl"
        write_selections(sels, path)
        assert load_selections(path) == sels
