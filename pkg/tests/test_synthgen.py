import io
import math

import numpy as np
import pytest
from scipy.stats import chi2

from nep.errors import NonErgodicChainError, ValidationError
from nep.events import write_cohort
from nep.synthgen import (
    CohortSpec,
    MarkovOracle,
    build_oracle,
    generate_cohort,
    load_oracle,
    oracle_conditional_entropy,
    oracle_next_event_dist,
    write_oracle,
)


def small_spec(**overrides):
    base = dict(
        n_patients=50,
        codes_per_type={"lab": 5, "diagnosis": 5},
        gap_mean_days={"lab": 2.0, "diagnosis": 10.0},
        min_events=5,
        max_events=15,
        seed=123,
    )
    base.update(overrides)
    return CohortSpec(**base)


def cohort_bytes(cohort):
    buf = io.StringIO()
    for r in cohort:
        from nep.events import record_to_obj
        import json

        buf.write(json.dumps(record_to_obj(r), separators=(",", ":")) + "\n")
    return buf.getvalue().encode()


class TestSpecValidation:
    def test_bad_hazards(self):
        with pytest.raises(ValidationError):
            small_spec(hazards=(0.1,))
        with pytest.raises(ValidationError):
            small_spec(hazards=(0.1, -0.2))

    def test_bad_lengths(self):
        with pytest.raises(ValidationError):
            small_spec(min_events=10, max_events=5)

    def test_bad_codes(self):
        with pytest.raises(ValidationError):
            small_spec(codes_per_type={"lab": 0})
        with pytest.raises(ValidationError):
            small_spec(codes_per_type={"death": 3})

    def test_bad_weights(self):
        with pytest.raises(ValidationError):
            small_spec(mode_weights=())
        with pytest.raises(ValidationError):
            small_spec(mode_weights=(0.5, -0.1))


class TestOracleInvariants:
    def test_rows_stochastic(self):
        oracle = build_oracle(small_spec())
        assert np.abs(oracle.transition.sum(axis=-1) - 1.0).max() < 1e-12
        assert abs(oracle.pi.sum() - 1.0) < 1e-12

    def test_doubly_stochastic_by_construction(self):
        # columns also sum to 1, so both groups share the uniform stationary
        oracle = build_oracle(small_spec())
        assert np.abs(oracle.transition.sum(axis=1) - 1.0).max() < 1e-9

    def test_invalid_rows_rejected(self):
        t = np.full((1, 3, 3), 0.5)
        with pytest.raises(ValidationError):
            MarkovOracle([("lab", "A"), ("lab", "B"), ("lab", "C")],
                         np.full(3, 1 / 3), t, (0.1,), {}, {})


class TestGenerate:
    def test_deterministic_byte_identical(self):
        a, _ = generate_cohort(small_spec())
        b, _ = generate_cohort(small_spec())
        assert cohort_bytes(a) == cohort_bytes(b)

    def test_prefix_stability_across_sizes(self):
        # patient i depends only on (seed, i): parallel generation safe
        small, _ = generate_cohort(small_spec(n_patients=10))
        large, _ = generate_cohort(small_spec(n_patients=25))
        assert cohort_bytes(small) == cohort_bytes(large[:10])

    def test_records_valid_and_sorted(self):
        cohort, _ = generate_cohort(small_spec())
        for r in cohort:
            ts = [e.ts for e in r.events]
            assert ts == sorted(ts)
            assert {"high_risk", "survival"} <= set(r.outcomes)
            assert r.outcomes["survival"]["time"] > 0

    def test_lengths_within_bounds(self):
        cohort, _ = generate_cohort(small_spec())
        for r in cohort:
            assert 5 <= len(r.events) <= 15

    def test_deterministic_chain_follows_permutation(self):
        # a single mode with no smoothing is a permutation matrix: at every
        # step the realized next token must be the row's argmax
        spec = small_spec(mode_weights=(1.0,), transition_smoothing=0.0,
                          n_patients=20)
        cohort, oracle = generate_cohort(spec)
        for r in cohort:
            g = oracle.assignments[r.patient_id]
            idx = [oracle.token_index(e) for e in r.events]
            for cur, nxt in zip(idx, idx[1:]):
                assert nxt == int(np.argmax(oracle.transition[g, cur]))

    def test_empirical_transitions_match_T(self):
        # ~1e5 events in one risk group; 4 tokens keep the per-row counts
        # large enough that the 0.02 bound has real statistical headroom
        spec = CohortSpec(
            n_patients=2500,
            codes_per_type={"lab": 2, "diagnosis": 2},
            n_risk_groups=1,
            mode_weights=(0.5, 0.5),
            hazards=(0.001,),
            min_events=40,
            max_events=40,
            seed=9,
        )
        cohort, oracle = generate_cohort(spec)
        k = 4
        counts = np.zeros((k, k))
        for r in cohort:
            idx = [oracle.token_index(e) for e in r.events]
            for cur, nxt in zip(idx, idx[1:]):
                counts[cur, nxt] += 1
        assert counts.sum() >= 9e4
        rows = counts / counts.sum(axis=1, keepdims=True)
        l1 = np.abs(rows - oracle.transition[0]).sum(axis=1)
        assert l1.max() < 0.02

    def test_chi_square_goodness_of_fit(self):
        spec = CohortSpec(
            n_patients=2700,
            codes_per_type={"lab": 5, "diagnosis": 5},
            n_risk_groups=1,
            hazards=(0.001,),
            min_events=40,
            max_events=40,
            seed=10,
        )
        cohort, oracle = generate_cohort(spec)
        k = 10
        counts = np.zeros((k, k))
        for r in cohort:
            idx = [oracle.token_index(e) for e in r.events]
            for cur, nxt in zip(idx, idx[1:]):
                counts[cur, nxt] += 1
        stat = 0.0
        dof = 0
        for j in range(k):
            expected = oracle.transition[0, j] * counts[j].sum()
            keep = expected >= 5
            stat += ((counts[j, keep] - expected[keep]) ** 2 / expected[keep]).sum()
            dof += int(keep.sum()) - 1
        p_value = chi2.sf(stat, dof)
        assert p_value > 0.001

    def test_survival_median_matches_hazard(self):
        lam = (math.log(2) / 100.0, math.log(2) / 400.0)
        spec = CohortSpec(
            n_patients=6000,
            codes_per_type={"lab": 2},
            hazards=lam,
            min_events=1,
            max_events=2,
            censor_horizon_days=1e9,
            seed=21,
        )
        cohort, oracle = generate_cohort(spec)
        for g, lam_g in enumerate(lam):
            times = [r.outcomes["survival"]["time"] for r in cohort
                     if oracle.assignments[r.patient_id] == g]
            assert len(times) >= 2500
            median = float(np.median(times))
            assert abs(median - math.log(2) / lam_g) / (math.log(2) / lam_g) < 0.10

    def test_censoring_at_horizon(self):
        spec = small_spec(censor_horizon_days=50.0, n_patients=200)
        cohort, _ = generate_cohort(spec)
        for r in cohort:
            out = r.outcomes["survival"]
            assert out["time"] <= 50.0
            if out["event"] == 0:
                assert out["time"] == 50.0


class TestNextEventDist:
    def test_matches_transition_row(self):
        cohort, oracle = generate_cohort(small_spec())
        r = cohort[3]
        g = oracle.assignments[r.patient_id]
        dist = oracle_next_event_dist(oracle, r.patient_id, list(r.events))
        j = oracle.token_index(r.events[-1])
        assert np.array_equal(dist, oracle.transition[g, j])
        assert abs(dist.sum() - 1.0) < 1e-12

    def test_accepts_token_indices(self):
        cohort, oracle = generate_cohort(small_spec())
        pid = cohort[0].patient_id
        g = oracle.assignments[pid]
        dist = oracle_next_event_dist(oracle, pid, [0, 3])
        assert np.array_equal(dist, oracle.transition[g, 3])

    def test_uniform_row_gives_uniform(self):
        k = 4
        tokens = [("lab", f"L{i}") for i in range(k)]
        oracle = MarkovOracle(tokens, np.full(k, 0.25),
                              np.full((1, k, k), 0.25), (0.1,), {}, {"P0": 0})
        dist = oracle_next_event_dist(oracle, "P0", [2])
        assert np.allclose(dist, 0.25)

    def test_errors(self):
        cohort, oracle = generate_cohort(small_spec())
        pid = cohort[0].patient_id
        with pytest.raises(ValidationError):
            oracle_next_event_dist(oracle, pid, [])
        with pytest.raises(ValidationError):
            oracle_next_event_dist(oracle, pid, [("lab", "NOPE")])
        with pytest.raises(ValidationError):
            oracle_next_event_dist(oracle, "P-missing", [0])


class TestConditionalEntropy:
    def test_uniform_chain_is_log_k(self):
        k = 6
        tokens = [("lab", f"L{i}") for i in range(k)]
        oracle = MarkovOracle(tokens, np.full(k, 1 / k),
                              np.full((1, k, k), 1 / k), (0.1,), {}, {})
        assert abs(oracle_conditional_entropy(oracle) - math.log(k)) < 1e-10

    def test_permutation_chain_is_zero(self):
        # a permutation chain is deterministic: zero conditional entropy,
        # whether it is a single cycle or splits into recurrent components
        oracle = build_oracle(small_spec(mode_weights=(1.0,),
                                         transition_smoothing=0.0))
        try:
            assert oracle_conditional_entropy(oracle) < 1e-12
        except NonErgodicChainError as exc:
            assert exc.per_component
            assert all(abs(h) < 1e-12 for h in exc.per_component.values())

    def test_matches_monte_carlo(self):
        # independent oracle: ergodic average of -log T[x_t, x_{t+1}] over a
        # simulated 1e6-step chain
        rng = np.random.default_rng(5)
        k = 10
        t = rng.dirichlet(np.full(k, 0.7), size=k)
        tokens = [("lab", f"L{i}") for i in range(k)]
        oracle = MarkovOracle(tokens, np.full(k, 1 / k), t[None, :, :], (0.1,), {}, {})
        exact = oracle_conditional_entropy(oracle)

        cum = np.cumsum(t, axis=1)
        n = 1_000_000
        us = rng.random(n + 10_000)
        cur = 0
        total = 0.0
        for i in range(10_000):  # burn-in
            cur = min(int(np.searchsorted(cum[cur], us[i], side="right")), k - 1)
        for i in range(10_000, n + 10_000):
            nxt = min(int(np.searchsorted(cum[cur], us[i], side="right")), k - 1)
            total += -math.log(t[cur, nxt])
            cur = nxt
        assert abs(total / n - exact) < 0.005

    def test_group_mixture_weighting(self):
        k = 4
        tokens = [("lab", f"L{i}") for i in range(k)]
        uniform = np.full((k, k), 1 / k)
        perm = np.eye(k)[np.roll(np.arange(k), 1)]
        oracle = MarkovOracle(tokens, np.full(k, 1 / k),
                              np.stack([uniform, perm]), (0.1, 0.2), {},
                              {"P0": 0, "P1": 0, "P2": 0, "P3": 1})
        # 3/4 weight on the uniform group, 1/4 on the deterministic one
        assert abs(oracle_conditional_entropy(oracle) - 0.75 * math.log(k)) < 1e-9

    def test_non_ergodic_reports_components(self):
        tokens = [("lab", f"L{i}") for i in range(4)]
        t = np.zeros((4, 4))
        t[0, 1] = t[1, 0] = 1.0          # component {0,1}: deterministic swap
        t[2:, 2:] = 0.5                   # component {2,3}: uniform
        oracle = MarkovOracle(tokens, np.full(4, 0.25), t[None, :, :], (0.1,), {}, {})
        with pytest.raises(NonErgodicChainError) as exc:
            oracle_conditional_entropy(oracle)
        per = exc.value.per_component
        assert abs(per[(0, 1)]) < 1e-12
        assert abs(per[(2, 3)] - math.log(2)) < 1e-9


class TestOracleRoundTrip:
    def test_sidecar_round_trip(self, tmp_path):
        cohort, oracle = generate_cohort(small_spec())
        path = tmp_path / "oracle.json"
        write_oracle(oracle, path)
        loaded = load_oracle(path)
        assert loaded.tokens == oracle.tokens
        assert np.array_equal(loaded.pi, oracle.pi)
        assert np.array_equal(loaded.transition, oracle.transition)
        assert loaded.hazards == oracle.hazards
        assert loaded.assignments == oracle.assignments

    def test_cohort_file_loadable(self, tmp_path):
        from nep.events import load_cohort

        cohort, _ = generate_cohort(small_spec())
        path = tmp_path / "cohort.jsonl"
        write_cohort(cohort, path)
        loaded, vocab = load_cohort(path, min_count=1)
        assert len(loaded) == len(cohort)
        assert vocab.n_events == 10
