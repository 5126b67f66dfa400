import math

import numpy as np
import pytest

from nep.errors import DivergenceError, ValidationError
from nep.events import MASK_ID
from nep.model import ModelConfig, forward, init_params, loss_and_grad, backward
from nep.serialize import TrainingInstance
from nep.training import (
    GradCheckResult,
    TrainConfig,
    grad_check,
    lr_at,
    response_cross_entropy,
    train,
    write_loss_curve,
)


def make_instance(ctx, resp, pid="P0", ti=1):
    mask = (False,) * len(ctx) + (True,) * len(resp)
    return TrainingInstance(tuple(ctx), tuple(resp), mask, pid, ti)


def toy_instances(rng, n, vocab=20, ctx_len=9):
    out = []
    for i in range(n):
        ctx = [1] + list(rng.integers(6, vocab, size=ctx_len - 2)) + [5]
        resp = [int(rng.integers(6, vocab))]
        out.append(make_instance(ctx, resp, pid=f"P{i}"))
    return out


def toy_params(vocab=20, d=32, seed=1):
    return init_params(ModelConfig(vocab_size=vocab, n_layers=2, d_model=d,
                                   n_heads=4, max_positions=64), seed=seed)


class TestSchedule:
    def cfg(self, total=1000, peak=0.01):
        return TrainConfig(total_steps=total, peak_lr=peak, seed=0)

    def test_endpoints_exact(self):
        cfg = self.cfg()
        assert lr_at(0, cfg) == 0.0
        assert abs(lr_at(0.1 * cfg.total_steps, cfg) - cfg.peak_lr) < 1e-12
        assert abs(lr_at(cfg.total_steps, cfg)) < 1e-12

    def test_midpoint_half_peak(self):
        cfg = self.cfg()
        warmup_end = 0.1 * cfg.total_steps
        mid = warmup_end + (cfg.total_steps - warmup_end) / 2
        assert abs(lr_at(mid, cfg) - cfg.peak_lr / 2) < 1e-12

    def test_warmup_linear(self):
        cfg = self.cfg()
        assert abs(lr_at(50, cfg) - cfg.peak_lr * 0.5) < 1e-12

    def test_continuous_and_unimodal(self):
        cfg = self.cfg(total=400)
        values = [lr_at(s, cfg) for s in np.linspace(0, 400, 2001)]
        diffs = np.diff(values)
        peak_at = int(np.argmax(values))
        assert all(d >= -1e-15 for d in diffs[:peak_at])
        assert all(d <= 1e-15 for d in diffs[peak_at:])
        assert np.abs(np.diff(values)).max() < cfg.peak_lr * 0.02

    def test_out_of_range_rejected(self):
        cfg = self.cfg()
        with pytest.raises(ValidationError):
            lr_at(-1, cfg)
        with pytest.raises(ValidationError):
            lr_at(1001, cfg)

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            TrainConfig(total_steps=0)
        with pytest.raises(ValidationError):
            TrainConfig(total_steps=10, warmup_fraction=0.0)
        with pytest.raises(ValidationError):
            TrainConfig(total_steps=10, global_batch=10, micro_batch=3)
        with pytest.raises(ValidationError):
            TrainConfig(total_steps=10, mask_mode="none")


class TestTrain:
    def test_overfit_single_instance(self):
        rng = np.random.default_rng(0)
        instances = toy_instances(rng, 1)
        params = toy_params()
        cfg = TrainConfig(total_steps=500, peak_lr=3e-3, global_batch=4,
                          micro_batch=4, seed=1)
        result = train(instances, params, cfg)
        assert result.curve[-1][1] < 0.01

    def test_deterministic_curves(self):
        rng = np.random.default_rng(1)
        instances = toy_instances(rng, 40)
        cfg = TrainConfig(total_steps=12, peak_lr=1e-3, global_batch=8,
                          micro_batch=4, seed=9)
        a = train(instances, toy_params(), cfg)
        b = train(instances, toy_params(), cfg)
        assert a.curve == b.curve
        for name in a.params.tensors:
            assert np.array_equal(a.params.tensors[name],
                                  b.params.tensors[name])

    def test_empty_instances_rejected(self):
        with pytest.raises(ValidationError):
            train([], toy_params(), TrainConfig(total_steps=1, seed=0))

    def test_nan_divergence_aborts(self):
        rng = np.random.default_rng(2)
        instances = toy_instances(rng, 16)
        cfg = TrainConfig(total_steps=400, peak_lr=1e9, warmup_fraction=0.01,
                          global_batch=8, micro_batch=8, seed=3,
                          divergence_patience=5)
        with pytest.raises(DivergenceError) as exc:
            train(instances, toy_params(), cfg)
        assert exc.value.step <= 400
        assert exc.value.recent_losses

    def test_sustained_high_loss_aborts(self):
        rng = np.random.default_rng(3)
        instances = toy_instances(rng, 16)
        # lr large enough to wreck the loss but small enough to stay finite
        cfg = TrainConfig(total_steps=400, peak_lr=2.0, warmup_fraction=0.05,
                          global_batch=8, micro_batch=8, seed=4,
                          divergence_factor=1.2, divergence_patience=10)
        with pytest.raises(DivergenceError):
            train(instances, toy_params(), cfg)

    def test_hooks_invoked(self):
        rng = np.random.default_rng(4)
        instances = toy_instances(rng, 16)
        cfg = TrainConfig(total_steps=9, peak_lr=1e-3, global_batch=4,
                          micro_batch=4, seed=5)
        seen = []
        result = train(instances, toy_params(), cfg,
                       hook=lambda step, p: seen.append(step) or step,
                       hook_every=3)
        assert seen == [3, 6, 9]
        assert [s for s, _ in result.hook_records] == [3, 6, 9]

    def test_gradient_accumulation_matches_single_micro(self):
        rng = np.random.default_rng(5)
        instances = toy_instances(rng, 8)
        base = TrainConfig(total_steps=4, peak_lr=1e-3, global_batch=8,
                           micro_batch=8, seed=6)
        accum = TrainConfig(total_steps=4, peak_lr=1e-3, global_batch=8,
                            micro_batch=2, seed=6)
        a = train(instances, toy_params(d=32), base)
        b = train(instances, toy_params(d=32), accum)
        for step in range(4):
            assert abs(a.curve[step][1] - b.curve[step][1]) < 1e-5
        for name in a.params.tensors:
            assert np.abs(a.params.tensors[name]
                          - b.params.tensors[name]).max() < 1e-5


class TestAdapterTraining:
    def test_base_frozen_bit_identical(self):
        rng = np.random.default_rng(6)
        instances = toy_instances(rng, 24)
        params = toy_params()
        before = params.checksum()
        cfg = TrainConfig(total_steps=15, peak_lr=5e-3, global_batch=8,
                          micro_batch=8, adapter_rank=4, seed=7)
        result = train(instances, params, cfg)
        assert params.checksum() == before
        assert result.adapters is not None
        moved = [np.abs(ad.b).max() for ad in result.adapters.entries.values()]
        assert max(moved) > 0

    def test_adapter_training_reduces_loss(self):
        # only the q/v maps adapt, so expect a modest but real improvement
        rng = np.random.default_rng(7)
        instances = toy_instances(rng, 4)
        cfg = TrainConfig(total_steps=250, peak_lr=1e-2, global_batch=4,
                          micro_batch=4, adapter_rank=8, seed=8)
        result = train(instances, toy_params(), cfg)
        assert result.curve[-1][1] < result.curve[0][1] * 0.9


class TestMLM:
    def test_mlm_mode_trains(self):
        rng = np.random.default_rng(8)
        instances = toy_instances(rng, 24, ctx_len=12)
        cfg = TrainConfig(total_steps=20, peak_lr=2e-3, global_batch=8,
                          micro_batch=8, seed=9, mask_mode="bidirectional_mlm")
        result = train(instances, toy_params(), cfg)
        assert math.isfinite(result.curve[-1][1])
        assert result.curve[-1][1] < result.curve[0][1]

    def test_mlm_batch_masks_context_only(self):
        from nep.training import _pack_mlm, _prepared

        rng = np.random.default_rng(10)
        instances = toy_instances(rng, 6, ctx_len=10)
        prep = _prepared(instances)
        ids, targets, mask, valid = _pack_mlm(prep, rng, 0.15)
        assert mask.any(axis=1).all()          # at least one mask per row
        assert (ids[mask] == MASK_ID).all()
        for row, (toks, ctx_len) in enumerate(prep):
            picked = np.flatnonzero(mask[row])
            assert (picked < ctx_len).all()    # never a response position
            assert np.array_equal(targets[row, picked], toks[picked])
            keep = np.setdiff1d(np.arange(ctx_len), picked)
            assert np.array_equal(ids[row, keep], toks[keep])


class TestResponseCrossEntropy:
    def test_matches_manual(self):
        rng = np.random.default_rng(11)
        instances = toy_instances(rng, 5)
        params = toy_params()
        got = response_cross_entropy(params, instances)
        total, count = 0.0, 0
        for ins in instances:
            ids = np.asarray(ins.tokens)
            out = forward(params, ids)
            p = len(ins.context_tokens)
            logit = out.logits[p - 1].astype(np.float64)
            logz = np.log(np.exp(logit - logit.max()).sum()) + logit.max()
            total += logz - logit[ids[p]]
            count += 1
        assert abs(got - total / count) < 1e-6


class TestLossCurveIO:
    def test_csv_format(self, tmp_path):
        path = tmp_path / "curve.csv"
        write_loss_curve([(1, 2.5, 0.001), (2, 2.25, 0.002)], path)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,loss,lr"
        assert lines[1].startswith("1,2.5,")


@pytest.fixture(scope="module")
def setup():
    rng = np.random.default_rng(12)
    params = toy_params(vocab=20, d=16, seed=2)
    ids = rng.integers(0, 20, size=12)
    targets = np.zeros(12, dtype=np.int64)
    mask = np.zeros(12, dtype=bool)
    targets[6], mask[6] = 7, True
    targets[11], mask[11] = 3, True
    return params, ids, targets, mask


class TestGradCheck:
    def test_analytic_matches_finite_differences(self, setup):
        params, ids, targets, mask = setup
        result = grad_check(params, ids, targets, mask, n_coords=220, seed=1)
        assert isinstance(result, GradCheckResult)
        assert result.n_coords >= 220
        assert result.max_rel_error < 1e-4
        # every tensor was visited
        assert all(v >= 0 for v in result.per_tensor.values())
        assert len(result.per_tensor) == len(params.tensors)

    def test_sign_flip_detected(self, setup):
        params, ids, targets, mask = setup
        result = grad_check(params, ids, targets, mask, n_coords=220, seed=1,
                            corrupt="layers.0.attn.wq")
        assert result.max_rel_error > 1e-1

    def test_unknown_corrupt_name(self, setup):
        params, ids, targets, mask = setup
        with pytest.raises(ValidationError):
            grad_check(params, ids, targets, mask, corrupt="nope")

    def test_unused_position_row_zero_gradient(self, setup):
        # with tied token embeddings every vocab row sees output-projection
        # gradient, so the exactly-unused parameters are the position rows
        # beyond the sequence length: analytic and numeric both exactly 0
        params, ids, targets, mask = setup
        p64 = params.astype(np.float64)
        result = forward(p64, ids, return_cache=True)
        _, dlogits = loss_and_grad(result.logits, targets, mask)
        grads = backward(p64, result.cache, dlogits)
        row = len(ids) + 3
        assert np.array_equal(grads["pos_emb"][row],
                              np.zeros(p64.config.d_model))
        eps = 1e-5
        t = p64.tensors["pos_emb"]
        t[row, 3] += eps
        up = loss_and_grad(forward(p64, ids).logits, targets, mask,
                           want_grad=False)[0]
        t[row, 3] -= 2 * eps
        down = loss_and_grad(forward(p64, ids).logits, targets, mask,
                             want_grad=False)[0]
        t[row, 3] += eps
        assert up == down
