"""Training: AdamW with linear warmup + cosine decay, gradient accumulation
to a fixed global batch, optional low-rank adapter training with a frozen
base, an MLM variant for the bidirectional comparison, and a
finite-difference gradient checker.

Everything is deterministic given the config seed: shuffling, micro-batch
order, and gradient summation order are fixed.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from nep.errors import DivergenceError, ValidationError
from nep.events import MASK_ID, PAD_ID
from nep.model import (
    AdapterSet,
    ModelParams,
    backward,
    effective_params,
    forward,
    init_adapters,
    loss_and_grad,
)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings. Desk-scale defaults; the full-scale analogues
    (peak_lr 5e-5, global batch 512) remain valid values."""

    total_steps: int
    peak_lr: float = 3e-4
    warmup_fraction: float = 0.10
    global_batch: int = 64
    micro_batch: int = 16
    adapter_rank: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    mask_mode: str = "causal"
    mlm_mask_rate: float = 0.15
    divergence_factor: float = 2.0
    divergence_patience: int = 100

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValidationError("total_steps must be >= 1")
        if not 0 < self.warmup_fraction < 1:
            raise ValidationError("warmup_fraction must be in (0, 1)")
        if self.global_batch < 1 or self.micro_batch < 1:
            raise ValidationError("batch sizes must be >= 1")
        if self.global_batch % self.micro_batch != 0:
            raise ValidationError("global_batch must be a multiple of micro_batch")
        if self.peak_lr <= 0:
            raise ValidationError("peak_lr must be > 0")
        if self.adapter_rank < 0:
            raise ValidationError("adapter_rank must be >= 0")
        if self.mask_mode not in ("causal", "bidirectional_mlm"):
            raise ValidationError(f"unknown mask_mode {self.mask_mode!r}")
        if not 0 < self.mlm_mask_rate < 1:
            raise ValidationError("mlm_mask_rate must be in (0, 1)")


def lr_at(step, config: TrainConfig) -> float:
    """Linear warmup over the first warmup_fraction of steps, then cosine
    decay to zero at total_steps."""
    if not 0 <= step <= config.total_steps:
        raise ValidationError(f"step {step} outside [0, {config.total_steps}]")
    warmup_end = config.warmup_fraction * config.total_steps
    if step < warmup_end:
        return config.peak_lr * step / warmup_end
    progress = (step - warmup_end) / (config.total_steps - warmup_end)
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainResult:
    params: ModelParams
    adapters: AdapterSet | None
    curve: list
    hook_records: list = field(default_factory=list)
    wall_time_s: float = 0.0


class _AdamW:
    """Decoupled weight decay; decay applies to matrices only (ndim >= 2)."""

    def __init__(self, tensors: dict, config: TrainConfig):
        self.cfg = config
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.t = 0

    def step(self, tensors: dict, grads: dict, lr: float):
        self.t += 1
        c = self.cfg
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for name, param in tensors.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.epsilon)
            if param.ndim >= 2:
                update = update + c.weight_decay * param
            param -= (lr * update).astype(param.dtype)


def _prepared(instances):
    prep = []
    for ins in instances:
        ids = np.asarray(ins.tokens, dtype=np.int64)
        prep.append((ids, len(ins.context_tokens)))
    return prep


def _pack_causal(batch):
    """Right-pad and build shifted next-token targets on response positions."""
    width = max(len(ids) for ids, _ in batch)
    n = len(batch)
    ids = np.full((n, width), PAD_ID, dtype=np.int64)
    targets = np.zeros((n, width), dtype=np.int64)
    mask = np.zeros((n, width), dtype=bool)
    valid = np.zeros((n, width), dtype=bool)
    for row, (toks, ctx_len) in enumerate(batch):
        ids[row, :len(toks)] = toks
        valid[row, :len(toks)] = True
        # logits at p-1 predict the response token at p
        for p in range(ctx_len, len(toks)):
            targets[row, p - 1] = toks[p]
            mask[row, p - 1] = True
    return ids, targets, mask, valid


def _pack_mlm(batch, rng, rate):
    """Mask `rate` of context positions (at least one) and predict them."""
    width = max(ctx_len for _, ctx_len in batch)
    n = len(batch)
    ids = np.full((n, width), PAD_ID, dtype=np.int64)
    targets = np.zeros((n, width), dtype=np.int64)
    mask = np.zeros((n, width), dtype=bool)
    valid = np.zeros((n, width), dtype=bool)
    for row, (toks, ctx_len) in enumerate(batch):
        ctx = toks[:ctx_len]
        ids[row, :ctx_len] = ctx
        valid[row, :ctx_len] = True
        pick = rng.random(ctx_len) < rate
        if not pick.any():
            pick[int(rng.integers(ctx_len))] = True
        targets[row, :ctx_len][pick] = ctx[pick]
        ids[row, :ctx_len][pick] = MASK_ID
        mask[row, :ctx_len] = pick
    return ids, targets, mask, valid


def _adapter_grads(adapters: AdapterSet, base_grads: dict) -> dict:
    """Project dW_eff onto the adapter factors: W_eff = W + s*A@B."""
    out = {}
    for name, ad in adapters.entries.items():
        dw = base_grads[name]
        out[f"{name}::a"] = ad.scaling * (dw @ ad.b.T)
        out[f"{name}::b"] = ad.scaling * (ad.a.T @ dw)
    return out


def train(instances, params: ModelParams, config: TrainConfig,
          hook=None, hook_every: int = 0) -> TrainResult:
    """Run the full schedule and return updated params plus the loss curve.

    With adapter_rank > 0 the base weights are frozen (bit-identical after
    training) and only the adapter factors move. Aborts with
    DivergenceError when the loss goes non-finite or stays above
    divergence_factor * initial loss for divergence_patience consecutive
    steps.
    """
    if not instances:
        raise ValidationError("no training instances")
    prep = _prepared(instances)
    rng = np.random.default_rng(config.seed)
    mlm = config.mask_mode == "bidirectional_mlm"

    adapters = None
    if config.adapter_rank > 0:
        adapters = init_adapters(params, config.adapter_rank, seed=config.seed)
        trainable = {}
        for name, ad in adapters.entries.items():
            trainable[f"{name}::a"] = ad.a
            trainable[f"{name}::b"] = ad.b
    else:
        trainable = params.tensors

    optim = _AdamW(trainable, config)
    curve = []
    hook_records = []
    initial_loss = None
    high_loss_streak = 0
    order = []
    cursor = 0
    started = time.perf_counter()

    for step in range(1, config.total_steps + 1):
        take = []
        while len(take) < config.global_batch:
            if cursor >= len(order):
                order = rng.permutation(len(prep))
                cursor = 0
            take.append(prep[order[cursor]])
            cursor += 1

        eff = effective_params(params, adapters) if adapters else params
        if mlm:
            ids, targets, mask, valid = _pack_mlm(take, rng, config.mlm_mask_rate)
        else:
            ids, targets, mask, valid = _pack_causal(take)
        total_positions = int(mask.sum())

        grads = None
        nll_sum = 0.0
        for lo in range(0, len(take), config.micro_batch):
            hi = lo + config.micro_batch
            result = forward(eff, ids[lo:hi], config.mask_mode,
                             key_valid=valid[lo:hi], return_cache=True)
            value, dlogits = loss_and_grad(result.logits, targets[lo:hi],
                                           mask[lo:hi])
            n_micro = int(mask[lo:hi].sum())
            nll_sum += value * n_micro
            dlogits *= n_micro / total_positions
            micro_grads = backward(eff, result.cache, dlogits)
            if grads is None:
                grads = micro_grads
            else:
                for name in grads:
                    grads[name] += micro_grads[name]

        step_loss = nll_sum / total_positions
        lr = lr_at(step, config)
        curve.append((step, step_loss, lr))

        if not math.isfinite(step_loss):
            raise DivergenceError(
                f"loss became non-finite at step {step}", step,
                [x[1] for x in curve[-10:]])
        if initial_loss is None:
            initial_loss = step_loss
        if step_loss > config.divergence_factor * initial_loss:
            high_loss_streak += 1
            if high_loss_streak >= config.divergence_patience:
                raise DivergenceError(
                    f"loss above {config.divergence_factor:g}x initial "
                    f"({initial_loss:.4f}) for {high_loss_streak} consecutive "
                    f"steps at step {step}", step, [x[1] for x in curve[-10:]])
        else:
            high_loss_streak = 0

        if adapters:
            optim.step(trainable, _adapter_grads(adapters, grads), lr)
        else:
            optim.step(trainable, grads, lr)

        for name, tensor in trainable.items():
            if not np.isfinite(tensor).all():
                raise DivergenceError(
                    f"non-finite parameter {name} after step {step}", step,
                    [x[1] for x in curve[-10:]])

        if hook is not None and hook_every > 0 and step % hook_every == 0:
            eff_now = effective_params(params, adapters) if adapters else params
            hook_records.append((step, hook(step, eff_now)))

    return TrainResult(params, adapters, curve, hook_records,
                       time.perf_counter() - started)


def response_cross_entropy(params: ModelParams, instances,
                           micro_batch: int = 64) -> float:
    """Mean NLL in nats of the response tokens under the causal model."""
    if not instances:
        raise ValidationError("no instances")
    prep = _prepared(instances)
    nll_sum = 0.0
    count = 0
    for lo in range(0, len(prep), micro_batch):
        batch = prep[lo:lo + micro_batch]
        ids, targets, mask, valid = _pack_causal(batch)
        result = forward(params, ids, "causal", key_valid=valid)
        value, _ = loss_and_grad(result.logits, targets, mask, want_grad=False)
        n = int(mask.sum())
        nll_sum += value * n
        count += n
    return nll_sum / count


def write_loss_curve(curve, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step,loss,lr\n")
        for step, value, lr in curve:
            fh.write(f"{step},{value:.10g},{lr:.10g}\n")


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_tensor: str
    n_coords: int
    per_tensor: dict


def grad_check(params: ModelParams, token_ids, targets, loss_mask,
               mask_mode: str = "causal", epsilon: float = 1e-5,
               n_coords: int = 200, seed: int = 0,
               corrupt: str | None = None) -> GradCheckResult:
    """Compare analytic gradients to central finite differences in float64.

    Coordinates are sampled round-robin across every parameter tensor so all
    groups are covered. `corrupt` flips the sign of one tensor's analytic
    gradient, which the check must flag (harness sensitivity).
    """
    p64 = params.astype(np.float64)
    ids = np.asarray(token_ids, dtype=np.int64)
    tgt = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(loss_mask, dtype=bool)

    result = forward(p64, ids, mask_mode, return_cache=True)
    _, dlogits = loss_and_grad(result.logits, tgt, mask)
    grads = backward(p64, result.cache, dlogits)
    if corrupt is not None:
        if corrupt not in grads:
            raise ValidationError(f"no parameter named {corrupt!r}")
        grads[corrupt] = -grads[corrupt]

    def objective():
        res = forward(p64, ids, mask_mode)
        value, _ = loss_and_grad(res.logits, tgt, mask, want_grad=False)
        return value

    rng = np.random.default_rng(seed)
    names = sorted(p64.tensors)
    per_tensor = {name: 0.0 for name in names}
    worst = (0.0, names[0])
    checked = 0
    i = 0
    while checked < n_coords:
        name = names[i % len(names)]
        i += 1
        tensor = p64.tensors[name]
        flat = int(rng.integers(tensor.size))
        original = tensor.flat[flat]
        tensor.flat[flat] = original + epsilon
        f_plus = objective()
        tensor.flat[flat] = original - epsilon
        f_minus = objective()
        tensor.flat[flat] = original
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        analytic = grads[name].flat[flat]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        per_tensor[name] = max(per_tensor[name], err)
        if err > worst[0]:
            worst = (err, name)
        checked += 1
    return GradCheckResult(worst[0], worst[1], checked, per_tensor)
