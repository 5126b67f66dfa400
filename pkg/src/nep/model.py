"""Miniature decoder transformer with hand-written numpy backprop.

Architecture: tied token embeddings, learned absolute positions, pre-norm
residual blocks (attention + 4x GELU MLP), final layer norm, and a
switchable attention mask (causal vs. fully bidirectional for the
masked-token objective). Single precision by default; float64 exists for
finite-difference gradient checking.

The attention softmax runs through nep.backend so the compiled kernel is
used when built; everything else is plain numpy whose time is dominated by
BLAS matmuls.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from nep import backend
from nep.errors import AdapterMergeError, ValidationError

MASK_MODES = ("causal", "bidirectional_mlm")

_LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    d_model: int = 128
    n_heads: int = 4
    max_positions: int = 512
    init_scale: float = 0.02

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValidationError("vocab_size must be >= 2")
        if self.d_model % self.n_heads != 0:
            raise ValidationError("d_model must be divisible by n_heads")
        if min(self.n_layers, self.n_heads, self.max_positions) < 1:
            raise ValidationError("n_layers, n_heads, max_positions must be >= 1")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "max_positions": self.max_positions,
            "init_scale": self.init_scale,
        }


def _param_shapes(cfg: ModelConfig):
    d, h = cfg.d_model, 4 * cfg.d_model
    shapes = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.max_positions, d)}
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for name in ("wq", "wk", "wv", "wo"):
            shapes[p + f"attn.{name}"] = (d, d)
        for name in ("bq", "bk", "bv", "bo"):
            shapes[p + f"attn.{name}"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "mlp.w1"] = (d, h)
        shapes[p + "mlp.b1"] = (h,)
        shapes[p + "mlp.w2"] = (h, d)
        shapes[p + "mlp.b2"] = (d,)
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    return shapes


@dataclass
class ModelParams:
    """All model weights as named numpy arrays in a fixed canonical order."""

    config: ModelConfig
    tensors: dict
    merged_adapter_ids: list = field(default_factory=list)

    @property
    def dtype(self):
        return self.tensors["tok_emb"].dtype

    def copy(self) -> "ModelParams":
        return ModelParams(self.config,
                           {k: v.copy() for k, v in self.tensors.items()},
                           list(self.merged_adapter_ids))

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config,
                           {k: v.astype(dtype) for k, v in self.tensors.items()},
                           list(self.merged_adapter_ids))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(self.tensors[name].tobytes())
        return h.hexdigest()

    def assert_finite(self):
        for name, t in self.tensors.items():
            if not np.isfinite(t).all():
                raise ValidationError(f"non-finite values in parameter {name}")


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Scaled-normal init (gain init_scale) for weights, zeros for biases,
    identity layer norms."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in _param_shapes(cfg).items():
        if name.endswith((".g",)):
            t = np.ones(shape)
        elif name.endswith((".b", "b1", "b2", "bq", "bk", "bv", "bo")):
            t = np.zeros(shape)
        else:
            t = rng.normal(0.0, cfg.init_scale, size=shape)
        tensors[name] = t.astype(dtype)
    return ModelParams(cfg, tensors)


# ---------------------------------------------------------------------------
# primitive ops with explicit backward


def _layer_norm_fwd(x, g, b):
    shape = x.shape
    y2, xhat2, inv2 = backend.layer_norm_fwd(x.reshape(-1, shape[-1]), g, b,
                                             _LN_EPS)
    cache = (xhat2.reshape(shape), inv2.reshape(shape[:-1] + (1,)), g)
    return y2.reshape(shape), cache


def _layer_norm_bwd(dy, cache):
    xhat, inv, g = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=axes)
    db = dy.sum(axis=axes)
    dxhat = dy * g
    dx = inv * (dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _gelu_fwd(x):
    return backend.gelu_fwd(x)


def _gelu_bwd(dy, dcoef):
    return dy * dcoef


def _matmul2d(x, w):
    # flatten leading axes: one fat gemm instead of numpy's per-batch loop
    lead = x.shape[:-1]
    out = x.reshape(-1, x.shape[-1]) @ w
    return out.reshape(lead + (w.shape[-1],))


def _linear_fwd(x, w, b):
    return _matmul2d(x, w) + b, x


def _linear_bwd(dy, x, w):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return _matmul2d(dy, w.T), x2.T @ dy2, dy2.sum(axis=0)


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardResult:
    """Per-position logits, final hidden states, and attention maps."""

    logits: np.ndarray
    hidden: np.ndarray
    attentions: list
    cache: dict | None = None


def forward(params: ModelParams, token_ids, mask_mode: str = "causal",
            key_valid=None, return_cache: bool = False) -> ForwardResult:
    """Run the model. token_ids is [T] or [B, T] of ids; key_valid marks
    real (non-pad) key positions when right-padded batches are used.

    Attention rows sum to 1; under the causal mask the weight from position
    t to any position > t is exactly zero, so earlier logits cannot depend
    on later tokens.
    """
    if mask_mode not in MASK_MODES:
        raise ValidationError(f"unknown mask mode {mask_mode!r}")
    cfg = params.config
    ids = np.asarray(token_ids, dtype=np.int64)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
        if key_valid is not None:
            key_valid = np.asarray(key_valid, dtype=bool)[None, :]
    if ids.ndim != 2 or ids.shape[1] < 1:
        raise ValidationError("token_ids must be a non-empty 1-D or 2-D array")
    if ids.shape[1] > cfg.max_positions:
        raise ValidationError(
            f"sequence length {ids.shape[1]} exceeds max_positions {cfg.max_positions}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValidationError("token id out of vocabulary range")

    t = params.tensors
    causal = mask_mode == "causal"
    seq = ids.shape[1]
    scale = 1.0 / np.sqrt(cfg.d_model // cfg.n_heads)

    x = t["tok_emb"][ids] + t["pos_emb"][:seq]
    layer_caches = []
    attentions = []
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        a, ln1_cache = _layer_norm_fwd(x, t[p + "ln1.g"], t[p + "ln1.b"])
        # one fat gemm for q/k/v beats three thin ones at this size
        w_qkv = np.concatenate([t[p + "attn.wq"], t[p + "attn.wk"],
                                t[p + "attn.wv"]], axis=1)
        b_qkv = np.concatenate([t[p + "attn.bq"], t[p + "attn.bk"],
                                t[p + "attn.bv"]])
        qkv, _ = _linear_fwd(a, w_qkv, b_qkv)
        q, k, v = np.split(qkv, 3, axis=-1)
        qh, kh, vh = (_split_heads(z, cfg.n_heads) for z in (q, k, v))
        scores = np.matmul(qh, kh.transpose(0, 1, 3, 2)) * scale
        probs = backend.masked_softmax(scores, causal, key_valid)
        ctx = _merge_heads(np.matmul(probs, vh))
        attn_out, _ = _linear_fwd(ctx, t[p + "attn.wo"], t[p + "attn.bo"])
        x_mid = x + attn_out

        m, ln2_cache = _layer_norm_fwd(x_mid, t[p + "ln2.g"], t[p + "ln2.b"])
        h_pre, _ = _linear_fwd(m, t[p + "mlp.w1"], t[p + "mlp.b1"])
        h_act, gelu_cache = _gelu_fwd(h_pre)
        mlp_out, _ = _linear_fwd(h_act, t[p + "mlp.w2"], t[p + "mlp.b2"])
        x_out = x_mid + mlp_out

        attentions.append(probs)
        layer_caches.append({
            "a": a, "ln1": ln1_cache, "w_qkv": w_qkv, "qh": qh, "kh": kh,
            "vh": vh, "probs": probs, "ctx": ctx, "m": m,
            "ln2": ln2_cache, "gelu": gelu_cache, "h_act": h_act,
        })
        x = x_out

    hidden, lnf_cache = _layer_norm_fwd(x, t["ln_f.g"], t["ln_f.b"])
    logits = _matmul2d(hidden, t["tok_emb"].T)

    cache = None
    if return_cache:
        cache = {"ids": ids, "layers": layer_caches, "lnf": lnf_cache,
                 "hidden": hidden, "scale": scale, "squeeze": squeeze}
    if squeeze:
        return ForwardResult(logits[0], hidden[0],
                             [a[0] for a in attentions], cache)
    return ForwardResult(logits, hidden, attentions, cache)


def backward(params: ModelParams, cache: dict, dlogits, dhidden=None) -> dict:
    """Gradients of a scalar objective w.r.t. every parameter tensor, given
    the objective's gradient on the logits (and optionally on the final
    hidden states)."""
    cfg = params.config
    t = params.tensors
    if cache["squeeze"]:
        dlogits = dlogits[None, ...]
        if dhidden is not None:
            dhidden = dhidden[None, ...]
    ids = cache["ids"]
    seq = ids.shape[1]
    scale = cache["scale"]
    grads = {name: np.zeros_like(arr) for name, arr in t.items()}

    hidden = cache["hidden"]
    dl2 = dlogits.reshape(-1, cfg.vocab_size)
    grads["tok_emb"] += dl2.T @ hidden.reshape(-1, cfg.d_model)
    dhid = _matmul2d(dlogits, t["tok_emb"])
    if dhidden is not None:
        dhid = dhid + dhidden
    dx, dg, db = _layer_norm_bwd(dhid, cache["lnf"])
    grads["ln_f.g"] += dg
    grads["ln_f.b"] += db

    for l in reversed(range(cfg.n_layers)):
        p = f"layers.{l}."
        c = cache["layers"][l]

        # MLP branch
        dmlp = dx
        dh_act, dw2, db2 = _linear_bwd(dmlp, c["h_act"], t[p + "mlp.w2"])
        grads[p + "mlp.w2"] += dw2
        grads[p + "mlp.b2"] += db2
        dh_pre = _gelu_bwd(dh_act, c["gelu"])
        dm, dw1, db1 = _linear_bwd(dh_pre, c["m"], t[p + "mlp.w1"])
        grads[p + "mlp.w1"] += dw1
        grads[p + "mlp.b1"] += db1
        dx_mid, dg2, db2n = _layer_norm_bwd(dm, c["ln2"])
        grads[p + "ln2.g"] += dg2
        grads[p + "ln2.b"] += db2n
        dx_mid = dx_mid + dx

        # attention branch
        dattn_out = dx_mid
        dctx, dwo, dbo = _linear_bwd(dattn_out, c["ctx"], t[p + "attn.wo"])
        grads[p + "attn.wo"] += dwo
        grads[p + "attn.bo"] += dbo
        dctx_h = _split_heads(dctx, cfg.n_heads)
        dprobs = np.matmul(dctx_h, c["vh"].transpose(0, 1, 3, 2))
        dvh = np.matmul(c["probs"].transpose(0, 1, 3, 2), dctx_h)
        dscores = backend.attn_softmax_grad(c["probs"], dprobs)
        dqh = np.matmul(dscores, c["kh"]) * scale
        dkh = np.matmul(dscores.transpose(0, 1, 3, 2), c["qh"]) * scale

        dqkv = np.concatenate([_merge_heads(dqh), _merge_heads(dkh),
                               _merge_heads(dvh)], axis=-1)
        da, dw_qkv, db_qkv = _linear_bwd(dqkv, c["a"], c["w_qkv"])
        d = cfg.d_model
        for col, mat in enumerate(("q", "k", "v")):
            grads[p + f"attn.w{mat}"] += dw_qkv[:, col * d:(col + 1) * d]
            grads[p + f"attn.b{mat}"] += db_qkv[col * d:(col + 1) * d]
        dx_in, dg1, db1n = _layer_norm_bwd(da, c["ln1"])
        grads[p + "ln1.g"] += dg1
        grads[p + "ln1.b"] += db1n
        dx = dx_in + dx_mid

    # scatter-add via a one-hot gemm; much faster than np.add.at here
    flat_ids = ids.reshape(-1)
    onehot = np.zeros((flat_ids.size, cfg.vocab_size), dtype=dx.dtype)
    onehot[np.arange(flat_ids.size), flat_ids] = 1.0
    grads["tok_emb"] += onehot.T @ dx.reshape(-1, cfg.d_model)
    grads["pos_emb"][:seq] += dx.sum(axis=0)
    return grads


# ---------------------------------------------------------------------------
# loss


def loss(logits, targets, loss_mask) -> float:
    """Mean negative log-likelihood in nats over masked positions."""
    value, _ = loss_and_grad(logits, targets, loss_mask, want_grad=False)
    return value


def loss_and_grad(logits, targets, loss_mask, want_grad: bool = True):
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(loss_mask, dtype=bool)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ValidationError("logits/targets/loss_mask shapes disagree")
    n = int(mask.sum())
    if n == 0:
        raise ValidationError("loss_mask selects no positions")

    vocab = logits.shape[-1]
    flat = logits.reshape(-1, vocab)[mask.reshape(-1)].astype(np.float64)
    tgt = targets.reshape(-1)[mask.reshape(-1)]
    if tgt.min() < 0 or tgt.max() >= vocab:
        raise ValidationError("target id out of range")
    m = flat.max(axis=1, keepdims=True)
    log_z = m[:, 0] + np.log(np.exp(flat - m).sum(axis=1))
    nll = log_z - flat[np.arange(n), tgt]
    value = float(nll.mean())

    if not want_grad:
        return value, None
    probs = np.exp(flat - log_z[:, None])
    probs[np.arange(n), tgt] -= 1.0
    probs /= n
    dlogits = np.zeros_like(logits)
    dflat = dlogits.reshape(-1, vocab)
    dflat[mask.reshape(-1)] = probs.astype(logits.dtype)
    return value, dlogits


# ---------------------------------------------------------------------------
# low-rank adapters


@dataclass
class LowRankAdapter:
    """Additive low-rank update for one weight: W_eff = W + scaling * A @ B."""

    a: np.ndarray
    b: np.ndarray
    scaling: float


class AdapterSet:
    """Adapters for the attention query/value maps (the default targets)."""

    def __init__(self, rank: int, entries: dict):
        self.rank = rank
        self.entries = entries

    @property
    def tensor_names(self):
        names = []
        for key in sorted(self.entries):
            names.extend([f"{key}::a", f"{key}::b"])
        return names

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for key in sorted(self.entries):
            ad = self.entries[key]
            h.update(key.encode())
            h.update(np.ascontiguousarray(ad.a).tobytes())
            h.update(np.ascontiguousarray(ad.b).tobytes())
        return h.hexdigest()[:16]


def init_adapters(params: ModelParams, rank: int, seed: int = 0,
                  targets=("wq", "wv")) -> AdapterSet:
    """Standard init: A ~ N(0, 1/sqrt(d)), B = 0, scaling = 2 (alpha = 2r),
    so the initial update is exactly zero."""
    if rank < 1:
        raise ValidationError("adapter rank must be >= 1")
    cfg = params.config
    rng = np.random.default_rng(seed)
    dtype = params.dtype
    entries = {}
    for l in range(cfg.n_layers):
        for tgt in targets:
            name = f"layers.{l}.attn.{tgt}"
            d_in, d_out = params.tensors[name].shape
            entries[name] = LowRankAdapter(
                a=rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, rank)).astype(dtype),
                b=np.zeros((rank, d_out), dtype=dtype),
                scaling=2.0,
            )
    return AdapterSet(rank, entries)


def effective_params(params: ModelParams, adapters: AdapterSet) -> ModelParams:
    """Params with adapter deltas applied on the fly (base left untouched)."""
    eff = ModelParams(params.config, dict(params.tensors),
                      list(params.merged_adapter_ids))
    for name, ad in adapters.entries.items():
        eff.tensors[name] = params.tensors[name] + ad.scaling * (ad.a @ ad.b)
    return eff


def adapter_merge(params: ModelParams, adapters: AdapterSet) -> ModelParams:
    """Fold adapters into the base weights.

    Rejects a repeated merge of the same adapter contents: merging twice
    would double the update, so the merged-id list is checked first.
    """
    fp = adapters.fingerprint()
    if fp in params.merged_adapter_ids:
        raise AdapterMergeError(f"adapters {fp} already merged into these weights")
    merged = params.copy()
    for name, ad in adapters.entries.items():
        if name not in merged.tensors:
            raise AdapterMergeError(f"no base weight named {name}")
        base = merged.tensors[name]
        if ad.a.shape[0] != base.shape[0] or ad.b.shape[1] != base.shape[1] \
                or ad.a.shape[1] != ad.b.shape[0]:
            raise AdapterMergeError(f"rank/shape mismatch for {name}")
        merged.tensors[name] = base + (ad.scaling * (ad.a @ ad.b)).astype(base.dtype)
    merged.merged_adapter_ids.append(fp)
    return merged


# ---------------------------------------------------------------------------
# attention export and checkpoints


def export_attention(params: ModelParams, token_ids, path,
                     mask_mode: str = "causal"):
    """Dump per-layer/head attention matrices as structured text.

    Values are written as float64 decimals, so the file round-trips to the
    exact arrays the forward pass produced.
    """
    result = forward(params, token_ids, mask_mode)
    atts = result.attentions
    payload = {
        "version": 1,
        "mask_mode": mask_mode,
        "n_layers": len(atts),
        "n_heads": int(atts[0].shape[0]),
        "seq_len": int(atts[0].shape[-1]),
        "attention": [np.asarray(a, dtype=np.float64).tolist() for a in atts],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, separators=(",", ":"))
        fh.write("\n")
    return result


def load_attention(path):
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return [np.asarray(a, dtype=np.float64) for a in payload["attention"]]


_CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ModelParams, meta: dict | None = None):
    """Versioned binary dump of all tensors with shape metadata and config."""
    info = {
        "format_version": _CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "dtype": str(params.dtype),
        "merged_adapter_ids": list(params.merged_adapter_ids),
        "meta": meta or {},
    }
    blob = np.frombuffer(json.dumps(info).encode(), dtype=np.uint8)
    np.savez(path, __meta__=blob, **params.tensors)


def load_checkpoint(path):
    with np.load(path) as archive:
        info = json.loads(bytes(archive["__meta__"]).decode())
        if info["format_version"] != _CHECKPOINT_VERSION:
            raise ValidationError(
                f"unsupported checkpoint version {info['format_version']}")
        cfg = ModelConfig(**info["config"])
        tensors = {}
        for name, shape in _param_shapes(cfg).items():
            arr = archive[name]
            if arr.shape != shape:
                raise ValidationError(f"checkpoint tensor {name} has shape "
                                      f"{arr.shape}, expected {shape}")
            tensors[name] = arr
    params = ModelParams(cfg, tensors, list(info["merged_adapter_ids"]))
    return params, info["meta"]
