"""Kernel backend selection.

At import time the compiled extension (nep._ckernels, built from Cython) is
preferred; the numpy fallback in nep.kernels is used when it is missing.
Override with NEP_BACKEND=python|native|auto. `native` raises if the
extension is absent so CI can assert the build worked.

benchmarks/bench_kernels.py compares the two implementations head to head.
"""

import os

from nep import kernels as _py
from nep.errors import ConfigError

_choice = os.environ.get("NEP_BACKEND", "auto")
if _choice not in ("auto", "python", "native"):
    raise ConfigError(f"NEP_BACKEND must be auto|python|native, got {_choice!r}")

_impl = _py
if _choice in ("auto", "native"):
    try:
        from nep import _ckernels as _impl  # type: ignore[no-redef]
    except ImportError:
        if _choice == "native":
            raise ConfigError("NEP_BACKEND=native but nep._ckernels is not built")
        _impl = _py


def backend_name():
    return _impl.NAME


masked_softmax = _impl.masked_softmax
attn_softmax_grad = _impl.attn_softmax_grad
markov_walk = _impl.markov_walk
concordance_counts = _impl.concordance_counts
gelu_fwd = _impl.gelu_fwd
layer_norm_fwd = _impl.layer_norm_fwd
