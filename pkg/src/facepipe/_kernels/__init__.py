"""Kernel backend selection.

The hot inner loops (valid cross-correlation, max pooling) exist twice: a
compiled Cython extension (``_native``) and a pure-numpy fallback (``_numpy``).
The compiled one is used when it imported cleanly; set ``FACEPIPE_KERNELS`` to
``numpy`` or ``native`` to force a choice (``native`` raises if unavailable).

Both backends implement identical contracts and agree to float rounding;
``benchmarks/bench_kernels.py`` compares their speed.
"""

from __future__ import annotations

import os

from . import _numpy

_choice = os.environ.get("FACEPIPE_KERNELS", "auto")

if _choice == "numpy":
    _impl = _numpy
elif _choice in ("auto", "native"):
    try:
        from . import _native as _impl  # type: ignore[no-redef]
    except ImportError:
        if _choice == "native":
            raise
        _impl = _numpy
else:
    raise ValueError(f"FACEPIPE_KERNELS must be auto|native|numpy, got {_choice!r}")

BACKEND: str = _impl.BACKEND

conv2d_valid = _impl.conv2d_valid
conv2d_valid_input_grad = _impl.conv2d_valid_input_grad
conv2d_valid_weight_grad = _impl.conv2d_valid_weight_grad
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
