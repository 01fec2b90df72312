"""Encoder kernel backends.

Two interchangeable implementations of the per-layer forward/backward pass:

* ``reference`` — pure numpy, always available, the correctness baseline.
* ``fast`` — Cython extension (``_fast``), built by setup.py when a compiler
  is present; typically several times quicker on desk-scale shapes.

The active backend is chosen at import time: the compiled module when it
imports cleanly, otherwise the reference. Set ``PROMPTSTREAM_KERNELS`` to
``reference`` or ``fast`` to force one (forcing ``fast`` without the
extension built raises at import). Caches returned by one backend's
``layer_forward`` are only valid for the same backend's ``layer_backward``.
"""

import os

from . import reference
from .reference import (  # noqa: F401  (re-exported: shared by both backends)
    LAYER_KEYS,
    LN_EPS,
    gelu,
    gelu_grad,
    layer_norm,
    layer_norm_backward,
)

try:
    from . import _fast
    FAST_AVAILABLE = True
except ImportError:
    _fast = None
    FAST_AVAILABLE = False

_requested = os.environ.get("PROMPTSTREAM_KERNELS", "auto")
if _requested == "reference":
    _active = reference
elif _requested == "fast":
    if not FAST_AVAILABLE:
        raise ImportError(
            "PROMPTSTREAM_KERNELS=fast but the compiled extension is not built; "
            "run `pip install -e . --no-build-isolation` or `python setup.py build_ext --inplace`"
        )
    _active = _fast
elif _requested == "auto":
    _active = _fast if FAST_AVAILABLE else reference
else:
    raise ImportError(
        f"PROMPTSTREAM_KERNELS must be 'auto', 'reference' or 'fast', got {_requested!r}"
    )

BACKEND_NAME = _active.BACKEND_NAME
layer_forward = _active.layer_forward
layer_backward = _active.layer_backward


def available_backends():
    """Names and modules of the importable backends."""
    out = {"reference": reference}
    if FAST_AVAILABLE:
        out["fast"] = _fast
    return out
