"""Kernel backend selection.

Imports the compiled extension when available, otherwise the pure numpy
fallback. Set ``PFRNN_PURE_PYTHON=1`` to force the fallback (used by the
backend-equivalence tests and the benchmark).
"""

import os

if os.environ.get("PFRNN_PURE_PYTHON"):
    from . import pure as _impl
else:
    try:
        from . import _fast as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import pure as _impl

BACKEND = _impl.BACKEND
sigmoid = _impl.sigmoid
sigmoid_grad = _impl.sigmoid_grad
tanh = _impl.tanh
tanh_grad = _impl.tanh_grad
relu = _impl.relu
relu_grad = _impl.relu_grad
scatter_add_rows = _impl.scatter_add_rows
