"""Compositing kernels with a compiled core and a numpy fallback.

The compiled extension is used when it imports.  Set ``OCSPLAT_BACKEND`` to
``python`` to force the fallback or to ``cython`` to fail loudly when the
extension is missing.
"""

import os

from . import _pycomposite

python_backend = _pycomposite

try:
    from . import _ccomposite as cython_backend
except ImportError:  # extension not built
    cython_backend = None

_choice = os.environ.get("OCSPLAT_BACKEND", "auto").lower()
if _choice == "python":
    backend = python_backend
elif _choice == "cython":
    if cython_backend is None:
        raise ImportError("OCSPLAT_BACKEND=cython but ocsplat.kernels._ccomposite is not built")
    backend = cython_backend
elif _choice == "auto":
    backend = cython_backend if cython_backend is not None else python_backend
else:
    raise ImportError(f"unknown OCSPLAT_BACKEND {_choice!r}")

BACKEND_NAME = "cython" if backend is cython_backend and cython_backend is not None else "python"

composite_forward = backend.composite_forward
composite_backward = backend.composite_backward
splat_weights = backend.splat_weights

__all__ = [
    "BACKEND_NAME",
    "composite_backward",
    "composite_forward",
    "cython_backend",
    "python_backend",
    "splat_weights",
]
