"""Per-parameter kernels with a compiled fast path.

The Cython extension ``_ckernels`` is used when it was built; otherwise the
NumPy versions in ``_pykernels`` are used. Setting ``TDVCL_PURE_PYTHON=1``
forces the fallback. ``BACKEND`` names the active implementation.
"""
import os

from . import _pykernels

if os.environ.get("TDVCL_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

softplus = _impl.softplus
sigmoid = _impl.sigmoid
kl_diag = _impl.kl_diag
kl_diag_grad = _impl.kl_diag_grad
adam_update = _impl.adam_update

__all__ = ["BACKEND", "softplus", "sigmoid", "kl_diag", "kl_diag_grad", "adam_update"]
