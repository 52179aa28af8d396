"""Backend selection for the batched density kernels.

The compiled extension ``seqlap._ckernels`` is used when importable; the
numpy implementation in ``seqlap._pykernels`` is the fallback. Setting the
environment variable ``SEQLAP_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _pykernels

if os.environ.get("SEQLAP_PURE_PYTHON"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

component_logpdf = _impl.component_logpdf
mixture_logpdf = _impl.mixture_logpdf
predictive_logpdf_scalar = _impl.predictive_logpdf_scalar


def available_backends():
    """Map of backend name to kernel module for every importable backend."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
