"""Hot-loop kernel selection: compiled extension when importable, numpy otherwise.

Set ``RBAL_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

import numpy as np

from . import _fallback

BACKEND = "numpy"
_impl = _fallback
if os.environ.get("RBAL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        _impl = _fallback


def fs_pointwise(Zh, dZh):
    """Dispatch to the selected implementation (see ``_fallback.fs_pointwise``)."""
    return _impl.fs_pointwise(np.ascontiguousarray(Zh, dtype=np.complex128),
                              np.ascontiguousarray(dZh, dtype=np.complex128))


def moment_sum(Zh, c):
    """Dispatch to the selected implementation (see ``_fallback.moment_sum``)."""
    return _impl.moment_sum(np.ascontiguousarray(Zh, dtype=np.complex128),
                            np.ascontiguousarray(c, dtype=np.float64))
