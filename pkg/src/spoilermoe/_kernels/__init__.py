"""Hot edge kernels with a compiled core and a pure-NumPy fallback.

The compiled Cython extension is preferred when importable; set
``SPOILERMOE_KERNELS=numpy`` to force the fallback (used by the
benchmark and by tests that compare the two backends).
"""

import os

import numpy as np

from . import numpy_ref

_forced = os.environ.get("SPOILERMOE_KERNELS", "auto").lower()

if _forced == "numpy":
    _impl = numpy_ref
    BACKEND = "numpy"
else:
    try:
        from . import _fastk as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        if _forced == "cython":
            raise
        _impl = numpy_ref
        BACKEND = "numpy"


def _as_index(idx):
    return np.ascontiguousarray(idx, dtype=np.int64)


def scatter_add_rows(out, idx, src):
    """out[idx[e], :] += src[e, :] for every edge e, in edge order."""
    _impl.scatter_add_rows(out, _as_index(idx), np.ascontiguousarray(src))


def scatter_add_1d(out, idx, src):
    _impl.scatter_add_1d(out, _as_index(idx), np.ascontiguousarray(src))


def segment_softmax(scores, seg, n_segments):
    """Per-segment softmax of a flat score vector."""
    return _impl.segment_softmax(
        np.ascontiguousarray(scores), _as_index(seg), n_segments
    )


def segment_softmax_grad(alpha, grad, seg, n_segments):
    return _impl.segment_softmax_grad(
        np.ascontiguousarray(alpha), np.ascontiguousarray(grad), _as_index(seg), n_segments
    )
