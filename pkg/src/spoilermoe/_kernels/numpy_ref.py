"""Pure-NumPy reference implementations of the hot edge kernels.

These are the fallback when the compiled extension is unavailable. They
are exact (same accumulation order as the compiled loops: edge index
order) but lean on ``np.ufunc.at``, which is markedly slower than the
Cython path on large edge sets.
"""

import numpy as np


def scatter_add_rows(out, idx, src):
    """out[idx[e], :] += src[e, :] in edge order."""
    np.add.at(out, idx, src)


def scatter_add_1d(out, idx, src):
    """out[idx[e]] += src[e] in edge order."""
    np.add.at(out, idx, src)


def segment_softmax(scores, seg, n_segments):
    """Softmax of 1-D ``scores`` grouped by ``seg`` (not necessarily sorted).

    Segments with no members are never indexed and contribute nothing.
    """
    mx = np.full(n_segments, -np.inf, dtype=scores.dtype)
    np.maximum.at(mx, seg, scores)
    ex = np.exp(scores - mx[seg])
    denom = np.zeros(n_segments, dtype=scores.dtype)
    np.add.at(denom, seg, ex)
    return ex / denom[seg]


def segment_softmax_grad(alpha, grad, seg, n_segments):
    """Backward of segment_softmax: alpha * (grad - <alpha, grad>_segment)."""
    dot = np.zeros(n_segments, dtype=alpha.dtype)
    np.add.at(dot, seg, alpha * grad)
    return alpha * (grad - dot[seg])
