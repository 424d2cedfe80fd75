"""Reverse-mode differentiable tensors over NumPy arrays.

A ``Tensor`` wraps a NumPy array plus an optional gradient slot. Every
operation records a tape node (parents + a backward closure) on its
output whenever some input requires gradients; ``backward`` walks the
recorded graph in reverse topological order and accumulates into the
``grad`` slot of every reachable tensor that requires gradients.

Gradients accumulate across calls until explicitly zeroed.

The public primitive surface is the closed set dispatched by
``primitive_forward``. A handful of extra internal ops (reshape,
transpose, gather/segment ops, div, maximum, softplus) exist because
the model needs them; they ride the same tape machinery and are covered
by the module-level gradient checks.
"""

from __future__ import annotations

import numpy as np

from .. import _kernels
from ..errors import ConfigError, ContractError, ShapeError

DEFAULT_DTYPE = np.float32


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "param_id", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, param_id=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.param_id = param_id
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", param_id={self.param_id!r}" if self.param_id else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, _wrap(other))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return mul(self, Tensor(np.array(-1.0, dtype=self.dtype)))

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def backward(self):
        backward(self)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out, parents, backward_fn):
    """Attach a tape node to ``out`` if any parent participates in the graph."""
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss):
    """Populate ``grad`` of every reachable requires_grad tensor with d(loss)/d(tensor)."""
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.data.shape}")
    # iterative topological order (graphs can be deep; avoid recursion limits)
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad += g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            acc = grads.get(id(p))
            # out-of-place: backward closures may hand out views (or the
            # same array to two parents); never mutate what they return
            grads[id(p)] = pg if acc is None else acc + pg


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (invert NumPy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a, b):
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _record(out, (a, b), bwd)


def add(a, b):
    out = Tensor(a.data + b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def mul(a, b):
    out = Tensor(a.data * b.data)

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _record(out, (a, b), bwd)


def div(a, b):
    out = Tensor(a.data / b.data)

    def bwd(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _record(out, (a, b), bwd)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(out, tuple(tensors), bwd)


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.data.shape),))


def flatten(x):
    """Collapse all but the leading axis; 1-D tensors pass through."""
    if x.data.ndim <= 1:
        return reshape(x, x.data.shape)
    return reshape(x, (x.data.shape[0], -1))


def transpose(x, axes):
    inv = np.argsort(axes)
    out = Tensor(np.transpose(x.data, axes))
    return _record(out, (x,), lambda g: (np.transpose(g, inv),))


def relu(x):
    out = Tensor(np.maximum(x.data, 0))
    return _record(out, (x,), lambda g: (g * (x.data > 0),))


def leaky_relu(x, slope=0.2):
    out = Tensor(np.where(x.data > 0, x.data, slope * x.data))
    return _record(out, (x,), lambda g: (g * np.where(x.data > 0, 1.0, slope).astype(g.dtype),))


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (x,), bwd)


def layer_norm(x, gain=None, bias=None, eps=1e-5):
    """Normalize the last axis; optional elementwise gain/bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = xhat
    if gain is not None:
        y = y * gain.data
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)
    parents = [x] + ([gain] if gain is not None else []) + ([bias] if bias is not None else [])

    def bwd(g):
        gxhat = g * gain.data if gain is not None else g
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        gx = (gxhat - m1 - xhat * m2) * inv
        grads = [gx.astype(x.data.dtype, copy=False)]
        if gain is not None:
            ggain = (g * xhat).reshape(-1, x.data.shape[-1]).sum(axis=0)
            grads.append(_unbroadcast(ggain, gain.data.shape))
        if bias is not None:
            gbias = g.reshape(-1, x.data.shape[-1]).sum(axis=0)
            grads.append(_unbroadcast(gbias, bias.data.shape))
        return tuple(grads)

    return _record(out, tuple(parents), bwd)


def dropout(x, p, training, rng=None):
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout: an explicit rng stream is required in training mode")
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout: p must be in [0, 1), got {p}")
    mask = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    out = Tensor(x.data * mask)
    return _record(out, (x,), lambda g: (g * mask,))


def linear(x, w, b=None):
    """x @ w (+ b); x is (..., d_in), w is (d_in, d_out), b is (d_out,)."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape} does not match weight {w.shape}")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    out = Tensor(y)
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gx = g @ w.data.T
        g2 = g.reshape(-1, g.shape[-1])
        gw = x.data.reshape(-1, x.data.shape[-1]).T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record(out, parents, bwd)


def scaled_dot_product_attention(q, k, v, mask=None, return_weights=False):
    """softmax(q k^T / sqrt(d)) v over the last two axes.

    ``mask`` is an additive NumPy array broadcastable to the score shape
    (0 to keep, -inf to drop). Composed from recorded primitives, so the
    gradient needs no dedicated adjoint.
    """
    d = q.data.shape[-1]
    scores = matmul(q, transpose(k, tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2)))
    scores = mul(scores, Tensor(np.array(1.0 / np.sqrt(d), dtype=q.dtype)))
    if mask is not None:
        scores = add(scores, Tensor(np.asarray(mask, dtype=scores.dtype)))
    attn = softmax(scores, axis=-1)
    out = matmul(attn, v)
    if return_weights:
        return out, attn
    return out


def cross_entropy(logits, labels):
    """Softmax cross-entropy against integer labels.

    1-D logits with a scalar label give a scalar loss; (B, C) logits with
    (B,) labels give a (B,) per-sample loss vector (callers reduce).
    """
    labels = np.asarray(labels)
    x = logits.data
    if x.ndim == 1:
        x2 = x[None, :]
        lab = labels.reshape(1)
    elif x.ndim == 2:
        x2 = x
        lab = labels
        if lab.shape != (x2.shape[0],):
            raise ShapeError(f"cross_entropy: labels {lab.shape} do not match logits {x.shape}")
    else:
        raise ShapeError(f"cross_entropy: logits must be 1-D or 2-D, got {x.shape}")
    lab = lab.astype(np.int64)
    shifted = x2 - x2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(x2.shape[0])
    losses = -logp[rows, lab]
    probs = np.exp(logp)
    out = Tensor(losses[0] if x.ndim == 1 else losses)

    def bwd(g):
        gv = np.atleast_1d(g)
        dx = probs.copy()
        dx[rows, lab] -= 1.0
        dx *= gv.reshape(-1, 1)
        return (dx.reshape(x.shape).astype(x.dtype, copy=False),)

    return _record(out, (logits,), bwd)


def tsum(x, axis=None):
    out = Tensor(np.sum(x.data, axis=axis))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).astype(x.dtype, copy=False).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy(),)

    return _record(out, (x,), bwd)


def tmean(x, axis=None):
    n = x.data.size if axis is None else x.data.shape[axis]
    out = Tensor(np.mean(x.data, axis=axis))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, x.data.shape).astype(x.dtype, copy=False).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy() / n,)

    return _record(out, (x,), bwd)


def square(x):
    out = Tensor(x.data * x.data)
    return _record(out, (x,), lambda g: (g * 2.0 * x.data,))


def maximum(a, b):
    """Elementwise max; on ties the gradient routes to the first operand."""
    out = Tensor(np.maximum(a.data, b.data))

    def bwd(g):
        take_a = a.data >= b.data
        return (
            _unbroadcast(g * take_a, a.data.shape),
            _unbroadcast(g * ~take_a, b.data.shape),
        )

    return _record(out, (a, b), bwd)


def softplus(x):
    out = Tensor(np.logaddexp(0.0, x.data).astype(x.dtype, copy=False))

    def bwd(g):
        sig = 1.0 / (1.0 + np.exp(-x.data))
        return (g * sig,)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# indexed / segmented ops (graph & MoE routing); backed by the kernels
# ---------------------------------------------------------------------------


def gather_rows(x, idx):
    """Rows x[idx] of a 1-D or 2-D tensor; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(x.data[idx])

    def bwd(g):
        gx = np.zeros_like(x.data)
        if x.data.ndim == 1:
            _kernels.scatter_add_1d(gx, idx, g)
        else:
            _kernels.scatter_add_rows(gx, idx, np.ascontiguousarray(g))
        return (gx,)

    return _record(out, (x,), bwd)


def scatter_rows(x, idx, n_rows):
    """Inverse of gather: out[idx[e]] += x[e] into a fresh (n_rows, ...) tensor."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim == 1:
        acc = np.zeros(n_rows, dtype=x.dtype)
        _kernels.scatter_add_1d(acc, idx, x.data)
    else:
        acc = np.zeros((n_rows,) + x.data.shape[1:], dtype=x.dtype)
        _kernels.scatter_add_rows(acc, idx, np.ascontiguousarray(x.data))
    out = Tensor(acc)
    return _record(out, (x,), lambda g: (g[idx],))


def segment_softmax(scores, seg, n_segments):
    """Per-segment softmax of 1-D scores grouped by ``seg``."""
    seg = np.asarray(seg, dtype=np.int64)
    alpha = _kernels.segment_softmax(scores.data, seg, n_segments)
    out = Tensor(alpha)

    def bwd(g):
        return (_kernels.segment_softmax_grad(alpha, np.ascontiguousarray(g), seg, n_segments),)

    return _record(out, (scores,), bwd)


def slice_axis(x, axis, start, stop):
    """Contiguous slice along one axis; backward zero-pads."""
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = Tensor(x.data[sl])

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# closed primitive dispatch
# ---------------------------------------------------------------------------

PRIMITIVE_KINDS = frozenset(
    {
        "matmul",
        "add",
        "mul",
        "concat",
        "flatten",
        "relu",
        "leaky_relu",
        "softmax",
        "layer_norm",
        "dropout",
        "linear",
        "scaled_dot_product_attention",
        "cross_entropy",
        "sum",
        "mean",
        "square",
    }
)


def primitive_forward(op, inputs, attrs=None):
    """Dispatch one primitive by name over Tensor inputs.

    Raises ConfigError for an unknown kind and ShapeError when operand
    shapes do not conform.
    """
    attrs = attrs or {}
    if op not in PRIMITIVE_KINDS:
        raise ConfigError(f"unknown primitive kind: {op!r}")
    try:
        if op == "matmul":
            return matmul(inputs[0], inputs[1])
        if op == "add":
            return add(inputs[0], inputs[1])
        if op == "mul":
            return mul(inputs[0], inputs[1])
        if op == "concat":
            return concat(inputs, axis=attrs.get("axis", 0))
        if op == "flatten":
            return flatten(inputs[0])
        if op == "relu":
            return relu(inputs[0])
        if op == "leaky_relu":
            return leaky_relu(inputs[0], slope=attrs.get("slope", 0.2))
        if op == "softmax":
            return softmax(inputs[0], axis=attrs.get("axis", -1))
        if op == "layer_norm":
            gain = inputs[1] if len(inputs) > 1 else None
            bias = inputs[2] if len(inputs) > 2 else None
            return layer_norm(inputs[0], gain, bias, eps=attrs.get("eps", 1e-5))
        if op == "dropout":
            return dropout(
                inputs[0],
                attrs.get("p", 0.5),
                attrs.get("training", False),
                attrs.get("rng"),
            )
        if op == "linear":
            return linear(inputs[0], inputs[1], inputs[2] if len(inputs) > 2 else None)
        if op == "scaled_dot_product_attention":
            return scaled_dot_product_attention(
                inputs[0], inputs[1], inputs[2], mask=attrs.get("mask")
            )
        if op == "cross_entropy":
            return cross_entropy(inputs[0], attrs["labels"])
        if op == "sum":
            return tsum(inputs[0], axis=attrs.get("axis"))
        if op == "mean":
            return tmean(inputs[0], axis=attrs.get("axis"))
        if op == "square":
            return square(inputs[0])
    except (ShapeError, ConfigError):
        raise
    except ValueError as exc:
        shapes = [t.shape for t in inputs if isinstance(t, Tensor)]
        raise ShapeError(f"{op}: incompatible shapes {shapes}: {exc}") from exc
    raise ConfigError(f"unknown primitive kind: {op!r}")  # pragma: no cover
