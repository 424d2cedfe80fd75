"""Finite-difference verification of every primitive's analytic gradient.

All checks run in 64-bit mode. Evaluation points are sampled away from
non-differentiable kinks (|x| > 1e-2 for relu / leaky_relu), and the
scalar objective is a fixed random projection of the primitive output
so that gradients are not trivially uniform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from . import tensor as T

DEFAULT_TOL = 1e-4
DEFAULT_POINTS = 10


@dataclass
class GradReport:
    tolerance: float
    max_rel_err: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self):
        return all(e <= self.tolerance for e in self.max_rel_err.values())

    def failing(self):
        return {k: v for k, v in self.max_rel_err.items() if v > self.tolerance}

    def lines(self):
        out = []
        for kind in sorted(self.max_rel_err):
            err = self.max_rel_err[kind]
            status = "ok" if err <= self.tolerance else "FAIL"
            out.append(f"{kind:32s} max_rel_err={err:.3e}  {status}")
        return out


def rel_err(analytic, numeric):
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_grad(f, arrays, h=1e-5):
    """Central-difference gradients of scalar f w.r.t. each array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def check_op(build, rng, h=1e-5):
    """Compare analytic and numeric grads for one op instance.

    ``build(rng)`` returns (forward, arrays): ``arrays`` are float64
    NumPy arrays to differentiate and ``forward(tensors) -> Tensor``.
    """
    forward, arrays = build(rng)
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = forward(tensors)
    proj = T.Tensor(rng.standard_normal(out.shape).astype(np.float64))
    loss = T.tsum(T.mul(out, proj)) if out.data.ndim else T.mul(out, proj)

    T.backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def f():
        fresh = [T.Tensor(a) for a in arrays]
        o = forward(fresh)
        return float(np.sum(o.data * proj.data))

    numeric = numeric_grad(f, arrays, h=h)
    return max(rel_err(a, n) for a, n in zip(analytic, numeric))


def _away_from_kink(rng, shape, margin=0.05):
    return (rng.uniform(margin, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)).astype(
        np.float64
    )


def _builders():
    def matmul(rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        return (lambda ts: T.matmul(ts[0], ts[1])), [a, b]

    def add(rng):
        return (lambda ts: T.add(ts[0], ts[1])), [
            rng.standard_normal((3, 4)),
            rng.standard_normal((4,)),
        ]

    def mul(rng):
        return (lambda ts: T.mul(ts[0], ts[1])), [
            rng.standard_normal((3, 4)),
            rng.standard_normal((3, 4)),
        ]

    def concat(rng):
        return (lambda ts: T.concat(ts, axis=1)), [
            rng.standard_normal((2, 3)),
            rng.standard_normal((2, 2)),
        ]

    def flatten(rng):
        return (lambda ts: T.flatten(ts[0])), [rng.standard_normal((3, 4))]

    def relu(rng):
        return (lambda ts: T.relu(ts[0])), [_away_from_kink(rng, (3, 4))]

    def leaky_relu(rng):
        return (lambda ts: T.leaky_relu(ts[0], slope=0.2)), [_away_from_kink(rng, (3, 4))]

    def softmax(rng):
        return (lambda ts: T.softmax(ts[0], axis=-1)), [rng.standard_normal((5,))]

    def layer_norm(rng):
        return (lambda ts: T.layer_norm(ts[0], ts[1], ts[2])), [
            rng.standard_normal((3, 6)),
            rng.standard_normal((6,)),
            rng.standard_normal((6,)),
        ]

    def dropout(rng):
        seed = int(rng.integers(1 << 30))

        def fwd(ts):
            return T.dropout(ts[0], 0.3, True, np.random.default_rng(seed))

        return fwd, [rng.standard_normal((4, 5))]

    def linear(rng):
        return (lambda ts: T.linear(ts[0], ts[1], ts[2])), [
            rng.standard_normal((3, 4)),
            rng.standard_normal((4, 2)),
            rng.standard_normal((2,)),
        ]

    def sdpa(rng):
        def fwd(ts):
            return T.scaled_dot_product_attention(ts[0], ts[1], ts[2])

        return fwd, [rng.standard_normal((2, 3, 4)) for _ in range(3)]

    def cross_entropy(rng):
        labels = rng.integers(0, 3, size=4)
        return (lambda ts: T.cross_entropy(ts[0], labels)), [rng.standard_normal((4, 3))]

    def tsum(rng):
        return (lambda ts: T.tsum(ts[0], axis=0)), [rng.standard_normal((3, 4))]

    def tmean(rng):
        return (lambda ts: T.tmean(ts[0])), [rng.standard_normal((3, 4))]

    def square(rng):
        return (lambda ts: T.square(ts[0])), [rng.standard_normal((3, 4))]

    return {
        "matmul": matmul,
        "add": add,
        "mul": mul,
        "concat": concat,
        "flatten": flatten,
        "relu": relu,
        "leaky_relu": leaky_relu,
        "softmax": softmax,
        "layer_norm": layer_norm,
        "dropout": dropout,
        "linear": linear,
        "scaled_dot_product_attention": sdpa,
        "cross_entropy": cross_entropy,
        "sum": tsum,
        "mean": tmean,
        "square": square,
    }


def gradcheck(op_set=None, rng=None, tol=DEFAULT_TOL, points=DEFAULT_POINTS):
    """Run finite-difference checks for the requested primitive kinds."""
    builders = _builders()
    if op_set is None:
        op_set = sorted(builders)
    unknown = [k for k in op_set if k not in builders]
    if unknown:
        raise ConfigError(f"gradcheck: unknown primitive kinds {unknown}")
    rng = rng or np.random.default_rng(0)
    report = GradReport(tolerance=tol)
    for kind in op_set:
        worst = 0.0
        for _ in range(points):
            worst = max(worst, check_op(builders[kind], rng))
        report.max_rel_err[kind] = worst
    return report
