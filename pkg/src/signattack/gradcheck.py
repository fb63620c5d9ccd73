"""Finite-difference verification of the autodiff operators."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, forward_op, grad, mul, sum_all

# shapes and parameters used to exercise each operator
_CASES = {
    "add": (((2, 3), (2, 3)), {}),
    "scale": (((3, 4),), {"factor": -1.7}),
    "mul": (((2, 5), (2, 5)), {}),
    "square": (((4, 3),), {}),
    "sum": (((3, 3),), {}),
    "constant": (((2, 3),), {"value": 0.5}),
    "reshape": (((2, 6),), {"shape": (3, 4)}),
    "flatten": (((2, 2, 3),), {}),
    "leaky_relu": (((3, 7),), {"slope": 0.01}),
    "dense": (((4, 6), (6, 5), (5,)), {}),
    "conv2d": (((2, 6, 6, 3), (4, 3, 3, 3), (4,)), {"stride": 1, "pad": 1}),
    "conv2d_strided": (((1, 7, 7, 2), (3, 2, 3, 3), (3,)), {"stride": 2, "pad": 0}),
    "max_pool2d": (((2, 4, 4, 3),), {}),
    "softmax_cross_entropy": (((5, 7),), {"labels": [0, 6, 3, 3, 1]}),
}

# piecewise-linear operators get inputs kept away from their kinks/ties
_KINKED = {"leaky_relu", "max_pool2d"}

OP_KINDS = tuple(_CASES)


def _spaced(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Distinct values in [-1, 1], pairwise at least 1/size apart and away from 0."""
    n = int(np.prod(shape))
    grid = np.linspace(0.05, 1.0, n)
    signs = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    return rng.permutation(grid * signs).reshape(shape)


def make_inputs(kind: str, seed: int) -> tuple[list[np.ndarray], dict]:
    shapes, params = _CASES[kind]
    rng = np.random.default_rng(seed)
    if kind in _KINKED:
        arrays = [_spaced(rng, s) for s in shapes]
    else:
        arrays = [rng.uniform(-1.0, 1.0, size=s) for s in shapes]
    return arrays, dict(params)


def grad_check(kind: str, seed: int = 0, step: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    The scalar probed is ``sum(op(inputs) * R)`` for a fixed random ``R``, so
    every output element contributes. Returns
    ``max |analytic - numeric| / max(1e-8, |numeric|)`` over all input elements.
    """
    arrays, params = make_inputs(kind, seed)
    op = "conv2d" if kind.startswith("conv2d") else kind
    rng = np.random.default_rng(seed + 10_000)
    probe_shape = forward_op(op, [Tensor(a) for a in arrays], params).shape
    probe = rng.uniform(-1.0, 1.0, size=probe_shape)

    def objective(vals: list[np.ndarray], requires_grad: bool = False):
        ts = [Tensor(v, requires_grad=requires_grad) for v in vals]
        out = forward_op(op, ts, params)
        return sum_all(mul(out, Tensor(probe))), ts

    loss, ts = objective(arrays, requires_grad=True)
    analytic = grad(loss, ts)

    worst = 0.0
    for k, base in enumerate(arrays):
        flat = base.reshape(-1)
        for i in range(flat.size):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[k].reshape(-1)[i] += step
            minus[k].reshape(-1)[i] -= step
            fp = float(objective(plus)[0].data)
            fm = float(objective(minus)[0].data)
            numeric = (fp - fm) / (2.0 * step)
            a = analytic[k].reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1e-8, abs(numeric)))
    return worst
