"""Reverse-mode automatic differentiation over a small set of array operators.

Every operator takes and returns :class:`Tensor` objects wrapping float64
numpy arrays. When any input requires a gradient, the output remembers its
parents and a closure that maps the output gradient to input gradients.
Calling :func:`backward` (or :func:`grad`) on a scalar walks that graph in
reverse topological order.

Images inside the engine are laid out NHWC. Shapes are explicit: the only
broadcasting is the per-channel / per-unit bias add inside ``conv2d`` and
``dense``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operator inputs do not satisfy the operator's shape rule."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        op = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{op})"


def _result(data: np.ndarray, parents: Sequence[Tensor], kind: str, backward_fn) -> Tensor:
    out = Tensor(data)
    out.op = kind
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Graph bookkeeping


@dataclass
class Node:
    kind: str
    parents: tuple[int, ...]
    output: int


@dataclass
class CompGraph:
    """Acyclic record of the operators that produced a scalar loss.

    ``nodes`` is in topological order: each parent index precedes its child.
    ``tensors[i]`` is the tensor produced (or supplied, for leaves) at index i.
    """

    tensors: list[Tensor] = field(default_factory=list)
    nodes: list[Node] = field(default_factory=list)

    @property
    def loss(self) -> Tensor:
        return self.tensors[-1]


def trace(loss: Tensor) -> CompGraph:
    """Collect the subgraph feeding ``loss`` in topological order."""
    order: list[Tensor] = []
    index: dict[int, int] = {}
    # iterative post-order DFS; models can be deep enough to hit the recursion limit
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    seen: set[int] = set()
    while stack:
        t, expanded = stack.pop()
        if expanded:
            index[id(t)] = len(order)
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in reversed(t._parents):
            if id(p) not in seen:
                stack.append((p, False))
    graph = CompGraph(tensors=order)
    for i, t in enumerate(order):
        graph.nodes.append(
            Node(t.op or "leaf", tuple(index[id(p)] for p in t._parents), i)
        )
    return graph


def _check_scalar(loss: Tensor) -> None:
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")


def _propagate(loss: Tensor) -> tuple[CompGraph, dict[int, np.ndarray]]:
    graph = trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(graph.tensors):
        g = grads.get(id(t))
        if g is None or t._backward is None:
            continue
        parent_grads = t._backward(g)
        for p, pg in zip(t._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return graph, grads


def backward(loss: Tensor) -> CompGraph:
    """Populate ``.grad`` on every tensor in ``loss``'s graph that requires it.

    Gradients are assigned, not accumulated, so repeated calls are idempotent.
    """
    _check_scalar(loss)
    if not loss.requires_grad:
        raise RuntimeError(
            "backward called before any forward op: the loss does not depend "
            "on a tensor that requires grad"
        )
    graph, grads = _propagate(loss)
    for t in graph.tensors:
        if t.requires_grad:
            t.grad = grads.get(id(t), np.zeros_like(t.data)).reshape(t.shape)
    return graph


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Return d(loss)/d(t) for each ``t`` in ``wrt``.

    Tensors the loss does not depend on get an exact zero array.
    """
    _check_scalar(loss)
    if not loss.requires_grad:
        return [np.zeros_like(t.data) for t in wrt]
    _, grads = _propagate(loss)
    return [grads.get(id(t), np.zeros_like(t.data)).reshape(t.shape) for t in wrt]


# ---------------------------------------------------------------------------
# Operators


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, (a, b), "add", lambda g: (g, g))


def scale(x: Tensor, factor: float) -> Tensor:
    x = _as_tensor(x)
    factor = float(factor)
    return _result(x.data * factor, (x,), "scale", lambda g: (g * factor,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _result(a.data * b.data, (a, b), "mul", lambda g: (g * b.data, g * a.data))


def square(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return _result(x.data * x.data, (x,), "square", lambda g: (2.0 * x.data * g,))


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return _result(
        np.asarray(x.data.sum()), (x,), "sum", lambda g: (np.full_like(x.data, g),)
    )


def constant(x: Tensor, value: float = 0.0) -> Tensor:
    """Output ``value`` with the input's shape; the gradient is identically 0."""
    x = _as_tensor(x)
    return _result(
        np.full_like(x.data, value), (x,), "constant", lambda g: (np.zeros_like(x.data),)
    )


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return _result(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    """(N, ...) -> (N, prod(...))."""
    x = _as_tensor(x)
    if x.data.ndim < 2:
        raise ShapeError(f"flatten: expected a batch of arrays, got shape {x.shape}")
    return reshape(x, (x.shape[0], -1))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    x = _as_tensor(x)
    # exact 0 takes the positive branch
    local = np.where(x.data >= 0, 1.0, slope)
    return _result(x.data * local, (x,), "leaky_relu", lambda g: (g * local,))


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map: (N, D) @ (D, M) + (M,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"dense: bias {b.shape} must be ({w.shape[1]},)")

    def _back(g):
        return (
            g @ w.data.T if x.requires_grad else None,
            x.data.T @ g if w.requires_grad else None,
            g.sum(axis=0) if b.requires_grad else None,
        )

    return _result(x.data @ w.data + b.data, (x, w, b), "dense", _back)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation. x: (N, H, W, C), w: (F, C, kh, kw), b: (F,).

    Output is (N, Ho, Wo, F) with Ho = (H + 2*pad - kh) // stride + 1.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    n, h, wd, c = x.shape
    f, kc, kh, kw = w.shape
    if kc != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {kc}")
    if b.shape != (f,):
        raise ShapeError(f"conv2d: bias {b.shape} must be ({f},)")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: bad stride {stride} / pad {pad}")
    hp, wp = h + 2 * pad, wd + 2 * pad
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    # im2col: rows are output pixels, columns run over (C, kh, kw)
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = windows.reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(f, -1)
    out = (cols @ wmat.T + b.data).reshape(n, ho, wo, f)

    def _back(g):
        g2 = g.reshape(-1, f)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros((n, hp, wp, c), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[..., i, j]
            gx = gxp[:, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw, gb

    return _result(out, (x, w, b), "conv2d", _back)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max-pool with stride 2 over (N, H, W, C).

    Ties route the gradient to the first maximal element in row-major
    window order.
    """
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d: expected (N, H, W, C), got {x.shape}")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2d: spatial dims {h}x{w} must be even")
    corners = [x.data[:, i::2, j::2] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))

    def _back(g):
        masks = []
        taken = np.zeros(out.shape, dtype=bool)
        for part in corners:
            m = (part == out) & ~taken
            taken |= m
            masks.append(m)
        gx = np.zeros_like(x.data)
        for (i, j), m in zip(((0, 0), (0, 1), (1, 0), (1, 1)), masks):
            gx[:, i::2, j::2] = g * m
        return (gx,)

    return _result(out, (x,), "max_pool2d", _back)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a plain array (no graph)."""
    z = np.asarray(logits, dtype=DTYPE)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Fused softmax + cross-entropy. logits: (N, K); labels: N class indices.

    ``reduction`` is "mean" or "sum" over the batch.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {k})")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    losses = logsum - z[np.arange(n), labels]
    norm = float(n) if reduction == "mean" else 1.0
    probs = softmax(logits.data)

    def _back(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (float(g) / norm),)

    return _result(np.asarray(losses.sum() / norm), (logits,), "softmax_cross_entropy", _back)


OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "scale": scale,
    "mul": mul,
    "square": square,
    "sum": sum_all,
    "constant": constant,
    "reshape": reshape,
    "flatten": flatten,
    "leaky_relu": leaky_relu,
    "dense": dense,
    "conv2d": conv2d,
    "max_pool2d": max_pool2d,
    "softmax_cross_entropy": softmax_cross_entropy,
}


def forward_op(kind: str, inputs: Sequence[Tensor], params: dict | None = None) -> Tensor:
    """Apply the operator named ``kind`` to ``inputs`` with keyword ``params``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown operator {kind!r}; known: {sorted(OPS)}") from None
    return fn(*inputs, **(params or {}))
