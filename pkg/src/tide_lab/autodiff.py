"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Only the operations the transformer needs are provided, and shapes are
explicit: elementwise ops require identical shapes, there is no general
broadcasting. Every op records a :class:`Node` on its output; ``backward``
orders the reachable nodes into a :class:`ComputationTape` and replays it in
reverse.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "Node",
    "ComputationTape",
    "no_grad",
    "grad_enabled",
    "backward",
    "build_tape",
    "matmul",
    "add",
    "mul",
    "scale",
    "transpose",
    "reshape",
    "tsum",
    "rmsnorm",
    "softmax_lastdim",
    "masked_fill",
    "silu",
    "embedding_lookup",
    "cross_entropy_with_zloss",
    "rope_apply",
    "stack",
    "route_mix",
    "numerical_grad",
    "max_relative_error",
]

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tensor:
    """An n-d float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if not (isinstance(data, np.ndarray) and data.dtype == np.float64):
            data = np.array(data, dtype=np.float64)
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def _result(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward_fn)
    return out


# -- graph traversal ---------------------------------------------------------


@dataclass
class ComputationTape:
    """Nodes reachable from a root, in an order where inputs precede users."""

    tensors: list[Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tensors)


def build_tape(root: Tensor) -> ComputationTape:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return ComputationTape(order)


def backward(loss: Tensor) -> ComputationTape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The graph hanging off ``loss`` is released afterwards.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise DimensionError("loss does not depend on any tensor requiring grad")
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for t in reversed(tape.tensors):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        in_grads = t.node.backward_fn(g)
        for parent, pg in zip(t.node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for t in tape.tensors:
        t.node = None
    return tape


# -- shape helpers -----------------------------------------------------------


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- operations --------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-d (shared weight) or has the same leading batch axes
    as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims {a.shape} x {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims {a.shape} x {b.shape}")
    A, B = a.data, b.data
    out = A @ B

    def bw(g):
        ga = g @ np.swapaxes(B, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if B.ndim == 2:
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _result(out, (a, b), "matmul", bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), "add", lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return _result(A * B, (a, b), "mul", lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), "scale", lambda g: (g * c,))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), "transpose", lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.asarray(a.data.sum()), (a,), "sum", lambda g: (np.full(shape, float(g)),))


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """y = gain * x / sqrt(mean(x^2) + eps) over the last axis."""
    if gain.ndim != 1 or gain.shape[0] != x.shape[-1]:
        raise DimensionError(f"rmsnorm: gain {gain.shape} vs input {x.shape}")
    if eps < 0:
        raise NumericError("rmsnorm eps must be non-negative")
    X = x.data
    if not np.isfinite(X).all():
        raise NumericError("rmsnorm received non-finite input")
    n = X.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(X * X, axis=-1, keepdims=True) + eps)
    xhat = X * inv
    G = gain.data
    out = xhat * G

    def bw(g):
        gx = None
        if x.requires_grad:
            u = g * G
            gx = inv * (u - xhat * (np.sum(u * xhat, axis=-1, keepdims=True) / n))
        gg = np.sum((g * xhat).reshape(-1, n), axis=0) if gain.requires_grad else None
        return gx, gg

    return _result(out, (x, gain), "rmsnorm", bw)


def softmax_lastdim(x: Tensor) -> Tensor:
    X = x.data
    e = np.exp(X - X.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _result(y, (x,), "softmax", bw)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true; ``mask`` broadcasts to ``x``."""
    mask = np.broadcast_to(mask, x.shape)
    out = np.where(mask, value, x.data)
    return _result(out, (x,), "masked_fill", lambda g: (np.where(mask, 0.0, g),))


def silu(x: Tensor) -> Tensor:
    X = x.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * X))
    out = X * sig
    return _result(out, (x,), "silu", lambda g: (g * (sig * (1.0 + X * (1.0 - sig))),))


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; backward scatters into looked-up rows only."""
    ids = np.asarray(ids)
    if ids.size and (ids.dtype.kind not in "iu"):
        raise IndexError("token ids must be integers")
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        bad = ids[(ids < 0) | (ids >= V)].ravel()[0]
        raise IndexError(f"token id {int(bad)} outside [0, {V})")
    out = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(out, (table,), "embedding", bw)


def cross_entropy_with_zloss(logits: Tensor, targets, z_coeff: float = 0.0) -> Tensor:
    """Mean token cross-entropy plus ``z_coeff * mean(logsumexp(logits)^2)``."""
    targets = np.asarray(targets)
    Z = logits.data
    V = Z.shape[-1]
    if targets.shape != Z.shape[:-1]:
        raise DimensionError(f"targets {targets.shape} vs logits {Z.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target id outside [0, {V})")
    flat = Z.reshape(-1, V)
    t = targets.ravel()
    n = flat.shape[0]
    mx = flat.max(axis=1, keepdims=True)
    e = np.exp(flat - mx)
    s = e.sum(axis=1, keepdims=True)
    lse = (mx + np.log(s))[:, 0]
    picked = flat[np.arange(n), t]
    loss = np.mean(lse - picked) + z_coeff * np.mean(lse * lse)

    def bw(g):
        p = e / s
        coef = (1.0 + 2.0 * z_coeff * lse)[:, None]
        d = p * coef
        d[np.arange(n), t] -= 1.0
        return ((float(g) / n) * d.reshape(Z.shape),)

    return _result(np.asarray(loss), (logits,), "cross_entropy", bw)


def per_token_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Plain per-position cross-entropy on raw arrays (no graph)."""
    V = logits.shape[-1]
    flat = logits.reshape(-1, V)
    t = np.asarray(targets).ravel()
    mx = flat.max(axis=1, keepdims=True)
    lse = (mx + np.log(np.exp(flat - mx).sum(axis=1, keepdims=True)))[:, 0]
    return (lse - flat[np.arange(flat.shape[0]), t]).reshape(np.shape(targets))


def rope_tables(positions, head_dim: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    if head_dim % 2:
        raise ConfigError(f"rotary embedding needs an even head dim, got {head_dim}")
    pos = np.asarray(positions, dtype=np.float64)
    freqs = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = pos[:, None] * freqs[None, :]
    return np.cos(ang), np.sin(ang)


def rope_apply(x: Tensor, positions, theta: float = 10000.0) -> Tensor:
    """Rotate interleaved pairs (x[2i], x[2i+1]) by pos * theta^(-2i/d_head).

    ``x`` has shape (..., T, d_head) and ``positions`` has length T.
    """
    cos, sin = rope_tables(positions, x.shape[-1], theta)
    if cos.shape[0] != x.shape[-2]:
        raise DimensionError(f"rope: {len(cos)} positions for sequence axis {x.shape[-2]}")
    X = x.data
    x0, x1 = X[..., 0::2], X[..., 1::2]
    out = np.empty_like(X)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos

    def bw(g):
        g0, g1 = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g0 * cos + g1 * sin
        gx[..., 1::2] = -g0 * sin + g1 * cos
        return (gx,)

    return _result(out, (x,), "rope", bw)


def stack(tensors: Sequence[Tensor], axis: int) -> Tensor:
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: mismatched shapes {shapes}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tuple(tensors), "stack", bw)


def route_mix(alpha: Tensor, memory: Tensor) -> Tensor:
    """Convex mix of memory slots: out = sum_{k<K} alpha[..., k] * memory[..., k, :].

    ``alpha`` has K+1 slots; the last one is the null bank and is never read,
    so it contributes exactly zero.
    """
    K = memory.shape[-2]
    if alpha.shape[-1] != K + 1 or alpha.shape[:-1] != memory.shape[:-2]:
        raise DimensionError(f"route_mix: alpha {alpha.shape} vs memory {memory.shape}")
    A = alpha.data[..., :K]
    M = memory.data
    out = np.einsum("...k,...kd->...d", A, M)

    def bw(g):
        ga = None
        if alpha.requires_grad:
            ga = np.zeros_like(alpha.data)
            ga[..., :K] = np.einsum("...d,...kd->...k", g, M)
        gm = A[..., :, None] * g[..., None, :] if memory.requires_grad else None
        return ga, gm

    return _result(out, (alpha, memory), "route_mix", bw)


# -- finite differences ------------------------------------------------------


def numerical_grad(fn: Callable[[], float], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``fn`` w.r.t. every entry of ``param``."""
    g = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return g


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor), elementwise.

    The floor keeps entries whose true gradient is ~0 from dividing
    finite-difference noise by ~0.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def gradient_check(
    loss_fn: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5
) -> dict[str, float]:
    """Compare backward() against central differences for each param."""
    params = list(params)
    for p in params:
        p.grad = None
    backward(loss_fn())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def value() -> float:
        with no_grad():
            return float(loss_fn().data)

    report = {}
    for i, (p, a) in enumerate(zip(params, analytic)):
        key = p.name or f"param{i}"
        report[key] = max_relative_error(a, numerical_grad(value, p, step))
    return report
