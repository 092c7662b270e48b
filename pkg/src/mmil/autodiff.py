"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op that touches a tensor with ``requires_grad=True`` appends a
:class:`Node` to the active :class:`Tape`.  ``backward(loss)`` replays the
tape in reverse, visiting each node once, and accumulates gradients into
the *leaf* tensors (tensors not produced by a recorded op).  Leaf grads
keep accumulating across calls until :func:`zero_grads` is called.

The tape stack is thread-local; a thread that wants to run inference in
parallel with another must use its own tape (the default already is).
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

DTYPE = np.float64
LAYER_NORM_EPS = 1e-5


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Tape:
    """Ordered record of executed ops."""

    nodes: list[Node] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def clear(self) -> None:
        for node in self.nodes:
            node.output._tape = None
            node.output._index = None
        self.nodes.clear()

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()


class _Local(threading.local):
    def __init__(self) -> None:
        self.stack: list[Tape] = [Tape()]
        self.enabled = True


_local = _Local()


def _stack() -> list[Tape]:
    return _local.stack


def current_tape() -> Tape:
    return _local.stack[-1]


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them (inference, finite differences)."""
    prev = _local.enabled
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_index")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None
        self._index: int | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._tape = None
        t._index = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other) -> "Tensor":
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return add(self, neg(_as_tensor(other)))

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return scale(sum_all(self), 1.0 / self.data.size)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor._wrap(data)
    if _local.enabled and any(t.requires_grad for t in inputs):
        tape = current_tape()
        out.requires_grad = True
        out._tape = tape
        out._index = tape.record(Node(op, inputs, out, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix
    (shared across the batch, e.g. a weight) or has the same batch axes.
    """
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.data.ndim != 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        da = g @ np.swapaxes(B, -1, -2)
        if B.ndim == 2:
            db = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            db = np.swapaxes(A, -1, -2) @ g
        return da, db

    return _emit("matmul", A @ B, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}") from None
    sa, sb = a.shape, b.shape
    return _emit("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}") from None
    A, B = a.data, b.data
    return _emit(
        "mul", out, (a, b), lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape))
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum", np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(old),))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_rows", p, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}/{bias.shape} for input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    G = gain.data

    def backward(g):
        dxhat = g * G
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, c)
        return dx, (flat_g * xhat.reshape(-1, c)).sum(axis=0), flat_g.sum(axis=0)

    return _emit("layer_norm", xhat * G + bias.data, (x, gain, bias), backward)


_GELU_K = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-form GELU."""
    X = x.data
    u = _GELU_K * (X + 0.044715 * X**3)
    t = np.tanh(u)

    def backward(g):
        du = _GELU_K * (1.0 + 3 * 0.044715 * X**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * X * (1.0 - t * t) * du),)

    return _emit("gelu", 0.5 * X * (1.0 + t), (x,), backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ContractError("concat needs at least one part")
    ndim = parts[0].data.ndim
    ax = axis % ndim
    ref = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != ndim or any(i != ax and other[i] != ref[i] for i in range(ndim)):
            raise DimensionError(
                f"concat shape mismatch along axis {axis}: {tuple(ref)} vs {tuple(other)}"
            )
    sizes = [p.shape[ax] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _emit("concat", np.concatenate([p.data for p in parts], axis=ax), tuple(parts), backward)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    ax = axis % x.data.ndim
    index = (slice(None),) * ax + (slice(start, stop),)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[index] = g
        return (full,)

    return _emit("slice", x.data[index], (x,), backward)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    ax = axis % x.data.ndim
    if sum(sizes) != x.shape[ax] or any(s < 0 for s in sizes):
        raise DimensionError(f"split sizes {list(sizes)} do not cover axis of length {x.shape[ax]}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_axis(x, start, start + s, ax))
        start += s
    return out


def concat_tokens(parts: Sequence[Tensor]) -> Tensor:
    """Stack token sets along the token axis (second-to-last)."""
    for p in parts:
        if p.data.ndim < 2:
            raise DimensionError(f"token tensors need shape (..., tokens, C), got {p.shape}")
    widths = {p.shape[-1] for p in parts}
    if len(widths) > 1:
        raise DimensionError(f"channel mismatch in concat_tokens: {[p.shape for p in parts]}")
    return concat(parts, axis=-2)


def split_tokens(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    return split(x, sizes, axis=-2)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """``out[i...] = x[index[i...]]``; index ``-1`` yields a zero row."""
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    if index.size and (index.max() >= n or index.min() < -1):
        raise DimensionError(f"gather index out of range for {n} rows")
    pad = index < 0
    safe = np.where(pad, 0, index)
    out = x.data[safe]
    if pad.any():
        out[pad] = 0.0
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        keep = ~pad
        np.add.at(full, safe[keep], g[keep])
        return (full,)

    return _emit("gather_rows", out, (x,), backward)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, key_mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention split over ``heads``.

    ``q, k, v`` are ``(..., L, C)``.  ``key_mask`` (``(..., L)`` bool) marks
    keys that may be attended; masked keys get logit ``-inf``.
    """
    if not (q.shape == k.shape == v.shape):
        raise DimensionError(f"attention q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    *lead, L, C = q.shape
    if C % heads:
        raise DimensionError(f"channels {C} not divisible by {heads} heads")
    d = C // heads
    inv = 1.0 / math.sqrt(d)

    def heads_first(a):
        return np.moveaxis(a.reshape(*lead, L, heads, d), -2, -3)  # (..., H, L, d)

    Q, K, V = heads_first(q.data), heads_first(k.data), heads_first(v.data)
    s = (Q @ np.swapaxes(K, -1, -2)) * inv
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)
        if km.shape != (*lead, L):
            raise DimensionError(f"key mask shape {km.shape} does not match tokens {(*lead, L)}")
        s = np.where(km[..., None, None, :], s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)
    o = p @ V

    def merge_heads(a):
        return np.moveaxis(a, -3, -2).reshape(*lead, L, C)

    def backward(g):
        G = heads_first(g)
        dv = np.swapaxes(p, -1, -2) @ G
        dp = G @ np.swapaxes(V, -1, -2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * inv
        dq = ds @ K
        dk = np.swapaxes(ds, -1, -2) @ Q
        return merge_heads(dq), merge_heads(dk), merge_heads(dv)

    return _emit("attention", merge_heads(o), (q, k, v), backward)


def softmax_cross_entropy(logits: Tensor, label: int) -> Tensor:
    """``-log softmax(logits)[label]`` for a single logit vector."""
    z = logits.data.reshape(-1)
    shape = logits.shape
    m = z.max()
    lse = m + math.log(np.exp(z - m).sum())
    p = np.exp(z - lse)

    def backward(g):
        d = p.copy()
        d[label] -= 1.0
        return ((g * d).reshape(shape),)

    return _emit("softmax_cross_entropy", np.array(lse - z[label]), (logits,), backward)


# ---------------------------------------------------------------------------
# differentiation


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
        return
    nodes = loss._tape.nodes
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(nodes[: loss._index + 1]):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._tape is None:
                _accumulate(inp, gi)
            else:
                key = id(inp)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=DTYPE)
    t.grad = g.copy() if t.grad is None else t.grad + g


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def gradient_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-6,
    samples: int | None = 200,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences.

    The step for coordinate ``theta`` is ``h * max(1, |theta|)``; the error
    is ``|analytic - numeric| / max(1, |numeric|)``.  ``samples=None``
    checks every coordinate.
    """
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    params = list(params)
    with no_grad():
        first, second = f().item(), f().item()
    if first != second:
        raise ContractError(f"function is not deterministic: {first!r} != {second!r}")

    saved = [p.grad for p in params]
    zero_grads(params)
    with Tape():
        backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
    for p, g in zip(params, saved):
        p.grad = g

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if samples is not None and samples < len(coords):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=samples, replace=False)
        coords = [coords[c] for c in sorted(pick)]

    worst = 0.0
    with no_grad():
        for i, j in coords:
            flat = params[i].data.reshape(-1)
            theta = flat[j]
            step = h * max(1.0, abs(theta))
            flat[j] = theta + step
            up = f().item()
            flat[j] = theta - step
            down = f().item()
            flat[j] = theta
            numeric = (up - down) / (2 * step)
            err = abs(analytic[i].reshape(-1)[j] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
