"""Float-64 tensors with a tape-based reverse-mode autodiff.

A :class:`Tensor` is an immutable value.  It becomes *tracked* once it is
registered on a :class:`Tape` (``tape.watch(x)``); any operation with at
least one tracked input records a node on that tape, and
:func:`backward` sweeps the nodes in reverse to accumulate gradients.

Shapes must match exactly.  The only broadcasts are the scalar multiplier of
:func:`scale` and the per-feature vectors of :func:`add_bias` and
:func:`layer_norm`.  :func:`matmul` accepts leading batch axes so a whole
batch of sequences can go through one node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

MASK_VALUE = -1e9
BCE_EPS = 1e-12


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class DomainError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Optional["Tape"] = None, node: Optional[int] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.node = node

    @classmethod
    def _own(cls, arr: np.ndarray, tape=None, node=None) -> "Tensor":
        # takes ownership of a freshly computed float64 array without copying
        t = cls.__new__(cls)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        arr.flags.writeable = False
        t.data, t.tape, t.node = arr, tape, node
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]
    backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]


@dataclass
class Tape:
    """Append-only record of differentiable operations for one step."""

    nodes: list[Node] = field(default_factory=list)
    gradients: dict[int, Tensor] = field(default_factory=dict)

    def watch(self, x) -> Tensor:
        """Register ``x`` as a leaf and return the tracked tensor."""
        x = as_tensor(x)
        if x.tape is self:
            return x
        if x.tracked:
            raise TapeError("tensor already belongs to another tape")
        node = self._append("leaf", (), x.shape, None)
        return Tensor._own(x.data, self, node)

    def _append(self, kind, inputs, shape, backward) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise TapeError(f"input node {i} is not on this tape")
        self.nodes.append(Node(kind, tuple(inputs), tuple(shape), backward))
        return len(self.nodes) - 1

    def grad(self, x: Tensor) -> Tensor:
        if x.tape is not self:
            raise TapeError("tensor is not on this tape")
        if x.node not in self.gradients:
            raise TapeError("backward has not been run on this tape")
        return self.gradients[x.node]


def _check_finite(arr: np.ndarray, kind: str) -> None:
    # a finite sum rules out NaN/Inf; an infinite one may be overflow, so recheck
    if math.isfinite(arr.sum()):
        return
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{kind} produced non-finite values")


def _result(kind: str, value: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``value``; record a node when any input is tracked."""
    _check_finite(value, kind)
    tapes = {id(t.tape): t.tape for t in inputs if t.tracked}
    if not tapes:
        return Tensor._own(value)
    if len(tapes) > 1:
        raise TapeError(f"{kind}: inputs live on different tapes")
    tape = next(iter(tapes.values()))
    ids = [t.node if t.tracked else -1 for t in inputs]
    tracked_ids = tuple(i for i in ids if i >= 0)

    def node_backward(g):
        grads = backward(g)
        return [gi for gi, i in zip(grads, ids) if i >= 0]

    node = tape._append(kind, tracked_ids, value.shape, node_backward)
    return Tensor._own(value, tape, node)


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    av, bv = a.data, b.data
    return _result("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def elementwise(a, b, op: str) -> Tensor:
    fns = {"add": add, "sub": sub, "mul": mul}
    if op not in fns:
        raise ValueError(f"unknown elementwise op {op!r}")
    return fns[op](a, b)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def add_bias(x, b) -> Tensor:
    """``x + b`` with ``b`` a vector matching the last axis of ``x``."""
    x, b = as_tensor(x), as_tensor(b)
    if b.data.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ShapeError(f"add_bias: bias {b.shape} does not fit {x.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return _result("add_bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is then either a plain matrix
    shared by the whole batch or has the same batch axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: need at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    if b.data.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ, {a.shape} @ {b.shape}")
    av, bv = a.data, b.data
    shared = bv.ndim == 2 and av.ndim > 2

    def back(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if shared:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _result("matmul", av @ bv, (a, b), back)


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    if x.data.ndim < 2:
        raise ShapeError(f"transpose: need at least 2-D, got {x.shape}")
    return _result("transpose", np.swapaxes(x.data, -1, -2).copy(), (x,),
                   lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _result("reshape", out.copy(), (x,), lambda g: (g.reshape(old),))


def take(x, index) -> Tensor:
    """Basic (slice/integer) indexing; the gradient scatters back."""
    x = as_tensor(x)
    out = np.array(x.data[index], dtype=np.float64)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _result("take", out, (x,), back)


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _result("sum", np.array([x.data.sum()]), (x,),
                   lambda g: (np.full(shape, g.reshape(-1)[0]),))


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    return scale(sum_all(x), 1.0 / x.data.size)


# --------------------------------------------------------------- activations


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return _result("relu", np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _result("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _result("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))


def activation(x, kind: str) -> Tensor:
    fns = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}
    if kind not in fns:
        raise ValueError(f"unknown activation {kind!r}")
    return fns[kind](x)


# ------------------------------------------------------ softmax / layer norm


def softmax_lastdim(x) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result("softmax", s, (x,), back)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize each last-axis slice with its population variance."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not fit {x.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gamma.data
    lead = tuple(range(x.data.ndim - 1))

    def back(g):
        gx_hat = g * gv
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result("layer_norm", xhat * gv + beta.data, (x, gamma, beta), back)


# ------------------------------------------------------------ concat / split


def concat_lastdim(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of nothing")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat: leading extents differ, {parts[0].shape} vs {p.shape}")
    sizes = [p.shape[-1] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=-1)
    return _result("concat", out, parts, lambda g: tuple(np.split(g, cuts, axis=-1)))


def split_lastdim(x, sizes: Sequence[int]) -> list[Tensor]:
    x = as_tensor(x)
    sizes = [int(s) for s in sizes]
    if any(s < 1 for s in sizes) or sum(sizes) != x.shape[-1]:
        raise ShapeError(f"split: sizes {sizes} do not partition last extent of {x.shape}")
    out = []
    start = 0
    for s in sizes:
        out.append(take(x, (Ellipsis, slice(start, start + s))))
        start += s
    return out


# -------------------------------------------------------------------- masking


def masked_fill(x, mask, value: float = MASK_VALUE) -> Tensor:
    x = as_tensor(x)
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"masked_fill: mask {mask.shape} vs input {x.shape}")
    keep = ~mask
    return _result("masked_fill", np.where(mask, float(value), x.data), (x,), lambda g: (g * keep,))


def dropout(x, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; noise comes from ``rng`` so runs stay reproducible."""
    if rate <= 0:
        return as_tensor(x)
    x = as_tensor(x)
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


# --------------------------------------------------------------------- losses


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    _same_shape("mse", pred, target)
    d = sub(pred, target)
    return mean_all(mul(d, d))


def bce_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    _same_shape("bce", pred, target)
    p = pred.data
    if (p < BCE_EPS).any() or (p > 1.0 - BCE_EPS).any():
        raise DomainError("bce: predictions must lie inside (0, 1)")
    t = target.data
    val = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).mean()
    n = p.size
    return _result("bce", np.array([val]), (pred, target),
                   lambda g: (g.reshape(-1)[0] * (p - t) / (p * (1.0 - p)) / n,
                              g.reshape(-1)[0] * (np.log(1.0 - p) - np.log(p)) / n))


def loss(pred, target, kind: str = "mse") -> Tensor:
    if kind == "mse":
        return mse_loss(pred, target)
    if kind == "bce":
        return bce_loss(pred, target)
    raise ValueError(f"unknown loss {kind!r}")


# ------------------------------------------------------------------- backward


def backward(tape: Tape, loss_value: Tensor) -> dict[int, Tensor]:
    """Reverse sweep from a scalar ``loss_value``.

    Returns (and stores on ``tape.gradients``) a gradient for every node on
    the tape; nodes the loss does not depend on get zeros.
    """
    if loss_value.tape is not tape:
        raise TapeError("loss is not on this tape")
    if loss_value.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss_value.shape}")
    grads: dict[int, np.ndarray] = {loss_value.node: np.ones(loss_value.shape)}
    for idx in range(loss_value.node, -1, -1):
        g = grads.get(idx)
        node = tape.nodes[idx]
        if g is None or node.backward is None:
            continue
        for src, gi in zip(node.inputs, node.backward(g)):
            if gi is None:
                continue
            gi = np.asarray(gi, dtype=np.float64).reshape(tape.nodes[src].shape)
            if src in grads:
                grads[src] = grads[src] + gi
            else:
                grads[src] = gi
    out = {}
    for idx, node in enumerate(tape.nodes):
        out[idx] = Tensor(grads[idx] if idx in grads else np.zeros(node.shape))
    tape.gradients = out
    return out


# ----------------------------------------------------------------- grad check


def grad_check(f: Callable[..., Tensor], inputs: Sequence, h: float = 1e-5) -> float:
    """Max relative error between backward's gradient and central differences.

    Relative error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    arrays = [np.array(as_tensor(x).data, dtype=np.float64) for x in inputs]
    tape = Tape()
    tracked = [tape.watch(a) for a in arrays]
    out = f(*tracked)
    if out.data.size != 1:
        raise ShapeError(f"grad_check: f must return a scalar, got shape {out.shape}")
    if out.tracked:
        backward(tape, out)
        analytic = [tape.grad(t).data for t in tracked]
    else:
        analytic = [np.zeros(a.shape) for a in arrays]

    fixed = [Tensor(a) for a in arrays]
    worst = 0.0
    for k, base in enumerate(arrays):
        args = list(fixed)
        for pos in np.ndindex(base.shape):
            orig = base[pos]
            base[pos] = orig + h
            args[k] = Tensor(base)
            fp = f(*args).item()
            base[pos] = orig - h
            args[k] = Tensor(base)
            fm = f(*args).item()
            base[pos] = orig
            num = (fp - fm) / (2.0 * h)
            ana = float(analytic[k][pos])
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            worst = max(worst, err)
    return worst
