"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active and at least one
operand requires gradients, so inference runs without bookkeeping. Binary
elementwise ops accept equal shapes or a 0-d scalar operand; anything else
must go through :func:`broadcast_to` or :func:`reshape` explicitly.
"""

from __future__ import annotations

import itertools
import json
import threading
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "__weakref__")

    def __init__(self, value, requires_grad: bool = False):
        if type(value) is not np.ndarray or value.dtype != np.float64:
            value = np.asarray(value, dtype=np.float64)
        self.value = value
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records operations of one forward pass for a later backward sweep."""

    _local = threading.local()

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        stack = Tape._stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack().pop()

    @classmethod
    def _stack(cls) -> list["Tape"]:
        stack = getattr(cls._local, "stack", None)
        if stack is None:
            stack = cls._local.stack = []
        return stack

    @classmethod
    def current(cls) -> "Tape | None":
        stack = getattr(cls._local, "stack", None)
        return stack[-1] if stack else None

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring it."""
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ValueError("loss does not depend on any tensor requiring grad")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        if loss.backward_fn is None:
            _accumulate_leaf(loss, grads.pop(id(loss)))
            return
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.backward_fn is None:
                    _accumulate_leaf(parent, pg)
                else:
                    key = id(parent)
                    grads[key] = grads[key] + pg if key in grads else pg


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _record(value: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(value)
    tape = Tape.current()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward
        tape.nodes.append(out)
    return out


# ---------------------------------------------------------------- elementwise


def _binary_shapes(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    return np.asarray(g.sum()) if t.ndim == 0 and g.ndim != 0 else g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    return _record(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    return _record(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    av, bv = a.value, b.value
    return _record(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, a), _unbroadcast(g * av, b)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    av, bv = a.value, b.value
    out = av / bv
    return _record(out, (a, b), lambda g: (_unbroadcast(g / bv, a), _unbroadcast(-g * out / bv, b)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.value, (a,), lambda g: (-g,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return _record(out, (a,), lambda g: (g * out,))


def expm1(a: Tensor) -> Tensor:
    """``exp(a) - 1`` without cancellation near zero."""
    out = np.expm1(a.value)
    return _record(out, (a,), lambda g: (g * (out + 1.0),))


def log(a: Tensor) -> Tensor:
    v = a.value
    return _record(np.log(v), (a,), lambda g: (g / v,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.value)
    return _record(out, (a,), lambda g: (g * 0.5 / out,))


def clip_min(a: Tensor, floor: float) -> Tensor:
    """``max(a, floor)``; the gradient is zero where the floor is active."""
    mask = a.value >= floor
    return _record(np.where(mask, a.value, floor), (a,), lambda g: (g * mask,))


# ------------------------------------------------------------------ reductions


def sum_(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(a.value.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _record(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


# ---------------------------------------------------------------- contractions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D product, or a stack of products over identical leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _record(
        av @ bv, (a, b), lambda g: (g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g)
    )


def einsum(subscripts: str, *operands: Tensor) -> Tensor:
    """Explicit-output einsum without repeated indices inside one operand."""
    operands = tuple(as_tensor(o) for o in operands)
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(operands):
        raise ShapeError("einsum operand count mismatch")
    for s, o in zip(in_subs, operands):
        if len(s) != o.ndim or len(set(s)) != len(s):
            raise ShapeError(f"einsum subscript {s!r} does not fit operand of shape {o.shape}")
    values = [o.value for o in operands]
    out = np.einsum(subscripts, *values, optimize=len(operands) > 2)

    def back(g):
        grads = []
        for k, s in enumerate(in_subs):
            if not operands[k].requires_grad:
                grads.append(None)
                continue
            others = [in_subs[j] for j in range(len(operands)) if j != k]
            other_vals = [values[j] for j in range(len(operands)) if j != k]
            present = set(out_sub).union(*others) if others else set(out_sub)
            kept = "".join(c for c in s if c in present)
            expr = ",".join([out_sub, *others]) + "->" + kept
            gk = np.einsum(expr, g, *other_vals, optimize=len(others) > 1)
            if kept != s:
                shape = [operands[k].shape[i] if c in present else 1 for i, c in enumerate(s)]
                gk = np.broadcast_to(gk.reshape(shape), operands[k].shape).copy()
            grads.append(gk)
        return tuple(grads)

    return _record(out, operands, back)


def lstm_cell(z: Tensor, c_prev: Tensor) -> Tensor:
    """Fused LSTM update from gate pre-activations.

    ``z`` holds ``[i, f, g, o]`` pre-activations along the last axis (width
    ``4d``) and ``c_prev`` the previous cell state (width ``d``). Returns
    ``[h, c]`` concatenated along the last axis.
    """
    d = c_prev.shape[-1]
    if z.shape[:-1] != c_prev.shape[:-1] or z.shape[-1] != 4 * d:
        raise ShapeError(f"lstm_cell shape mismatch {z.shape} vs {c_prev.shape}")
    zv = z.value
    ifo = 0.5 * (1.0 + np.tanh(0.5 * np.concatenate([zv[..., : 2 * d], zv[..., 3 * d :]], axis=-1)))
    i, f, o = ifo[..., :d], ifo[..., d : 2 * d], ifo[..., 2 * d :]
    g = np.tanh(zv[..., 2 * d : 3 * d])
    cp = c_prev.value
    c = f * cp + i * g
    tc = np.tanh(c)
    h = o * tc

    def back(grad):
        gh, gc = grad[..., :d], grad[..., d:]
        gc = gc + gh * o * (1.0 - tc * tc)
        gz = np.concatenate(
            [
                gc * g * i * (1.0 - i),
                gc * cp * f * (1.0 - f),
                gc * i * (1.0 - g * g),
                gh * tc * o * (1.0 - o),
            ],
            axis=-1,
        )
        return gz, gc * f

    return _record(np.concatenate([h, c], axis=-1), (z, c_prev), back)


# ----------------------------------------------------------------- structural


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(sorted(range(len(axes)), key=axes.__getitem__))
    return _record(a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast; ``a`` must already have ``len(shape)`` dimensions."""
    shape = tuple(shape)
    if a.ndim != len(shape):
        raise ShapeError(f"broadcast_to needs matching rank, got {a.shape} -> {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
    for i in axes:
        if a.shape[i] != 1:
            raise ShapeError(f"cannot broadcast {a.shape} to {shape}")
    return _record(
        np.broadcast_to(a.value, shape), (a,), lambda g: (g.sum(axis=axes, keepdims=True),)
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = list(itertools.accumulate(sizes[:-1]))
    return _record(
        np.concatenate([t.value for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


def slice_(a: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return _record(a.value[index], (a,), back)


# ------------------------------------------------------------------ utilities


def grad_check(
    f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5, max_coords: int | None = None,
    rng: np.random.Generator | None = None, floor: float | None = None, rtol: float = 1e-4,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` closes over ``params`` and returns a scalar tensor. Per coordinate
    the error is ``|analytic - numeric| / max(floor, |analytic| + |numeric|)``.
    Central differences of a value ``f`` carry rounding noise of about
    ``|f| * machine_eps / eps``; the default floor is that noise divided by
    ``rtol``, the relative accuracy the caller will demand (and at least
    ``1e-8``). Gradients too small for the difference quotient to resolve to
    ``rtol`` are thus compared on an absolute scale of about one noise unit.
    """
    if eps <= 0 or rtol <= 0:
        raise ValueError("eps and rtol must be positive")
    params = list(params)
    for p in params:
        p.grad = None
        p.requires_grad = True
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.value).all():
        raise FloatingPointError("non-finite loss")
    tape.backward(loss)
    if floor is None:
        floor = max(1e-8, abs(loss.item()) * np.finfo(float).eps / (eps * rtol))
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        flat = p.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        for k in coords:
            orig = flat[k]
            flat[k] = orig + eps
            up = f().item()
            flat[k] = orig - eps
            down = f().item()
            flat[k] = orig
            num = (up - down) / (2 * eps)
            ana = analytic.reshape(-1)[k]
            if not (np.isfinite(num) and np.isfinite(ana)):
                raise FloatingPointError("non-finite gradient")
            worst = max(worst, abs(ana - num) / max(floor, abs(ana) + abs(num)))
    return worst


def save_params(params: Mapping[str, Tensor], path: str | Path, extra: dict | None = None) -> None:
    """JSON checkpoint ``name -> {shape, values}``; ``extra`` is stored under ``__meta__``."""
    obj: dict = {name: {"shape": list(t.shape), "values": t.value.reshape(-1).tolist()} for name, t in params.items()}
    if extra is not None:
        obj["__meta__"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh)


def load_params(path: str | Path, expected: Mapping[str, tuple[int, ...]] | None = None) -> tuple[dict[str, Tensor], dict]:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    meta = obj.pop("__meta__", {})
    params = {}
    for name, rec in obj.items():
        shape = tuple(rec["shape"])
        values = np.asarray(rec["values"], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise ShapeError(f"{name}: {values.size} values do not fill shape {shape}")
        params[name] = Tensor(values.reshape(shape))
    if expected is not None:
        if set(expected) != set(params):
            missing = sorted(set(expected) - set(params))
            unknown = sorted(set(params) - set(expected))
            raise ShapeError(f"checkpoint names differ: missing {missing}, unexpected {unknown}")
        for name, shape in expected.items():
            if params[name].shape != tuple(shape):
                raise ShapeError(f"{name}: checkpoint shape {params[name].shape} != expected {tuple(shape)}")
    return params, meta
