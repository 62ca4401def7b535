"""Dense arrays with reverse-mode automatic differentiation.

Operations are recorded on the innermost active :class:`Tape` (define-by-run)
whenever at least one input participates in differentiation, i.e. is a leaf
with ``requires_grad`` set or the output of an op already on that tape.
Outside a ``with Tape():`` block nothing is recorded and arrays behave as
plain immutable values.

Broadcasting is deliberately narrow: the second operand of a binary op may be
a scalar (size 1) or a per-channel vector whose length equals the extent of
axis 1 of the first operand. Everything else must match shapes exactly.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DomainError, ShapeError

_DTYPES = {"single": np.float32, "double": np.float64}
_ACTIVE: list["Tape"] = []


def _precision_of(dtype) -> str:
    return "double" if np.dtype(dtype) == np.float64 else "single"


class DiffArray:
    """A dense real array that may take part in gradient recording."""

    __slots__ = ("data", "grad", "requires_grad", "_tape", "_gen", "_node")

    def __init__(self, data, requires_grad: bool = False, precision: Optional[str] = None):
        if precision is None:
            if isinstance(data, np.ndarray) and data.dtype == np.float64:
                precision = "double"
            else:
                precision = "single"
        if precision not in _DTYPES:
            raise ValueError(f"unknown precision {precision!r}")
        self.data = np.ascontiguousarray(data, dtype=_DTYPES[precision])
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._tape: Optional[Tape] = None
        self._gen = -1
        self._node: Optional[int] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def precision(self) -> str:
        return _precision_of(self.data.dtype)

    @property
    def tape_id(self) -> Optional[int]:
        """Index of the producing node on its tape, or None for leaves/constants."""
        if self._tape is None or self._gen != self._tape._gen:
            return None
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "DiffArray":
        return DiffArray(self.data, precision=self.precision)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffArray(shape={self.shape}, precision={self.precision}{flag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "DiffArray":
        return transpose(self)


class _Node:
    __slots__ = ("kind", "inputs", "needs", "backward_fn", "out_shape")

    def __init__(self, kind, inputs, needs, backward_fn, out_shape=()):
        self.kind = kind
        self.inputs = inputs
        self.needs = needs
        self.backward_fn = backward_fn
        self.out_shape = out_shape


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the block are appended in
    execution order, which is also a valid topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._gen = 0

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()
        self._gen += 1

    def participates(self, a: DiffArray) -> bool:
        return a.requires_grad or (a._tape is self and a._gen == self._gen and a._node is not None)

    def _owns(self, a: DiffArray) -> bool:
        return a._tape is self and a._gen == self._gen and a._node is not None


def active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def record(kind: str, inputs: Sequence[DiffArray], out: np.ndarray,
           backward_fn: Callable[[np.ndarray, tuple], tuple]) -> DiffArray:
    """Wrap ``out`` in a DiffArray and, if needed, register it on the active tape.

    ``backward_fn(g, needs)`` receives the output gradient and a tuple of
    booleans flagging which inputs need a gradient; it returns one array (or
    None) per input.
    """
    result = DiffArray(out, precision=_precision_of(out.dtype))
    tape = active_tape()
    if tape is None:
        return result
    needs = tuple(tape.participates(a) for a in inputs)
    if not any(needs):
        return result
    tape.nodes.append(_Node(kind, tuple(inputs), needs, backward_fn, np.shape(out)))
    result._tape = tape
    result._gen = tape._gen
    result._node = len(tape.nodes) - 1
    return result


def backward(output: DiffArray, tape: Tape, seed: Optional[np.ndarray] = None) -> None:
    """Accumulate d(output)/d(leaf) into ``.grad`` of every participating leaf."""
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    if not tape._owns(output):
        raise ValueError("output was not recorded on this tape")
    grads: list[Optional[np.ndarray]] = [None] * len(tape.nodes)
    grads[output._node] = np.ones_like(output.data) if seed is None else np.asarray(seed, output.dtype)
    for i in range(len(tape.nodes) - 1, -1, -1):
        g = grads[i]
        if g is None:
            continue
        grads[i] = None
        node = tape.nodes[i]
        in_grads = node.backward_fn(g, node.needs)
        for inp, need, gi in zip(node.inputs, node.needs, in_grads):
            if not need or gi is None:
                continue
            if tape._owns(inp):
                j = inp._node
                grads[j] = gi if grads[j] is None else grads[j] + gi
            elif inp.requires_grad:
                gi = gi.reshape(inp.shape).astype(inp.dtype, copy=False)
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _as_diff(b, like: DiffArray) -> DiffArray:
    if isinstance(b, DiffArray):
        return b
    return DiffArray(np.asarray(b, dtype=like.dtype), precision=like.precision)


def _broadcast(a: DiffArray, b: DiffArray) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    """Return b's data shaped to broadcast against a, and a reducer for its grad."""
    if b.shape == a.shape:
        return b.data, lambda g: g
    if b.size == 1:
        return b.data.reshape(()), lambda g: np.asarray(g.sum()).reshape(b.shape)
    if b.ndim == 1 and a.ndim >= 2 and b.shape[0] == a.shape[1]:
        view = (1, b.shape[0]) + (1,) * (a.ndim - 2)
        axes = (0,) + tuple(range(2, a.ndim))
        return b.data.reshape(view), lambda g: g.sum(axis=axes)
    raise ShapeError(f"cannot broadcast {b.shape} onto {a.shape}")


def add(a: DiffArray, b) -> DiffArray:
    b = _as_diff(b, a)
    bd, red = _broadcast(a, b)
    return record("add", (a, b), a.data + bd, lambda g, n: (g, red(g) if n[1] else None))


def sub(a: DiffArray, b) -> DiffArray:
    b = _as_diff(b, a)
    bd, red = _broadcast(a, b)
    return record("sub", (a, b), a.data - bd, lambda g, n: (g, -red(g) if n[1] else None))


def mul(a: DiffArray, b) -> DiffArray:
    b = _as_diff(b, a)
    bd, red = _broadcast(a, b)
    ad = a.data

    def bw(g, n):
        return (g * bd if n[0] else None, red(g * ad) if n[1] else None)

    return record("mul", (a, b), ad * bd, bw)


def neg(a: DiffArray) -> DiffArray:
    return record("neg", (a,), -a.data, lambda g, n: (-g,))


def relu(a: DiffArray) -> DiffArray:
    mask = a.data > 0
    return record("relu", (a,), np.maximum(a.data, 0), lambda g, n: (g * mask,))


def exp(a: DiffArray) -> DiffArray:
    out = np.exp(a.data)
    return record("exp", (a,), out, lambda g, n: (g * out,))


def log(a: DiffArray) -> DiffArray:
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    ad = a.data
    return record("log", (a,), np.log(ad), lambda g, n: (g / ad,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "relu": relu, "exp": exp, "log": log}


def elementwise(op: str, a: DiffArray, b=None) -> DiffArray:
    """Dispatch one of ``add, sub, mul, relu, exp, log`` by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return fn(a, b)
    return fn(a)


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g, n):
        return (g @ bd.T if n[0] else None, ad.T @ g if n[1] else None)

    return record("matmul", (a, b), ad @ bd, bw)


def transpose(a: DiffArray, axes: Optional[Sequence[int]] = None) -> DiffArray:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return record("transpose", (a,), out, lambda g, n: (g.transpose(inv),))


def reshape(a: DiffArray, shape: Sequence[int]) -> DiffArray:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return record("reshape", (a,), out, lambda g, n: (g.reshape(src),))


def concat(arrays: Sequence[DiffArray], axis: int = 0) -> DiffArray:
    arrays = tuple(arrays)
    try:
        out = np.concatenate([x.data for x in arrays], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]

    def bw(g, n):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", arrays, out, bw)


def reduce(op: str, a: DiffArray, axis: Optional[int] = None, keepdims: bool = False) -> DiffArray:
    """Sum, mean or max over one axis (or everything when ``axis`` is None).

    Max sends the whole gradient to the first maximal element.
    """
    if axis is not None:
        if not -a.ndim <= axis < a.ndim:
            raise ShapeError(f"axis {axis} out of range for rank {a.ndim}")
        axis = axis % a.ndim
        count = a.shape[axis]
    else:
        count = a.size
    if count == 0:
        raise DomainError("reduction over an empty axis")
    src = a.shape

    def expand(g):
        if axis is None:
            return np.reshape(g, (1,) * len(src))
        return g if keepdims else np.expand_dims(g, axis)

    if op == "sum":
        out = a.data.sum(axis=axis, keepdims=keepdims)
        return record("sum", (a,), np.asarray(out), lambda g, n: (np.broadcast_to(expand(g), src).copy(),))
    if op == "mean":
        out = a.data.mean(axis=axis, keepdims=keepdims)
        scale = a.dtype.type(1.0 / count)
        return record("mean", (a,), np.asarray(out),
                      lambda g, n: (np.broadcast_to(expand(g) * scale, src).copy(),))
    if op == "max":
        if axis is None:
            idx = int(np.argmax(a.data))
            out = a.data.reshape(-1)[idx]
            if keepdims:
                out = np.reshape(out, (1,) * len(src))

            def bw(g, n):
                grad = np.zeros(a.size, dtype=a.dtype)
                grad[idx] = np.asarray(g).reshape(-1)[0]
                return (grad.reshape(src),)

            return record("max", (a,), np.asarray(out), bw)
        idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
        out = np.take_along_axis(a.data, idx, axis=axis)
        if not keepdims:
            out = np.squeeze(out, axis=axis)

        def bw(g, n):
            grad = np.zeros(src, dtype=a.dtype)
            np.put_along_axis(grad, idx, expand(g), axis=axis)
            return (grad,)

        return record("max", (a,), out, bw)
    raise ValueError(f"unknown reduction {op!r}")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[DiffArray], DiffArray], x: DiffArray, h: float = 1e-4) -> float:
    """Compare tape gradients of scalar ``f`` at ``x`` with central differences.

    ``f`` may ignore its argument and read ``x`` through a closure (e.g. a
    model parameter); ``x.data`` is perturbed in place and restored.

    Returns:
        max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if x.precision != "double":
        raise DomainError("finite_diff_check needs a double-precision input")
    saved_flag, saved_grad = x.requires_grad, x.grad
    x.requires_grad, x.grad = True, None
    try:
        with Tape() as tape:
            out = f(x)
            backward(out, tape)
            tape.clear()
        analytic = np.zeros(x.shape) if x.grad is None else x.grad.astype(np.float64)
        flat = x.data.reshape(-1)
        numeric = np.empty(x.size)
        for i in range(x.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise DomainError(f"f is not finite near coordinate {i}")
            numeric[i] = (fp - fm) / (2.0 * h)
    finally:
        x.requires_grad, x.grad = saved_flag, saved_grad
    analytic = analytic.reshape(-1)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))
