"""Reverse-mode autodiff over dense float32 arrays.

The engine records operations on an explicit :class:`Tape`.  Ops executed
while a tape is active append one node each; ``Tape.backward`` replays the
nodes strictly in reverse creation order and accumulates gradients into the
participating tensors.  Outside a tape context every op is plain numpy, which
is what inference paths use.

Layout is row-major and contiguous throughout; there are no strided views or
general broadcasting, only the bias-style broadcasts the network needs.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NumericalError",
    "apply_op",
    "scratch_buffer",
    "scratch_release",
    "ScratchArena",
    "add",
    "sub",
    "mul",
    "matmul",
    "concat",
    "softmax",
    "backward",
    "zeros",
    "ones",
    "as_tensor",
]


class NumericalError(RuntimeError):
    """Raised when a computation produces or receives non-finite values."""


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = []
        _tls.tapes = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    """One recorded op: output tensor, its inputs, and a backward closure."""

    __slots__ = ("op", "inputs", "out", "fn")

    def __init__(self, op, inputs, out, fn):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.fn = fn


class Tape:
    """Ordered op record; creation order is the topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self, "tape contexts must nest"
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

        Intermediate (op output) gradients are reset at the start of each
        call, so repeated backward passes over the same tape are
        reproducible; leaf gradients accumulate across calls until
        explicitly zeroed.
        """
        if not isinstance(loss, Tensor):
            raise TypeError("backward expects a Tensor loss")
        if loss.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        if loss.tape is not self:
            raise ValueError("loss is not recorded on this tape")
        for node in self.nodes:
            node.out.grad = None
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            gout = node.out.grad
            if gout is None:
                continue
            needs = tuple(t.requires_grad for t in node.inputs)
            grads = node.fn(gout, needs)
            for t, g in zip(node.inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if g.dtype != np.float32:
                    g = g.astype(np.float32)
                if t.grad is None:
                    t.grad = g
                else:
                    t.grad += g


class Tensor:
    """Dense float32 array plus optional gradient buffer and tape handle."""

    __slots__ = ("data", "grad", "requires_grad", "tape", "tape_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.tape: Optional[Tape] = None
        self.tape_id: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A tape-free tensor sharing this tensor's storage."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flags})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return _reduce(self, "sum")

    def mean(self) -> "Tensor":
        return _reduce(self, "mean")

    def log(self) -> "Tensor":
        return log(self)

    def clamp_min(self, lo: float) -> "Tensor":
        return clamp_min(self, lo)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, np.float32), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, np.float32), requires_grad)


def apply_op(
    op: str,
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray, tuple], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Wrap an op result, recording it on the active tape when needed.

    ``backward_fn(grad_out, needs)`` must return one gradient array (or
    None) per input, aligned with ``inputs``; it may skip work for inputs
    whose ``needs`` flag is False.  This is the extension point custom
    layers build on.
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        out.tape_id = len(tape.nodes)
        tape.nodes.append(_Node(op, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss on its tape."""
    if loss.tape is None:
        raise ValueError("loss is not attached to a tape; run it inside `with Tape():`")
    loss.tape.backward(loss)


# ---------------------------------------------------------------------------
# scratch arena: reusable float32 slabs.
#
# Fresh large allocations on this class of machine are page-fault bound, so
# the training loop runs each step inside `with ScratchArena():` and every
# sizeable op output or scratch array is drawn from the pool.  Slabs persist
# across steps (page-warm); reset() only marks them free.  Tensors built
# inside the scope must be dropped before the next step reuses the memory;
# the trainer owns that lifecycle.
# ---------------------------------------------------------------------------


class _Slab:
    __slots__ = ("buf", "free")

    def __init__(self, n):
        self.buf = np.empty(n, np.float32)
        self.free = True


class ScratchArena:
    def __init__(self):
        self._slabs: list[_Slab] = []
        self._lent: dict[int, _Slab] = {}

    def take(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        # Reuse only reasonably tight fits: handing a huge free slab to a
        # small request that is never released would strand it until reset
        # and balloon the pool.
        best = None
        for slab in self._slabs:
            if slab.free and n <= slab.buf.size <= 2 * n:
                if best is None or slab.buf.size < best.buf.size:
                    best = slab
        if best is None:
            best = _Slab(n)
            self._slabs.append(best)
        best.free = False
        view = best.buf[:n].reshape(shape)
        self._lent[id(view)] = best
        return view

    def release(self, arr: np.ndarray) -> None:
        slab = self._lent.pop(id(arr), None)
        if slab is not None:
            slab.free = True

    def reset(self) -> None:
        self._lent.clear()
        for slab in self._slabs:
            slab.free = True

    def __enter__(self) -> "ScratchArena":
        stack = getattr(_tls, "arenas", None)
        if stack is None:
            stack = []
            _tls.arenas = stack
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.arenas.pop()
        self.reset()
        return False


def scratch_buffer(shape) -> np.ndarray:
    """Uninitialized float32 scratch, pooled when an arena is active."""
    stack = getattr(_tls, "arenas", None)
    if stack:
        return stack[-1].take(shape)
    return np.empty(shape, np.float32)


def scratch_release(arr: np.ndarray) -> None:
    """Hand a scratch buffer back early; no-op outside an arena."""
    stack = getattr(_tls, "arenas", None)
    if stack:
        stack[-1].release(arr)


# ---------------------------------------------------------------------------
# elementary ops
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(
        i for i, (gn, sn) in enumerate(zip(g.shape, shape)) if sn == 1 and gn != 1
    )
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.ascontiguousarray(g.reshape(shape))


def add(a, b) -> Tensor:
    """Elementwise sum; accepts scalars and bias-style broadcast shapes."""
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = as_tensor(a)
        out = scratch_buffer(a.shape)
        np.add(a.data, np.float32(b), out=out)

        def bwd_scalar(g, needs):
            return (g,)

        return apply_op("add_scalar", out, (a,), bwd_scalar)

    a, b = as_tensor(a), as_tensor(b)
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}") from None
    out = scratch_buffer(out_shape)
    np.add(a.data, b.data, out=out)
    a_shape, b_shape = a.shape, b.shape

    def bwd(g, needs):
        ga = _unbroadcast(g, a_shape) if needs[0] else None
        gb = _unbroadcast(g, b_shape) if needs[1] else None
        return ga, gb

    return apply_op("add", out, (a, b), bwd)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    out = scratch_buffer(x.shape)
    np.multiply(x.data, np.float32(c), out=out)

    def bwd(g, needs):
        return (g * np.float32(c),)

    return apply_op("scale", out, (x,), bwd)


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return add(a, -float(b))
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly (scalars excepted)."""
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(a, float(b))
    if not isinstance(a, Tensor) and np.isscalar(a):
        return scale(b, float(a))
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(
            f"elementwise mul requires matching shapes, got {a.shape} and {b.shape}"
        )
    out = scratch_buffer(a.shape)
    np.multiply(a.data, b.data, out=out)
    ad, bd = a.data, b.data

    def bwd(g, needs):
        ga = g * bd if needs[0] else None
        gb = g * ad if needs[1] else None
        return ga, gb

    return apply_op("mul", out, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    out = scratch_buffer((a.shape[0], b.shape[1]))
    np.matmul(a.data, b.data, out=out)
    ad, bd = a.data, b.data

    def bwd(g, needs):
        ga = g @ bd.T if needs[0] else None
        gb = ad.T @ g if needs[1] else None
        return ga, gb

    return apply_op("matmul", out, (a, b), bwd)


def concat(a: Tensor, b: Tensor, axis: int = 0) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim:
        raise ValueError(f"concat: rank mismatch, {a.shape} vs {b.shape}")
    axis = axis % max(a.ndim, 1)
    for i, (sa, sb) in enumerate(zip(a.shape, b.shape)):
        if i != axis and sa != sb:
            raise ValueError(
                f"concat along axis {axis}: shapes {a.shape} and {b.shape} "
                f"differ on axis {i}"
            )
    out_data = np.concatenate([a.data, b.data], axis=axis)
    na = a.shape[axis]

    def bwd(g, needs):
        sl_a = [slice(None)] * g.ndim
        sl_b = [slice(None)] * g.ndim
        sl_a[axis] = slice(0, na)
        sl_b[axis] = slice(na, None)
        ga = np.ascontiguousarray(g[tuple(sl_a)]) if needs[0] else None
        gb = np.ascontiguousarray(g[tuple(sl_b)]) if needs[1] else None
        return ga, gb

    return apply_op("concat", out_data, (a, b), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along `axis`; rejects NaN input."""
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericalError("softmax input contains NaN")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted, dtype=np.float32)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g, needs):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return apply_op("softmax", y, (x,), bwd)


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.log(x.data)
    xd = x.data

    def bwd(g, needs):
        return (g / xd,)

    return apply_op("log", out, (x,), bwd)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, np.float32(lo))
    mask = x.data > np.float32(lo)

    def bwd(g, needs):
        return (g * mask,)

    return apply_op("clamp_min", out, (x,), bwd)


def _reduce(x: Tensor, kind: str) -> Tensor:
    x = as_tensor(x)
    if kind == "sum":
        val = x.data.sum(dtype=np.float32)
        denom = 1.0
    else:
        val = x.data.mean(dtype=np.float32)
        denom = float(x.size)
    shape = x.shape

    def bwd(g, needs):
        return (np.full(shape, g.reshape(-1)[0] / np.float32(denom), np.float32),)

    return apply_op(kind, np.asarray(val, np.float32), (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    orig = x.shape

    def bwd(g, needs):
        return (g.reshape(orig),)

    return apply_op("reshape", out, (x,), bwd)


def take_column(x: Tensor, col: int) -> Tensor:
    """Select column `col` of a 2-D tensor as a 1-D tensor."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ValueError(f"take_column expects a 2-D tensor, got {x.shape}")
    out = np.ascontiguousarray(x.data[:, col])
    shape = x.shape

    def bwd(g, needs):
        gi = np.zeros(shape, np.float32)
        gi[:, col] = g
        return (gi,)

    return apply_op("take_column", out, (x,), bwd)
