"""Dense float tensors with taped reverse-mode differentiation.

The primitive set is fixed and small: matmul, add, multiply, layer_norm,
softmax (last axis), gelu, slice, concat, transpose, reshape, sum, mean.
Each primitive computes its value eagerly with numpy and, while a Tape is
active and some input requires a gradient, records a backward rule. A
single reverse sweep over the tape then populates `.grad` on every tensor
that asked for one.

Storage is float32 by default. Passing float64 arrays switches the whole
downstream computation to float64, which is how the finite-difference
oracle runs its shadow evaluation; mixing the two dtypes in one op is an
error rather than a silent promotion.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A dense float array plus optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw arrays, not Tensors")
        if dtype is None:
            if (isinstance(data, (np.ndarray, np.floating))
                    and data.dtype in _FLOAT_DTYPES):
                dtype = data.dtype
            else:
                dtype = np.float32
        arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._op = None  # record that produced this tensor, None for leaves

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}{tag})"

    # Operator sugar. Scalars become constants of the same dtype.
    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return add(self, self._coerce(other))

    def __radd__(self, other):
        return add(self._coerce(other), self)

    def __mul__(self, other):
        return multiply(self, self._coerce(other))

    def __rmul__(self, other):
        return multiply(self._coerce(other), self)

    def __sub__(self, other):
        other = self._coerce(other)
        return add(self, multiply(other, Tensor(np.asarray(-1.0, dtype=other.data.dtype))))

    def __neg__(self):
        return multiply(self, Tensor(np.asarray(-1.0, dtype=self.data.dtype)))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not a primitive; divide by a scalar")
        return multiply(self, Tensor(np.asarray(1.0 / other, dtype=self.data.dtype)))

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    __slots__ = ("out", "inputs", "backward", "name")

    def __init__(self, out: Tensor, inputs: tuple, backward: Callable, name: str):
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.name = name


_TAPES: list["Tape"] = []


class Tape:
    """Ordered log of executed primitives for one forward pass.

    Creation order is topological by construction (an op's inputs exist
    before the op runs), so one reverse sweep visits each record exactly
    once. One tape belongs to one forward/backward cycle.
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self, "tape stack corrupted"
        self.release()
        return False

    def release(self) -> None:
        """Drop the recorded graph.

        Every op output holds its record and the record holds the output
        (plus the inputs and the backward closure), so a finished graph is
        one big reference cycle that only the cycle collector would free.
        At ~100MB of activations per training step that lag is an OOM, not
        a detail; breaking the links here makes plain refcounting reclaim
        the step's memory immediately.
        """
        for rec in self._records:
            rec.out._op = None
            rec.inputs = ()
            rec.backward = None
        self._records.clear()

    def __len__(self):
        return len(self._records)

    def _record(self, rec: _Record):
        self._records.append(rec)

    def backward(self, loss: Tensor) -> None:
        """Populate `.grad` for every requires_grad tensor reachable from loss."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self._records:
            raise RuntimeError("backward on an empty tape")
        if loss._op is None or all(rec is not loss._op for rec in self._records):
            raise RuntimeError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)
        }
        for rec in reversed(self._records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None:
                    continue
                if inp.requires_grad:
                    inp.grad = gi if inp.grad is None else inp.grad + gi
                if inp._op is not None:
                    key = id(inp)
                    grads[key] = gi if key not in grads else grads[key] + gi


def active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def backward(loss: Tensor) -> None:
    tape = active_tape()
    if tape is None:
        raise RuntimeError("backward needs an active tape")
    tape.backward(loss)


def _maybe_record(name: str, out: Tensor, inputs: tuple, backward_fn: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and any(i.requires_grad or i._op is not None for i in inputs):
        rec = _Record(out, inputs, backward_fn, name)
        out._op = rec
        tape._record(rec)
    return out


def _check_dtypes(name: str, *tensors: Tensor):
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise TypeError(f"{name}: mixed dtypes {sorted(d.name for d in dtypes)}")


def _sum_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree, {a.shape} @ {b.shape}")
    # batched input against a 2D weight collapses to one flat GEMM, which
    # is much faster than a stack of small ones (and its backward avoids
    # the broadcast-reduction entirely)
    flat = a.ndim > 2 and b.ndim == 2
    try:
        if flat:
            lead = a.shape[:-1]
            out = Tensor((a.data.reshape(-1, a.shape[-1]) @ b.data)
                         .reshape(*lead, b.shape[-1]))
        else:
            out = Tensor(a.data @ b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}: {exc}") from None

    def bwd(g):
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape)
            gb = a.data.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        ga = _sum_to(g @ b.data.swapaxes(-1, -2), a.shape)
        gb = _sum_to(a.data.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb

    return _maybe_record("matmul", out, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("add", a, b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g):
        return _sum_to(g, a.shape), _sum_to(g, b.shape)

    return _maybe_record("add", out, (a, b), bwd)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("multiply", a, b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ShapeError(f"multiply: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g):
        return _sum_to(g * b.data, a.shape), _sum_to(g * a.data, b.shape)

    return _maybe_record("multiply", out, (a, b), bwd)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance.

    Variance is floored at eps, so a constant row maps to zeros. Affine
    scale/shift are applied by the caller with multiply/add.
    """
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = (x.data - mu) * inv
    out = Tensor(xhat)

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g - gm - xhat * (g * xhat).mean(axis=-1, keepdims=True)) * inv
        return (gx,)

    return _maybe_record("layer_norm", out, (x,), bwd)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _maybe_record("softmax", out, (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * np.asarray(_INV_SQRT2, dtype=x.data.dtype)))
    out = Tensor(x.data * cdf)

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * np.asarray(_INV_SQRT2PI, dtype=x.data.dtype)
        return (g * (cdf + x.data * pdf),)

    return _maybe_record("gelu", out, (x,), bwd)


def _normalize_key(key) -> tuple:
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, slice):
            raise ShapeError("slice_ accepts slice objects only (no int indexing)")
        if k.step not in (None, 1):
            raise ShapeError("slice_ does not support strided slices")
    return key


def slice_(x: Tensor, key) -> Tensor:
    """Basic contiguous slicing; key is a slice or tuple of slices."""
    key = _normalize_key(key)
    out = Tensor(x.data[key])

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _maybe_record("slice", out, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    _check_dtypes("concat", *tensors)
    try:
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    except ValueError as exc:
        raise ShapeError(f"concat along axis {axis}: {exc}") from None
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        g = np.moveaxis(g, axis, 0)
        return tuple(
            np.moveaxis(g[offsets[i]:offsets[i + 1]], 0, axis) for i in range(len(sizes))
        )

    return _maybe_record("concat", out, tuple(tensors), bwd)


def transpose(x: Tensor, axes: Optional[tuple] = None) -> Tensor:
    """Swap the last two axes, or permute by an explicit axes tuple."""
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose needs ndim >= 2, got {x.shape}")
        out = Tensor(x.data.swapaxes(-1, -2))

        def bwd(g):
            return (g.swapaxes(-1, -2),)

    else:
        inverse = tuple(np.argsort(axes))
        out = Tensor(x.data.transpose(axes))

        def bwd(g):
            return (g.transpose(inverse),)

    return _maybe_record("transpose", out, (x,), bwd)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    try:
        out = Tensor(x.data.reshape(shape))
    except ValueError:
        raise ShapeError(f"reshape: {x.shape} -> {shape} changes element count") from None
    old = x.shape

    def bwd(g):
        return (g.reshape(old),)

    return _maybe_record("reshape", out, (x,), bwd)


def _reduce(name: str, x: Tensor, axis, keepdims: bool, as_mean: bool) -> Tensor:
    data = x.data.mean(axis=axis, keepdims=keepdims) if as_mean else x.data.sum(axis=axis, keepdims=keepdims)
    out = Tensor(np.asarray(data, dtype=x.data.dtype))
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
        axes_norm = tuple(a % x.ndim for a in axes)

    def bwd(g):
        if axis is None:
            expanded = np.broadcast_to(g, x.shape)
        else:
            if not keepdims:
                g = np.expand_dims(g, axes_norm)
            expanded = np.broadcast_to(g, x.shape)
        if as_mean:
            return (expanded / np.asarray(count, dtype=x.data.dtype),)
        return (np.ascontiguousarray(expanded),)

    return _maybe_record(name, out, (x,), bwd)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce("sum", x, axis, keepdims, as_mean=False)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce("mean", x, axis, keepdims, as_mean=True)


# ---------------------------------------------------------------------------
# parameter helpers


def trunc_normal(shape, std: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled until all draws fall inside +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None
