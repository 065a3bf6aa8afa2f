"""Minimal reverse-mode autodiff over dense numpy arrays.

Every differentiable computation in the package goes through
:func:`apply_primitive`.  An output whose inputs need gradients carries a
:class:`TapeEntry`; entries get a global, monotonically increasing sequence
number, so the reachable sub-graph of a loss sorted by that number is a
topologically ordered tape.  :func:`backward` walks it in exact reverse order,
which fixes the gradient accumulation order and keeps results bitwise
reproducible.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidShape, NoTape, NumericOverflow, TapeConsumed

_DEFAULT_DTYPE = np.float32
_SEQ = itertools.count()

GELU_TANH_C = math.sqrt(2.0 / math.pi)


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (``float64`` for verification)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    """An immutable n-d array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_entry")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _DEFAULT_DTYPE, copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._entry = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        if not isinstance(arr, np.ndarray):
            arr = np.asarray(arr)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._entry = None
        return t

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
    def tracks_grad(self) -> bool:
        return self.requires_grad or self._entry is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return apply_primitive("add", [self, _as_tensor(other, self)])

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return apply_primitive("scale", [self], {"c": float(other)})
        return apply_primitive("mul", [self, _as_tensor(other, self)])

    __rmul__ = __mul__

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, other])

    @property
    def T(self):
        return apply_primitive("transpose", [self])


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype)


@dataclass(eq=False)
class TapeEntry:
    seq: int
    prim: str
    inputs: tuple
    attrs: dict
    saved: object
    consumed: bool = False


@dataclass
class Tape:
    """The ordered record of primitives reachable from one scalar output."""

    entries: list = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        if out._entry is None:
            raise NoTape("tensor is not connected to any recorded primitive")
        seen = {}
        stack = [out._entry]
        while stack:
            e = stack.pop()
            if e.seq in seen:
                continue
            seen[e.seq] = e
            for x in e.inputs:
                if x._entry is not None and x._entry.seq not in seen:
                    stack.append(x._entry)
        return cls([seen[k] for k in sorted(seen)])

    def is_topological(self) -> bool:
        pos = {e.seq: i for i, e in enumerate(self.entries)}
        for i, e in enumerate(self.entries):
            for x in e.inputs:
                if x._entry is not None and pos.get(x._entry.seq, i) >= i:
                    return False
        return True


# ---------------------------------------------------------------------------
# primitive rules: forward(arrays, attrs) -> (out, saved);
# backward(g, saved, attrs, needs) -> per-input gradient or None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(a, b, prim):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise InvalidShape(f"{prim}: cannot broadcast {a} with {b}") from None


def _matmul_fwd(xs, attrs):
    a, b = xs
    if a.ndim < 2 or b.ndim < 2:
        raise InvalidShape(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise InvalidShape(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")
    return np.matmul(a, b), (a, b)


def _matmul_bwd(g, saved, attrs, needs):
    a, b = saved
    ga = gb = None
    if needs[0]:
        if a.ndim == 2 and b.ndim == 2:
            ga = g @ b.T
        else:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
    if needs[1]:
        if b.ndim == 2:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
    return ga, gb


def _add_fwd(xs, attrs):
    a, b = xs
    _broadcast_shape(a.shape, b.shape, "add")
    return a + b, (a.shape, b.shape)


def _add_bwd(g, saved, attrs, needs):
    sa, sb = saved
    return (_unbroadcast(g, sa) if needs[0] else None,
            _unbroadcast(g, sb) if needs[1] else None)


def _mul_fwd(xs, attrs):
    a, b = xs
    _broadcast_shape(a.shape, b.shape, "mul")
    return a * b, (a, b)


def _mul_bwd(g, saved, attrs, needs):
    a, b = saved
    return (_unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None)


def _scale_fwd(xs, attrs):
    (x,) = xs
    return x * x.dtype.type(attrs["c"]), None


def _scale_bwd(g, saved, attrs, needs):
    return (g * g.dtype.type(attrs["c"]),)


def _concat_fwd(xs, attrs):
    axis = attrs.get("axis", -1)
    ref = xs[0]
    ax = axis % ref.ndim
    for x in xs[1:]:
        if x.ndim != ref.ndim or any(
                x.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise InvalidShape(f"concat: incompatible shapes {ref.shape} and {x.shape}")
    sizes = [x.shape[ax] for x in xs]
    return np.concatenate(xs, axis=ax), (ax, sizes)


def _concat_bwd(g, saved, attrs, needs):
    ax, sizes = saved
    bounds = np.cumsum(sizes)[:-1]
    parts = np.split(g, bounds, axis=ax)
    return tuple(p if n else None for p, n in zip(parts, needs))


def _split_piece_bwd(g, saved, attrs, needs):
    ax, start, stop, in_shape = saved
    full = np.zeros(in_shape, dtype=g.dtype)
    idx = [slice(None)] * len(in_shape)
    idx[ax] = slice(start, stop)
    full[tuple(idx)] = g
    return (full,)


def _transpose_fwd(xs, attrs):
    (x,) = xs
    axes = attrs.get("axes")
    if axes is None:
        if x.ndim < 2:
            raise InvalidShape("transpose needs a >=2-d tensor")
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    if sorted(axes) != list(range(x.ndim)):
        raise InvalidShape(f"transpose axes {axes} invalid for shape {x.shape}")
    return np.transpose(x, axes), tuple(np.argsort(axes))


def _transpose_bwd(g, inverse, attrs, needs):
    return (np.transpose(g, inverse),)


def _reshape_fwd(xs, attrs):
    (x,) = xs
    shape = tuple(attrs["shape"])
    try:
        out = x.reshape(shape)
    except ValueError:
        raise InvalidShape(f"cannot reshape {x.shape} to {shape}") from None
    return out, x.shape


def _reshape_bwd(g, in_shape, attrs, needs):
    return (g.reshape(in_shape),)


def _layernorm_fwd(xs, attrs):
    x, gain, bias = xs
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise InvalidShape(f"layernorm gain/bias must be ({d},), got {gain.shape}, {bias.shape}")
    eps = attrs.get("eps", 1e-6)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def _layernorm_bwd(g, saved, attrs, needs):
    xhat, inv, gain = saved
    gx = ggain = gbias = None
    if needs[0]:
        dxhat = g * gain
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    if needs[1]:
        ggain = (g * xhat).reshape(-1, g.shape[-1]).sum(axis=0)
    if needs[2]:
        gbias = g.reshape(-1, g.shape[-1]).sum(axis=0)
    return gx, ggain, gbias


def _softmax_fwd(xs, attrs):
    (x,) = xs
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return y, y


def _softmax_bwd(g, y, attrs, needs):
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def _gelu_fwd(xs, attrs):
    (x,) = xs
    if attrs.get("approximate", "tanh") == "tanh":
        c = x.dtype.type(GELU_TANH_C)
        k = x.dtype.type(0.044715)
        u = c * (x + k * x * x * x)
        th = np.tanh(u)
        return 0.5 * x * (1.0 + th), ("tanh", x, th)
    from scipy.special import erf

    cdf = 0.5 * (1.0 + erf(x / np.sqrt(x.dtype.type(2.0))))
    return x * cdf, ("exact", x, cdf)


def _gelu_bwd(g, saved, attrs, needs):
    kind, x, aux = saved
    if kind == "tanh":
        c = x.dtype.type(GELU_TANH_C)
        k = x.dtype.type(0.044715)
        th = aux
        du = c * (1.0 + 3.0 * k * x * x)
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
    else:
        pdf = np.exp(-0.5 * x * x) / np.sqrt(x.dtype.type(2.0 * math.pi))
        d = aux + x * pdf
    return (g * d,)


def _mean_fwd(xs, attrs):
    (x,) = xs
    axis = attrs.get("axis")
    keep = attrs.get("keepdims", False)
    return np.asarray(x.mean(axis=axis, keepdims=keep), dtype=x.dtype), (x.shape, axis, keep)


def _mean_bwd(g, saved, attrs, needs):
    shape, axis, keep = saved
    if axis is None:
        n = int(np.prod(shape))
        return (np.broadcast_to(g.reshape((1,) * len(shape)) / g.dtype.type(n), shape).copy(),)
    ax = axis % len(shape)
    if not keep:
        g = np.expand_dims(g, ax)
    return (np.broadcast_to(g / g.dtype.type(shape[ax]), shape).copy(),)


def _mse_fwd(xs, attrs):
    a, b = xs
    if a.shape != b.shape:
        raise InvalidShape(f"mse operands differ in shape: {a.shape} vs {b.shape}")
    diff = a - b
    return np.asarray((diff * diff).mean(), dtype=a.dtype), diff


def _mse_bwd(g, diff, attrs, needs):
    gd = diff * (g.dtype.type(2.0) * g / g.dtype.type(diff.size))
    return (gd if needs[0] else None, -gd if needs[1] else None)


@dataclass(frozen=True)
class _Rule:
    arity: int | None
    forward: Callable
    backward: Callable


_RULES = {
    "matmul": _Rule(2, _matmul_fwd, _matmul_bwd),
    "add": _Rule(2, _add_fwd, _add_bwd),
    "mul": _Rule(2, _mul_fwd, _mul_bwd),
    "scale": _Rule(1, _scale_fwd, _scale_bwd),
    "concat": _Rule(None, _concat_fwd, _concat_bwd),
    "split": _Rule(1, None, _split_piece_bwd),
    "transpose": _Rule(1, _transpose_fwd, _transpose_bwd),
    "reshape": _Rule(1, _reshape_fwd, _reshape_bwd),
    "layernorm": _Rule(3, _layernorm_fwd, _layernorm_bwd),
    "softmax": _Rule(1, _softmax_fwd, _softmax_bwd),
    "gelu": _Rule(1, _gelu_fwd, _gelu_bwd),
    "mean": _Rule(1, _mean_fwd, _mean_bwd),
    "mse": _Rule(2, _mse_fwd, _mse_bwd),
}

PRIMITIVES = frozenset(_RULES)


def _check_finite(arr, name):
    if not np.isfinite(arr).all():
        raise NumericOverflow(f"{name} produced non-finite values")


def _record(name, inputs, attrs, saved, out_arr):
    out = Tensor._wrap(out_arr)
    out._entry = TapeEntry(next(_SEQ), name, tuple(inputs), attrs, saved)
    return out


def apply_primitive(name: str, inputs: Sequence[Tensor], attrs: dict | None = None):
    """Run primitive ``name`` and record it on the tape when gradients flow.

    ``split`` returns a list of tensors (one per section); every other
    primitive returns a single tensor.
    """
    rule = _RULES.get(name)
    if rule is None:
        raise ValueError(f"unknown primitive {name!r}")
    attrs = dict(attrs or {})
    inputs = list(inputs)
    if rule.arity is not None and len(inputs) != rule.arity:
        raise InvalidShape(f"{name} takes {rule.arity} inputs, got {len(inputs)}")
    if not inputs:
        raise InvalidShape(f"{name} needs at least one input")
    tracked = any(x.tracks_grad for x in inputs)
    arrays = [x.data for x in inputs]

    if name == "split":
        return _split(inputs[0], attrs, tracked)

    # overflow surfaces as NumericOverflow below rather than a numpy warning
    with np.errstate(over="ignore", invalid="ignore"):
        out_arr, saved = rule.forward(arrays, attrs)
    _check_finite(out_arr, name)
    if not tracked:
        return Tensor._wrap(out_arr)
    return _record(name, inputs, attrs, saved, out_arr)


def _split(x: Tensor, attrs, tracked):
    axis = attrs.get("axis", -1) % x.ndim
    sections = [int(s) for s in attrs["sections"]]
    if any(s < 0 for s in sections) or sum(sections) != x.shape[axis]:
        raise InvalidShape(f"split sections {sections} do not cover axis of size {x.shape[axis]}")
    outs = []
    start = 0
    for s in sections:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, start + s)
        piece = x.data[tuple(idx)]
        if tracked:
            outs.append(_record("split", [x], attrs, (axis, start, start + s, x.shape), piece))
        else:
            outs.append(Tensor._wrap(piece))
        start += s
    return outs


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf with ``requires_grad`` reachable from ``loss``.

    Leaf gradients accumulate into an existing ``.grad``.  The recorded graph
    is released afterwards; a second call over it raises :class:`TapeConsumed`.
    """
    if loss.size != 1:
        raise InvalidShape(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_output(loss)
    if any(e.consumed for e in tape.entries):
        raise TapeConsumed("graph already back-propagated; rebuild it with a new forward pass")

    adj = {loss._entry.seq: np.ones(loss.shape, dtype=loss.dtype)}
    leaves = {}
    for e in reversed(tape.entries):
        g = adj.pop(e.seq, None)
        if g is None:
            continue
        needs = [x.tracks_grad for x in e.inputs]
        grads = _RULES[e.prim].backward(g, e.saved, e.attrs, needs)
        for x, gx in zip(e.inputs, grads):
            if gx is None or not x.tracks_grad:
                continue
            if x._entry is not None:
                k = x._entry.seq
                adj[k] = adj[k] + gx if k in adj else gx
            else:
                k = id(x)
                if k in leaves:
                    leaves[k] = (x, leaves[k][1] + gx)
                else:
                    leaves[k] = (x, gx)
    for e in tape.entries:
        e.consumed = True
        e.saved = None
    for x, gx in leaves.values():
        gx = np.asarray(gx, dtype=x.dtype).reshape(x.shape)
        x.grad = gx if x.grad is None else x.grad + gx


def finite_diff_check(f: Callable[[Tensor], Tensor], point: Tensor, h: float = 1e-3,
                      coords=None) -> float:
    """Max relative error between autodiff and central differences of ``f``.

    Runs in float64.  ``coords`` optionally restricts the comparison to a
    subset of flat indices of ``point``.
    """
    with precision(np.float64):
        base = np.array(point.data, dtype=np.float64)
        w = Tensor(base, requires_grad=True)
        out = f(w)
        if out.size != 1:
            raise InvalidShape("finite_diff_check needs a scalar-valued function")
        _check_finite(out.data, "finite_diff_check")
        if out._entry is None:
            auto = np.zeros_like(base)
        else:
            backward(out)
            auto = w.grad if w.grad is not None else np.zeros_like(base)
        flat_auto = auto.reshape(-1)
        idx = range(base.size) if coords is None else coords
        worst = 0.0
        for i in idx:
            plus = base.copy().reshape(-1)
            minus = base.copy().reshape(-1)
            plus[i] += h
            minus[i] -= h
            fp = f(Tensor(plus.reshape(base.shape))).item()
            fm = f(Tensor(minus.reshape(base.shape))).item()
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericOverflow("non-finite evaluation in finite_diff_check")
            cd = (fp - fm) / (2.0 * h)
            worst = max(worst, abs(flat_auto[i] - cd) / (abs(cd) + 1e-8))
        return worst


# convenience wrappers used throughout the package

def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def add(a, b):
    return apply_primitive("add", [a, b])


def mul(a, b):
    return apply_primitive("mul", [a, b])


def scale(x, c):
    return apply_primitive("scale", [x], {"c": float(c)})


def concat(xs, axis=-1):
    return apply_primitive("concat", list(xs), {"axis": axis})


def split(x, sections, axis=-1):
    return apply_primitive("split", [x], {"sections": list(sections), "axis": axis})


def transpose(x, axes=None):
    return apply_primitive("transpose", [x], {"axes": axes})


def reshape(x, shape):
    return apply_primitive("reshape", [x], {"shape": tuple(shape)})


def layernorm(x, gain, bias, eps=1e-6):
    return apply_primitive("layernorm", [x, gain, bias], {"eps": eps})


def softmax(x):
    return apply_primitive("softmax", [x])


def gelu(x, approximate="tanh"):
    return apply_primitive("gelu", [x], {"approximate": approximate})


def mean(x, axis=None, keepdims=False):
    return apply_primitive("mean", [x], {"axis": axis, "keepdims": keepdims})


def mse(a, b):
    return apply_primitive("mse", [a, b])
