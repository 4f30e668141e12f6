"""Tape-based reverse-mode automatic differentiation.

Values are numpy arrays (0-d arrays for scalars); every primitive is
elementwise or a small linear-algebra op, so a single tape can carry a whole
batch of propagation paths. Complex quantities are pairs of real values
(:class:`CVar`), which keeps the reverse sweep purely real.

Example
-------
>>> tape = Tape()
>>> x = tape.param("x", 3.0)
>>> tape.backward(x * x)["x"]
array(6.)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .constants import SQRT_FLOOR


class TapeError(RuntimeError):
    """Misuse of the tape (mixing tapes, bad partials, unknown parameter)."""


class GradientError(FloatingPointError):
    """A non-finite value appeared on the tape."""

    def __init__(self, message: str, node_id: int | None = None, kind: str | None = None):
        super().__init__(message)
        self.node_id = node_id
        self.kind = kind


class Var:
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("tape", "id", "value")
    __array_priority__ = 1000
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", node_id: int, value: np.ndarray):
        self.tape = tape
        self.id = node_id
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(id={self.id}, value={self.value!r})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


@dataclass
class Tape:
    """Append-only record of primitives.

    Parents always precede children, so a single reverse sweep over node ids
    visits every node once in topological order.
    """

    check_finite: bool = True
    kinds: list = field(default_factory=list)
    parents: list = field(default_factory=list)
    vjps: list = field(default_factory=list)
    shapes: list = field(default_factory=list)
    finite: list = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.kinds)

    def _append(self, kind, parent_ids, vjps, value) -> Var:
        node_id = len(self.kinds)
        value = np.asarray(value, dtype=float)
        ok = bool(np.all(np.isfinite(value)))
        if self.check_finite and not ok:
            raise GradientError(f"non-finite value produced by '{kind}' at node {node_id}", node_id, kind)
        self.finite.append(ok)
        self.kinds.append(kind)
        self.parents.append(tuple(parent_ids))
        self.vjps.append(tuple(vjps))
        self.shapes.append(value.shape)
        return Var(self, node_id, value)

    def param(self, name: str, value) -> Var:
        """Create a trainable leaf addressed by ``name``."""
        if name in self.params:
            raise TapeError(f"parameter '{name}' already on tape")
        var = self._append("param", (), (), np.array(value, dtype=float))
        self.params[name] = var.id
        return var

    def leaf(self, value) -> Var:
        """A non-trainable leaf (useful when a constant must live on the tape)."""
        return self._append("leaf", (), (), np.array(value, dtype=float))

    def record(self, kind: str, inputs: Sequence[Var], value, partials: Sequence) -> Var:
        """Record a primitive.

        ``partials[k]`` is either an array of local derivatives d(value)/d(inputs[k])
        (elementwise, broadcast against the output) or a callable mapping the
        output cotangent to the input cotangent.
        """
        if len(partials) != len(inputs):
            raise TapeError(f"{kind}: {len(inputs)} inputs but {len(partials)} partials")
        for v in inputs:
            if not isinstance(v, Var):
                raise TapeError(f"{kind}: inputs must be Vars, got {type(v).__name__}")
            if v.tape is not self:
                raise TapeError(f"{kind}: input from a different tape")
        return self._append(kind, [v.id for v in inputs], partials, value)

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` w.r.t. every parameter on the tape."""
        if loss.tape is not self:
            raise TapeError("loss belongs to a different tape")
        if np.size(loss.value) != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if not np.all(np.isfinite(loss.value)):
            raise GradientError(f"loss is {loss.value}; {self._first_nonfinite()}", loss.id, self.kinds[loss.id])
        grads: list = [None] * (loss.id + 1)
        grads[loss.id] = np.ones(self.shapes[loss.id])
        for node in range(loss.id, -1, -1):
            g = grads[node]
            if g is None:
                continue
            for pid, vjp in zip(self.parents[node], self.vjps[node]):
                if callable(vjp):
                    contrib = vjp(g)
                else:
                    contrib = _unbroadcast(g * vjp, self.shapes[pid])
                grads[pid] = contrib if grads[pid] is None else grads[pid] + contrib
        out = {}
        for name, pid in self.params.items():
            g = grads[pid] if pid < len(grads) else None
            out[name] = np.zeros(self.shapes[pid]) if g is None else np.asarray(g, dtype=float)
        return out

    def _first_nonfinite(self) -> str:
        for node, ok in enumerate(self.finite):
            if not ok:
                return f"first non-finite value at node {node} ('{self.kinds[node]}')"
        return "no non-finite node recorded"


def backward(loss: Var) -> dict[str, np.ndarray]:
    return loss.tape.backward(loss)


# ---------------------------------------------------------------------------
# helpers

def isvar(x) -> bool:
    return isinstance(x, Var)


def value(x):
    """Underlying numpy value of a Var or constant."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("operands live on different tapes")
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _binary(kind, a, b, val, da, db):
    tape = _tape_of(a, b)
    ins, parts = [], []
    if isvar(a):
        ins.append(a)
        parts.append(da)
    if isvar(b):
        ins.append(b)
        parts.append(db)
    return tape.record(kind, ins, val, parts)


def _unary(kind, a, val, da):
    return a.tape.record(kind, [a], val, [da])


# ---------------------------------------------------------------------------
# elementwise primitives

def add(a, b):
    if not (isvar(a) or isvar(b)):
        return value(a) + value(b)
    one = np.ones(())
    return _binary("add", a, b, value(a) + value(b), one, one)


def sub(a, b):
    if not (isvar(a) or isvar(b)):
        return value(a) - value(b)
    return _binary("sub", a, b, value(a) - value(b), np.ones(()), -np.ones(()))


def mul(a, b):
    va, vb = value(a), value(b)
    if not (isvar(a) or isvar(b)):
        return va * vb
    return _binary("mul", a, b, va * vb, vb, va)


def div(a, b):
    va, vb = value(a), value(b)
    if not (isvar(a) or isvar(b)):
        return va / vb
    out = va / vb
    return _binary("div", a, b, out, 1.0 / vb, -out / vb)


def neg(a):
    if not isvar(a):
        return -value(a)
    return _unary("neg", a, -a.value, -np.ones(()))


def exp(a):
    if not isvar(a):
        return np.exp(value(a))
    out = np.exp(a.value)
    return _unary("exp", a, out, out)


def expm1(a):
    if not isvar(a):
        return np.expm1(value(a))
    return _unary("expm1", a, np.expm1(a.value), np.exp(a.value))


def log(a):
    if not isvar(a):
        return np.log(value(a))
    return _unary("log", a, np.log(a.value), 1.0 / a.value)


def sqrt(a, floor: float = SQRT_FLOOR):
    """Square root with the argument clamped below at ``floor``."""
    if not isvar(a):
        return np.sqrt(np.maximum(value(a), floor))
    clamped = np.maximum(a.value, floor)
    out = np.sqrt(clamped)
    return _unary("sqrt", a, out, np.where(a.value > floor, 0.5 / out, 0.0))


def sin(a):
    if not isvar(a):
        return np.sin(value(a))
    return _unary("sin", a, np.sin(a.value), np.cos(a.value))


def cos(a):
    if not isvar(a):
        return np.cos(value(a))
    return _unary("cos", a, np.cos(a.value), -np.sin(a.value))


def power(a, p: float):
    """``a ** p`` for a constant exponent."""
    if isvar(p):
        raise TapeError("power: exponent must be a constant")
    if not isvar(a):
        return value(a) ** p
    out = a.value ** p
    return _unary("power", a, out, p * a.value ** (p - 1))


def sigmoid(a):
    if not isvar(a):
        return _np_sigmoid(value(a))
    out = _np_sigmoid(a.value)
    return _unary("sigmoid", a, out, out * (1.0 - out))


def _np_sigmoid(x):
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def relu(a):
    if not isvar(a):
        return np.maximum(value(a), 0.0)
    return _unary("relu", a, np.maximum(a.value, 0.0), (a.value > 0).astype(float))


def absolute(a):
    if not isvar(a):
        return np.abs(value(a))
    return _unary("abs", a, np.abs(a.value), np.sign(a.value))


def where(cond, a, b):
    """Select ``a`` where ``cond`` else ``b``; gradient flows only to the chosen branch."""
    cond = np.asarray(cond, dtype=bool)
    va, vb = value(a), value(b)
    out = np.where(cond, va, vb)
    if not (isvar(a) or isvar(b)):
        return out
    return _binary("where", a, b, out, cond.astype(float), (~cond).astype(float))


# ---------------------------------------------------------------------------
# structural primitives

def vsum(a, axis=None, keepdims=False):
    if not isvar(a):
        return np.sum(value(a), axis=axis, keepdims=keepdims)
    shape = a.shape
    out = np.sum(a.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _unary("sum", a, out, vjp)


def mean(a, axis=None):
    n = np.size(value(a)) if axis is None else np.shape(value(a))[axis]
    return vsum(a, axis=axis) / float(n)


def dot(a, b, axis=-1):
    """Inner product along ``axis``."""
    return vsum(mul(a, b), axis=axis)


def reshape(a, shape):
    if not isvar(a):
        return np.reshape(value(a), shape)
    old = a.shape
    return _unary("reshape", a, np.reshape(a.value, shape), lambda g: np.reshape(g, old))


def transpose(a):
    if not isvar(a):
        return np.transpose(value(a))
    return _unary("transpose", a, np.transpose(a.value), lambda g: np.transpose(g))


def getitem(a, index):
    if not isvar(a):
        return value(a)[index]
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return out

    return _unary("getitem", a, a.value[index], vjp)


def take(a, indices, axis=0):
    """Gather along ``axis`` (repeated indices accumulate in the backward pass)."""
    indices = np.asarray(indices, dtype=int)
    if not isvar(a):
        return np.take(value(a), indices, axis=axis)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0) if indices.ndim == 1 else g)
        return out

    return _unary("take", a, np.take(a.value, indices, axis=axis), vjp)


def stack(items: Sequence, axis: int = 0):
    vals = [value(x) for x in items]
    out = np.stack(vals, axis=axis)
    tape = _tape_of(*items)
    if tape is None:
        return out
    ins, parts = [], []
    for k, x in enumerate(items):
        if isvar(x):
            ins.append(x)
            parts.append(lambda g, k=k: np.take(g, k, axis=axis))
    return tape.record("stack", ins, out, parts)


def concat(items: Sequence, axis: int = 0):
    vals = [np.atleast_1d(value(x)) for x in items]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*items)
    if tape is None:
        return out
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    ins, parts = [], []
    for k, x in enumerate(items):
        if isvar(x):
            lo, hi, shp = bounds[k], bounds[k + 1], x.shape
            ins.append(x)
            parts.append(lambda g, lo=lo, hi=hi, shp=shp: np.take(g, np.arange(lo, hi), axis=axis).reshape(shp))
    return tape.record("concat", ins, out, parts)


def matmul(a, b):
    va, vb = value(a), value(b)
    out = va @ vb
    if not (isvar(a) or isvar(b)):
        return out
    sa, sb = va.shape, vb.shape
    # promote vectors to matrices so one batched rule covers every case
    a2 = va[None, :] if va.ndim == 1 else va
    b2 = vb[:, None] if vb.ndim == 1 else vb

    def _promote_g(g):
        g = np.asarray(g)
        if va.ndim == 1:
            g = np.expand_dims(g, -2 if vb.ndim > 1 else 0)
        if vb.ndim == 1:
            g = g[..., None]
        return g

    def vjp_a(g):
        ga = _promote_g(g) @ np.swapaxes(b2, -1, -2)
        if va.ndim == 1:
            ga = ga[..., 0, :]
        return _unbroadcast(ga, sa)

    def vjp_b(g):
        gb = np.swapaxes(a2, -1, -2) @ _promote_g(g)
        if vb.ndim == 1:
            gb = gb[..., 0]
        return _unbroadcast(gb, sb)

    return _binary("matmul", a, b, out, vjp_a, vjp_b)


def softmax(logits, axis=-1):
    z = value(logits)
    shifted = logits - np.max(z, axis=axis, keepdims=True)
    e = exp(shifted)
    return e / vsum(e, axis=axis, keepdims=True)


def normalize(v, axis=-1):
    """Unit-normalize along ``axis``."""
    return v / sqrt(vsum(v * v, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# complex numbers as real pairs

@dataclass
class CVar:
    re: object
    im: object

    __array_ufunc__ = None  # make numpy defer to the reflected operators

    @staticmethod
    def const(z) -> "CVar":
        z = np.asarray(z, dtype=complex)
        return CVar(z.real.copy(), z.imag.copy())

    @property
    def shape(self):
        return np.broadcast_shapes(np.shape(value(self.re)), np.shape(value(self.im)))

    def numpy(self) -> np.ndarray:
        return value(self.re) + 1j * value(self.im)

    def __add__(self, other):
        other = _as_c(other)
        return CVar(add(self.re, other.re), add(self.im, other.im))

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_c(other)
        return CVar(sub(self.re, other.re), sub(self.im, other.im))

    def __rsub__(self, other):
        return _as_c(other) - self

    def __neg__(self):
        return CVar(neg(self.re), neg(self.im))

    def __mul__(self, other):
        if isinstance(other, (Var, float, int)) or (isinstance(other, np.ndarray) and not np.iscomplexobj(other)):
            return CVar(mul(self.re, other), mul(self.im, other))
        other = _as_c(other)
        return CVar(sub(mul(self.re, other.re), mul(self.im, other.im)),
                    add(mul(self.re, other.im), mul(self.im, other.re)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (Var, float, int)) or (isinstance(other, np.ndarray) and not np.iscomplexobj(other)):
            return CVar(div(self.re, other), div(self.im, other))
        other = _as_c(other)
        den = add(mul(other.re, other.re), mul(other.im, other.im))
        num = self * other.conj()
        return CVar(div(num.re, den), div(num.im, den))

    def __rtruediv__(self, other):
        return _as_c(other) / self

    def conj(self) -> "CVar":
        return CVar(self.re, neg(self.im))

    def abs2(self):
        return add(mul(self.re, self.re), mul(self.im, self.im))

    def abs(self):
        return sqrt(self.abs2())

    def sum(self, axis=None):
        return CVar(vsum(self.re, axis=axis), vsum(self.im, axis=axis))

    def take(self, indices, axis=0) -> "CVar":
        return CVar(take(self.re, indices, axis), take(self.im, indices, axis))

    def __getitem__(self, index) -> "CVar":
        return CVar(getitem(self.re, index) if isvar(self.re) else value(self.re)[index],
                    getitem(self.im, index) if isvar(self.im) else value(self.im)[index])


def _as_c(x) -> CVar:
    if isinstance(x, CVar):
        return x
    if isinstance(x, Var):
        return CVar(x, np.zeros(()))
    return CVar.const(x)


def csqrt(z: CVar) -> CVar:
    """Principal square root (non-negative real part).

    Uses im = y / (2 re), which is exact and smooth whenever the real part of
    the result is positive (always the case for the Fresnel argument).
    """
    r = sqrt(z.abs2())
    re = sqrt((r + z.re) * 0.5)
    return CVar(re, div(z.im, re * 2.0))


def cexp_j(phase) -> CVar:
    """e^{j·phase} for a real (possibly Var) phase."""
    return CVar(cos(phase), sin(phase))


def cmatmul(a: CVar, m) -> CVar:
    """Complex ``a @ m`` where ``m`` is a constant complex array."""
    m = np.asarray(m)
    mr, mi = m.real, m.imag
    return CVar(sub(matmul(a.re, mr), matmul(a.im, mi)), add(matmul(a.re, mi), matmul(a.im, mr)))


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradcheckReport:
    """Per-parameter comparison of reverse-mode and central-difference gradients."""

    errors: dict
    analytic: dict
    numeric: dict
    nan_params: list
    step: float

    @property
    def max_rel_error(self) -> float:
        if not self.errors:
            return 0.0
        return float(max(np.max(e) if np.size(e) else 0.0 for e in self.errors.values()))

    @property
    def worst(self) -> str | None:
        if not self.errors:
            return None
        return max(self.errors, key=lambda k: np.max(self.errors[k]) if np.size(self.errors[k]) else 0.0)

    def to_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "worst_param": self.worst,
            "step": self.step,
            "nan_params": list(self.nan_params),
            "per_param": {k: float(np.max(v)) if np.size(v) else 0.0 for k, v in self.errors.items()},
        }


def relative_error(g_ad, g_fd, floor: float = 1e-12):
    g_ad, g_fd = np.asarray(g_ad, float), np.asarray(g_fd, float)
    return np.abs(g_ad - g_fd) / np.maximum(floor, np.abs(g_ad) + np.abs(g_fd))


def finite_diff_check(f: Callable[[dict], Var], point: dict, step: float = 1e-6, sample: int | None = None,
                      seed: int = 0, floor: float = 1e-12) -> GradcheckReport:
    """Compare ``backward`` against central differences.

    ``f`` maps a dict of parameter Vars (created on a fresh tape, one per key
    of ``point``) to a scalar Var. With ``sample`` only that many randomly
    chosen entries per parameter are differenced; the others report zero
    error and NaN numeric gradient. ``floor`` bounds the denominator of the
    relative error so gradients at round-off level do not dominate.
    """
    def evaluate(pt, want_grad):
        tape = Tape(check_finite=False)
        params = {k: tape.param(k, v) for k, v in pt.items()}
        loss = f(params)
        if not isvar(loss):
            return float(np.asarray(loss)), {k: np.zeros(np.shape(v)) for k, v in pt.items()}
        if not want_grad:
            return float(loss.value), None
        if not np.isfinite(loss.value):
            return float(loss.value), None
        return float(loss.value), tape.backward(loss)

    point = {k: np.array(v, dtype=float) for k, v in point.items()}
    base, analytic = evaluate(point, True)
    nan_params = []
    if analytic is None:
        analytic = {k: np.full(v.shape, np.nan) for k, v in point.items()}
        nan_params = list(point)
    numeric, errors = {}, {}
    rng = np.random.default_rng(seed)
    for name, x0 in point.items():
        fd = np.full(x0.shape, np.nan)
        entries = list(np.ndindex(x0.shape or ()))
        if sample is not None and len(entries) > sample:
            entries = [entries[i] for i in np.sort(rng.choice(len(entries), sample, replace=False))]
        checked = np.zeros(x0.shape, dtype=bool)
        for idx in entries:
            checked[idx] = True
            hi = {k: v.copy() for k, v in point.items()}
            lo = {k: v.copy() for k, v in point.items()}
            hi[name][idx] += step
            lo[name][idx] -= step
            fp, _ = evaluate(hi, False)
            fm, _ = evaluate(lo, False)
            fd[idx] = (fp - fm) / (2 * step)
        numeric[name] = fd
        err = np.where(checked, relative_error(analytic[name], np.where(checked, fd, 0.0), floor), 0.0)
        if not np.all(np.isfinite(err)):
            if name not in nan_params:
                nan_params.append(name)
            err = np.where(np.isfinite(err), err, np.inf)
        errors[name] = err
    return GradcheckReport(errors, analytic, numeric, nan_params, step)
