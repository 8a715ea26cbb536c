"""Define-by-run reverse-mode differentiation over dense float64 arrays.

Every differentiable operation is a *primitive*: a forward rule computed
with numpy plus an adjoint (vector-Jacobian product) closure recorded on
the output tensor.  ``backward`` walks the recorded graph in reverse
topological order and sums adjoints over all paths.

Primitives are registered in :data:`PRIMITIVES` together with a sampler
that builds a random, non-degenerate test problem, so the whole set can be
verified against central finite differences (see :func:`gradcheck_all`).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

__all__ = [
    "Tensor", "Node", "tensor", "as_tensor", "backward", "trace",
    "check_gradient", "gradcheck_all", "PRIMITIVES",
]


class Node:
    """One executed primitive: its name, input tensors and adjoint rule."""

    __slots__ = ("op", "inputs", "vjp")

    def __init__(self, op: str, inputs: tuple, vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp

    def __repr__(self):
        return f"Node({self.op})"


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "__weakref__")
    # make ndarray <op> Tensor dispatch to the Tensor reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None

    # -- introspection -------------------------------------------------
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
    def is_leaf(self):
        return self.node is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # -- operators -----------------------------------------------------
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

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return tsum(self, axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _value(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _record(op: str, out: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    result = Tensor(out)
    if any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.node = Node(op, inputs, vjp)
    return result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Registry

@dataclass
class Primitive:
    name: str
    fn: Callable
    sampler: Callable | None = None


PRIMITIVES: dict[str, Primitive] = {}


def primitive(name: str):
    def deco(fn):
        PRIMITIVES[name] = Primitive(name, fn)
        return fn
    return deco


def sampler(name: str):
    """Attach a test-problem generator ``rng -> list[(x0, f)]`` to a primitive."""
    def deco(fn):
        PRIMITIVES[name].sampler = fn
        return fn
    return deco


# ---------------------------------------------------------------------------
# Elementwise arithmetic

@primitive("add")
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


@primitive("sub")
def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


@primitive("mul")
def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    return _record("mul", av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


@primitive("div")
def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    out = av / bv
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / bv, av.shape),
                              _unbroadcast(-g * out / bv, bv.shape)))


@primitive("neg")
def neg(a):
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


@primitive("power")
def power(a, exponent: float):
    a = as_tensor(a)
    av = a.data
    p = float(exponent)
    return _record("power", av ** p, (a,), lambda g: (g * p * av ** (p - 1.0),))


@primitive("exp")
def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


@primitive("log")
def log(a):
    a = as_tensor(a)
    av = a.data
    return _record("log", np.log(av), (a,), lambda g: (g / av,))


@primitive("sqrt")
def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


@primitive("sin")
def sin(a):
    a = as_tensor(a)
    av = a.data
    return _record("sin", np.sin(av), (a,), lambda g: (g * np.cos(av),))


@primitive("cos")
def cos(a):
    a = as_tensor(a)
    av = a.data
    return _record("cos", np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def _sigmoid(x):
    # numerically stable for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@primitive("sigmoid")
def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


@primitive("softplus")
def softplus(a):
    """log(1 + exp(a)) without overflow."""
    a = as_tensor(a)
    av = a.data
    out = np.logaddexp(0.0, av)
    return _record("softplus", out, (a,), lambda g: (g * _sigmoid(av),))


@primitive("relu")
def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


@primitive("abs")
def tabs(a):
    a = as_tensor(a)
    s = np.sign(a.data)
    return _record("abs", np.abs(a.data), (a,), lambda g: (g * s,))


@primitive("maximum")
def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    return _record("maximum", np.where(take_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * take_a, a.shape),
                              _unbroadcast(g * ~take_a, b.shape)))


@primitive("minimum")
def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    return _record("minimum", np.where(take_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * take_a, a.shape),
                              _unbroadcast(g * ~take_a, b.shape)))


@primitive("clip")
def clip(a, lo=None, hi=None):
    """Clamp to constant bounds; the adjoint passes through the open interior only."""
    a = as_tensor(a)
    av = a.data
    out = np.clip(av, lo, hi)
    mask = np.ones(av.shape, dtype=bool)
    if lo is not None:
        mask &= av > lo
    if hi is not None:
        mask &= av < hi
    return _record("clip", out, (a,), lambda g: (g * mask,))


@primitive("where")
def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    return _record("where", np.where(cond, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                              _unbroadcast(np.where(cond, 0.0, g), b.shape)))


# ---------------------------------------------------------------------------
# Reductions and shape manipulation

@primitive("sum")
def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _record("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    return as_tensor(a).mean(axis=axis, keepdims=keepdims)


@primitive("reshape")
def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


@primitive("transpose")
def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _record("transpose", np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inv),))


@primitive("index")
def index(a, idx):
    """``a[idx]`` for basic or advanced indices; repeated indices accumulate."""
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        raise ShapeError("index must be an integer array or slice, not a Tensor")
    shape = a.shape
    flat_gather = (a.ndim == 1 and isinstance(idx, np.ndarray)
                   and idx.ndim == 1 and idx.dtype.kind in "iu")

    def vjp(g):
        if flat_gather:
            return (np.bincount(idx, weights=g, minlength=shape[0]).astype(np.float64),)
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)
    return _record("index", a.data[idx], (a,), vjp)


@primitive("segment_sum")
def segment_sum(a, segment_ids, num_segments: int):
    """Sum rows of ``a`` into ``num_segments`` buckets (scatter-add along axis 0)."""
    a = as_tensor(a)
    ids = np.asarray(segment_ids, dtype=np.intp)
    if a.ndim == 1:
        out = np.bincount(ids, weights=a.data, minlength=num_segments).astype(np.float64)
    else:
        out = np.zeros((num_segments,) + a.shape[1:])
        np.add.at(out, ids, a.data)
    return _record("segment_sum", out, (a,), lambda g: (g[ids],))


@primitive("concatenate")
def concatenate(tensors: Sequence, axis: int = 0):
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _record("concatenate", np.concatenate([t.data for t in ts], axis=axis), ts,
                   lambda g: tuple(np.split(g, splits, axis=axis)))


@primitive("stack")
def stack(tensors: Sequence, axis: int = 0):
    ts = tuple(as_tensor(t) for t in tensors)
    n = len(ts)
    return _record("stack", np.stack([t.data for t in ts], axis=axis), ts,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# ---------------------------------------------------------------------------
# Linear algebra

@primitive("matmul")
def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    if av.ndim != 2 or bv.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    return _record("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


@primitive("cross")
def cross(a, b):
    """Cross product along the last axis (length 3)."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    return _record("cross", np.cross(av, bv), (a, b),
                   lambda g: (_unbroadcast(np.cross(bv, g), av.shape),
                              _unbroadcast(np.cross(g, av), bv.shape)))


@primitive("conv2d")
def conv2d(x, w, padding: int = 1):
    """2-D cross-correlation, stride 1, zero padding.

    x: (N, C, H, W); w: (O, C, kh, kw) -> (N, O, H + 2p - kh + 1, W + 2p - kw + 1)
    """
    x, w = as_tensor(x), as_tensor(w)
    xv, wv = x.data, w.data
    if xv.ndim != 4 or wv.ndim != 4 or xv.shape[1] != wv.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {xv.shape}, weights {wv.shape}")
    p = padding
    kh, kw = wv.shape[2:]
    xp = np.pad(xv, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # win: (N, C, Ho, Wo, kh, kw)
    out = np.einsum("nchwij,ocij->nohw", win, wv, optimize=True)
    ho, wo = out.shape[2:]

    def vjp(g):
        gw = np.einsum("nohw,nchwij->ocij", g, win, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + ho, j:j + wo] += np.einsum("nohw,oc->nchw", g, wv[:, :, i, j], optimize=True)
        gx = gxp[:, :, p:p + xv.shape[2], p:p + xv.shape[3]] if p else gxp
        return gx, gw
    return _record("conv2d", out, (x, w), vjp)


# ---------------------------------------------------------------------------
# Composite helpers (built from primitives, no own adjoint)

def log10(a):
    return log(a) * (1.0 / np.log(10.0))


def dot(a, b, axis=-1):
    return tsum(mul(a, b), axis=axis)


def norm(a, axis=-1):
    return sqrt(tsum(mul(a, a), axis=axis))


# ---------------------------------------------------------------------------
# Backward pass

def trace(root: Tensor) -> list[Tensor]:
    """Recorded (non-leaf) tensors reachable from ``root``, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        t, finished = stack.pop()
        if finished:
            order.append(t)
            continue
        if t.node is None or id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for inp in reversed(t.node.inputs):
            if inp.node is not None and id(inp) not in seen:
                stack.append((inp, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradient of scalar ``root`` with respect to every leaf that requires grad."""
    root = as_tensor(root)
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    leaves: dict[int, Tensor] = {}
    for t in reversed(trace(root)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        for inp, gi in zip(t.node.inputs, t.node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if inp.node is None:
                leaves[key] = inp
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=np.float64, copy=True)
    if root.node is None:
        leaves[id(root)] = root
    return {leaves[k]: grads[k] for k in leaves}


def grad(f: Callable[[Tensor], Tensor], x) -> np.ndarray:
    """Convenience: gradient of scalar ``f`` at ``x``."""
    xt = Tensor(_value(x).copy(), requires_grad=True)
    out = backward(f(xt))
    return out.get(xt, np.zeros(xt.shape))


def check_gradient(f: Callable[[Tensor], Tensor], x, epsilon: float = 1e-6) -> float:
    """Max elementwise relative error between autodiff and central differences.

    Error per coordinate is ``|g_ad - g_fd| / (|g_fd| + 1e-8)``.
    """
    x0 = _value(x).astype(np.float64).copy()
    g_ad = grad(f, x0)
    flat = x0.reshape(-1)
    g_fd = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = float(_value(f(Tensor(x0))))
        flat[i] = orig - epsilon
        fm = float(_value(f(Tensor(x0))))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        g_fd[i] = (fp - fm) / (2.0 * epsilon)
    g_ad = g_ad.reshape(-1)
    if not np.all(np.isfinite(g_ad)):
        bad = int(np.flatnonzero(~np.isfinite(g_ad))[0])
        raise NumericError(f"non-finite autodiff gradient at coordinate {bad}")
    return float(np.max(np.abs(g_ad - g_fd) / (np.abs(g_fd) + 1e-8), initial=0.0))


# ---------------------------------------------------------------------------
# Test problems for every primitive.  Each returns a list of (x0, f) pairs,
# one per differentiable input; f reduces the primitive output to a scalar
# with fixed random weights so every output element is exercised.

def _weighted(rng, f):
    cache = {}

    def g(t):
        out = f(t)
        if "w" not in cache:
            cache["w"] = rng.uniform(0.5, 1.5, size=out.shape)
        return tsum(mul(out, cache["w"]))
    return g


def _binary(rng, op, a, b):
    return [(a, _weighted(rng, lambda t: op(t, b))),
            (b, _weighted(rng, lambda t: op(a, t)))]


@sampler("add")
def _(rng):
    return _binary(rng, add, rng.normal(size=(3, 4)), rng.normal(size=(1, 4)))


@sampler("sub")
def _(rng):
    return _binary(rng, sub, rng.normal(size=(3, 4)), rng.normal(size=(3, 1)))


@sampler("mul")
def _(rng):
    return _binary(rng, mul, rng.normal(size=(3, 4)), rng.normal(size=(4,)))


@sampler("div")
def _(rng):
    return _binary(rng, div, rng.normal(size=(3, 4)), rng.uniform(0.5, 2.0, size=(3, 4)))


@sampler("neg")
def _(rng):
    return [(rng.normal(size=5), _weighted(rng, neg))]


@sampler("power")
def _(rng):
    return [(rng.uniform(0.5, 2.0, size=5), _weighted(rng, lambda t: power(t, 2.7)))]


@sampler("exp")
def _(rng):
    return [(rng.normal(size=5), _weighted(rng, exp))]


@sampler("log")
def _(rng):
    return [(rng.uniform(0.5, 3.0, size=5), _weighted(rng, log))]


@sampler("sqrt")
def _(rng):
    return [(rng.uniform(0.5, 3.0, size=5), _weighted(rng, sqrt))]


@sampler("sin")
def _(rng):
    return [(rng.normal(size=5), _weighted(rng, sin))]


@sampler("cos")
def _(rng):
    return [(rng.normal(size=5), _weighted(rng, cos))]


@sampler("sigmoid")
def _(rng):
    return [(rng.normal(scale=3.0, size=6), _weighted(rng, sigmoid))]


@sampler("softplus")
def _(rng):
    return [(rng.normal(scale=3.0, size=6), _weighted(rng, softplus))]


def _away_from_zero(rng, size, gap=0.1):
    x = rng.uniform(gap, 2.0, size=size)
    return x * rng.choice([-1.0, 1.0], size=size)


@sampler("relu")
def _(rng):
    return [(_away_from_zero(rng, 6), _weighted(rng, relu))]


@sampler("abs")
def _(rng):
    return [(_away_from_zero(rng, 6), _weighted(rng, tabs))]


@sampler("maximum")
def _(rng):
    a = rng.normal(size=6)
    return _binary(rng, maximum, a, a + _away_from_zero(rng, 6))


@sampler("minimum")
def _(rng):
    a = rng.normal(size=6)
    return _binary(rng, minimum, a, a + _away_from_zero(rng, 6))


@sampler("clip")
def _(rng):
    return [(_away_from_zero(rng, 8, gap=0.1) * 1.5, _weighted(rng, lambda t: clip(t, -1.0, 1.0)))]


@sampler("where")
def _(rng):
    cond = np.array([True, False, True, True, False, False])
    return _binary(rng, lambda a, b: where(cond, a, b), rng.normal(size=6), rng.normal(size=6))


@sampler("sum")
def _(rng):
    return [(rng.normal(size=(3, 4)), _weighted(rng, lambda t: tsum(t, axis=1)))]


@sampler("reshape")
def _(rng):
    return [(rng.normal(size=(3, 4)), _weighted(rng, lambda t: reshape(t, (2, 6))))]


@sampler("transpose")
def _(rng):
    return [(rng.normal(size=(2, 3, 4)), _weighted(rng, lambda t: transpose(t, (2, 0, 1))))]


@sampler("index")
def _(rng):
    idx = np.array([0, 2, 2, 4, 1])
    return [(rng.normal(size=(5, 2)), _weighted(rng, lambda t: index(t, idx)))]


@sampler("segment_sum")
def _(rng):
    ids = np.array([0, 2, 2, 1, 0, 3])
    return [(rng.normal(size=6), _weighted(rng, lambda t: segment_sum(t, ids, 4))),
            (rng.normal(size=(6, 2)), _weighted(rng, lambda t: segment_sum(t, ids, 4)))]


@sampler("concatenate")
def _(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
    return _binary(rng, lambda x, y: concatenate([x, y], axis=0), a, b)


@sampler("stack")
def _(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    return _binary(rng, lambda x, y: stack([x, y], axis=1), a, b)


@sampler("matmul")
def _(rng):
    return _binary(rng, matmul, rng.normal(size=(3, 4)), rng.normal(size=(4, 2)))


@sampler("cross")
def _(rng):
    return _binary(rng, cross, rng.normal(size=(4, 3)), rng.normal(size=(4, 3)))


@sampler("conv2d")
def _(rng):
    return _binary(rng, conv2d, rng.normal(size=(2, 3, 5, 6)), rng.normal(size=(4, 3, 3, 3)))


def gradcheck_all(seed: int = 0, epsilon: float = 1e-6, extra: dict | None = None) -> dict[str, float]:
    """Run ``check_gradient`` on every registered primitive; returns name -> max error.

    ``extra`` maps additional names to samplers with the same contract, used to
    fold pipeline-level checks into the same report.
    """
    rng = np.random.default_rng(seed)
    samplers = {name: p.sampler for name, p in PRIMITIVES.items()}
    samplers.update(extra or {})
    report = {}
    for name, make in samplers.items():
        if make is None:
            raise ContractError(f"primitive {name!r} has no registered test problem")
        report[name] = max(check_gradient(f, x0, epsilon) for x0, f in make(rng))
    return report
