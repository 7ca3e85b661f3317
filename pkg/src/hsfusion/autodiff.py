"""Reverse-mode automatic differentiation over dense numpy-backed tensors.

A ``Tensor`` wraps an ndarray and doubles as a node in the computation
graph: each op records its parents and a closure that pushes the output
gradient back to them.  The tape is rebuilt on every forward pass; calling
``backward()`` on a scalar root walks the tape once in reverse
topological order.

Two float precisions are supported globally: f32 for training, f64 for
gradient verification.  There is no mixed precision; ``precision("f64")``
switches the mode for a ``with`` block.

Gradients accumulate by out-of-place addition, so no op ever mutates an
input array (value semantics).  Broadcasting is restricted to length-1
axes, numpy style.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError

_DTYPES = {"f32": np.float32, "f64": np.float64}
_mode = {"dtype": np.float32}


def set_dtype(name: str) -> None:
    if name not in _DTYPES:
        raise ContractError(f"unknown dtype mode {name!r}; use 'f32' or 'f64'")
    _mode["dtype"] = _DTYPES[name]


def get_dtype():
    return _mode["dtype"]


@contextmanager
def precision(name: str):
    """Temporarily switch the global float mode ('f32' or 'f64')."""
    old = _mode["dtype"]
    set_dtype(name)
    try:
        yield
    finally:
        _mode["dtype"] = old


def _asarray(data):
    arr = np.asarray(data, dtype=get_dtype())
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


class Tensor:
    """Dense array plus graph-node bookkeeping for reverse-mode AD."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, parents=(), op="leaf", requires_grad=False, backward=None):
        self.data = data if isinstance(data, np.ndarray) else _asarray(data)
        self.grad = None
        self.op = op
        if parents:
            requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        # prune the tape below nodes that cannot need gradients
        self._parents = tuple(p for p in parents if p.requires_grad) if requires_grad else ()
        self._backward = backward if (requires_grad and backward is not None) else None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, op="detach")

    # -- graph traversal ----------------------------------------------------

    def backward(self) -> None:
        """Reverse-accumulate d(self)/d(leaf) into every reachable .grad slot.

        The root must be scalar (size 1).  Parameters not reached by the
        graph keep whatever grad they had (zeros after ``zero_grad``).
        """
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar root")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes, keepdims)

    def max(self, axes=None, keepdims=False):
        return reduce_max(self, axes, keepdims)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast up from length 1."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcastable(sa, sb) -> bool:
    for a, b in zip(reversed(sa), reversed(sb)):
        if a != b and a != 1 and b != 1:
            return False
    return True


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "add")
    out = Tensor(a.data + b.data, (a, b), "add")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    out._backward = bw if out.requires_grad else None
    return out


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "sub")
    out = Tensor(a.data - b.data, (a, b), "sub")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    out._backward = bw if out.requires_grad else None
    return out


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)) and not isinstance(b, bool):
        return scale(a, b)
    if isinstance(a, (int, float)) and not isinstance(a, bool):
        return scale(b, a)
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "mul")
    out = Tensor(a.data * b.data, (a, b), "mul")

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    out._backward = bw if out.requires_grad else None
    return out


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "div")
    if np.any(b.data == 0):
        raise NonFiniteError("division by exact zero")
    out = Tensor(a.data / b.data, (a, b), "div")

    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    out._backward = bw if out.requires_grad else None
    return out


def scale(a, c: float) -> Tensor:
    a = _lift(a)
    c = float(c)
    out = Tensor(a.data * c, (a,), "scale")
    out._backward = (lambda g: _accum(a, g * c)) if out.requires_grad else None
    return out


def exp(a) -> Tensor:
    a = _lift(a)
    out = Tensor(np.exp(a.data), (a,), "exp")
    out._backward = (lambda g: _accum(a, g * out.data)) if out.requires_grad else None
    return out


def sin(a) -> Tensor:
    a = _lift(a)
    out = Tensor(np.sin(a.data), (a,), "sin")
    out._backward = (lambda g: _accum(a, g * np.cos(a.data))) if out.requires_grad else None
    return out


def cos(a) -> Tensor:
    a = _lift(a)
    out = Tensor(np.cos(a.data), (a,), "cos")
    out._backward = (lambda g: _accum(a, -g * np.sin(a.data))) if out.requires_grad else None
    return out


def power(a, p: float) -> Tensor:
    a = _lift(a)
    p = float(p)
    out = Tensor(a.data ** p, (a,), "pow")
    out._backward = (lambda g: _accum(a, g * p * a.data ** (p - 1.0))) if out.requires_grad else None
    return out


def absolute(a) -> Tensor:
    a = _lift(a)
    out = Tensor(np.abs(a.data), (a,), "abs")
    out._backward = (lambda g: _accum(a, g * np.sign(a.data))) if out.requires_grad else None
    return out


def sigmoid(a) -> Tensor:
    a = _lift(a)
    # stable two-sided form
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    s = s.astype(x.dtype, copy=False)
    out = Tensor(s, (a,), "sigmoid")
    out._backward = (lambda g: _accum(a, g * out.data * (1.0 - out.data))) if out.requires_grad else None
    return out


def tanh(a) -> Tensor:
    a = _lift(a)
    out = Tensor(np.tanh(a.data), (a,), "tanh")
    out._backward = (lambda g: _accum(a, g * (1.0 - out.data * out.data))) if out.requires_grad else None
    return out


def relu(a) -> Tensor:
    a = _lift(a)
    out = Tensor(np.maximum(a.data, 0.0), (a,), "relu")
    out._backward = (lambda g: _accum(a, g * (a.data > 0))) if out.requires_grad else None
    return out


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _lift(a)
    out = Tensor(np.where(a.data > 0, a.data, slope * a.data), (a,), "leaky_relu")

    def bw(g):
        _accum(a, g * np.where(a.data > 0, 1.0, slope))

    out._backward = bw if out.requires_grad else None
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1+tanh(c*(x+0.044715*x^3)))."""
    a = _lift(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t), (a,), "gelu")

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        _accum(a, g * da)

    out._backward = bw if out.requires_grad else None
    return out


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "gelu": gelu,
    "exp": exp,
    "scale": scale,
}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch-by-name front door for the pointwise op family."""
    if op not in _ELEMENTWISE:
        raise ContractError(f"unknown elementwise op {op!r}")
    fn = _ELEMENTWISE[op]
    return fn(a, b) if b is not None else fn(a)


# -- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with optional leading batch axis (numpy semantics)."""
    a, b = _lift(a), _lift(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul requires >= 2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner axes differ: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data), (a, b), "matmul")

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.shape))
        _accum(b, _unbroadcast(gb, b.shape))

    out._backward = bw if out.requires_grad else None
    return out


# -- reductions -------------------------------------------------------------


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(ax % ndim if -ndim <= ax < ndim else ax for ax in axes)
    for ax in axes:
        if not 0 <= ax < ndim:
            raise ShapeError(f"axis {ax} invalid for ndim {ndim}")
    return axes


def reduce_sum(a, axes=None, keepdims=False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axes, a.data.ndim)
    val = a.data.sum(axis=axes, keepdims=keepdims)
    out = Tensor(np.atleast_1d(val), (a,), "sum")

    def bw(g):
        gg = g.reshape(val.shape) if g.shape != val.shape else g
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        _accum(a, np.broadcast_to(gg, a.shape).copy())

    out._backward = bw if out.requires_grad else None
    return out


def reduce_mean(a, axes=None, keepdims=False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axes, a.data.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return scale(reduce_sum(a, axes, keepdims), 1.0 / n)


def reduce_max(a, axes=None, keepdims=False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axes, a.data.ndim)
    val = a.data.max(axis=axes, keepdims=True)
    out_val = val if keepdims else val.squeeze(axis=axes)
    out = Tensor(np.atleast_1d(out_val), (a,), "max")

    def bw(g):
        gg = g.reshape(out_val.shape) if g.shape != out_val.shape else g
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        mask = (a.data == val)
        counts = mask.sum(axis=axes, keepdims=True)
        _accum(a, mask * (gg / counts))

    out._backward = bw if out.requires_grad else None
    return out


def reduce(op: str, a, axes=None, keepdims=False) -> Tensor:
    fns = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}
    if op not in fns:
        raise ContractError(f"unknown reduce op {op!r}")
    return fns[op](a, axes, keepdims)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis (max-subtraction)."""
    a = _lift(a)
    if np.isnan(a.data).any():
        raise NonFiniteError("softmax input contains NaN")
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, (a,), "softmax")

    def bw(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accum(a, s * (g - dot))

    out._backward = bw if out.requires_grad else None
    return out


# -- shape ops --------------------------------------------------------------


def reshape(a, *shape) -> Tensor:
    a = _lift(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = Tensor(a.data.reshape(shape), (a,), "reshape")
    out._backward = (lambda g: _accum(a, g.reshape(a.shape))) if out.requires_grad else None
    return out


def transpose(a, *axes) -> Tensor:
    a = _lift(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)), (a,), "transpose")
    out._backward = (lambda g: _accum(a, g.transpose(inv))) if out.requires_grad else None
    return out


def getitem(a, key) -> Tensor:
    """Basic (slice/int) indexing; gradients scatter back into place."""
    a = _lift(a)
    out = Tensor(np.ascontiguousarray(a.data[key]), (a,), "getitem")

    def bw(g):
        buf = np.zeros_like(a.data)
        buf[key] = g  # basic indexing: no duplicate targets
        _accum(a, buf)

    out._backward = bw if out.requires_grad else None
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    out._backward = bw if out.requires_grad else None
    return out


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    ax = axis % (tensors[0].data.ndim + 1)
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors]
    return concat(expanded, axis=ax)


def broadcast_to(a, shape) -> Tensor:
    """Broadcast tensor up to `shape` (length-1 axes only)."""
    a = _lift(a)
    if not _broadcastable(a.shape, shape):
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}")
    out = Tensor(np.broadcast_to(a.data, shape).copy(), (a,), "broadcast")
    out._backward = (lambda g: _accum(a, _unbroadcast(g, a.shape))) if out.requires_grad else None
    return out


# -- parameters -------------------------------------------------------------


class ParamStore:
    """Named learnable-parameter registry with Adam moment buffers.

    Parameters are created lazily on first request (shapes known at the
    first forward pass) with a store-owned seeded RNG, so creation order
    — and therefore initialization — is deterministic for a fixed
    architecture.
    """

    def __init__(self, seed: int = 0):
        self._params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.rng = np.random.default_rng(seed)

    def param(self, name: str, shape, init="kaiming", fan_in=None) -> Tensor:
        shape = tuple(shape)
        if name in self._params:
            t = self._params[name]
            if t.shape != shape:
                raise ContractError(f"param {name!r} exists with shape {t.shape}, requested {shape}")
            return t
        if isinstance(init, np.ndarray):
            data = init.astype(get_dtype())
        elif init == "kaiming":
            fi = fan_in if fan_in is not None else int(np.prod(shape[1:])) or 1
            bound = math.sqrt(6.0 / fi)
            data = self.rng.uniform(-bound, bound, size=shape).astype(get_dtype())
        elif init == "zeros":
            data = np.zeros(shape, dtype=get_dtype())
        elif init == "ones":
            data = np.ones(shape, dtype=get_dtype())
        elif isinstance(init, (int, float)):
            data = np.full(shape, float(init), dtype=get_dtype())
        else:
            raise ContractError(f"unknown init {init!r}")
        t = Tensor(data, op="param", requires_grad=True)
        self._params[name] = t
        self.m[name] = np.zeros(shape, dtype=get_dtype())
        self.v[name] = np.zeros(shape, dtype=get_dtype())
        return t

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def n_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def set_data(self, name: str, arr: np.ndarray) -> None:
        t = self._params[name]
        if t.shape != arr.shape:
            raise ShapeError(f"param {name!r}: shape {arr.shape} != {t.shape}")
        t.data = arr.astype(t.data.dtype)

    def cast(self, dtype_name: str) -> None:
        dt = _DTYPES[dtype_name]
        for name, t in self._params.items():
            t.data = t.data.astype(dt)
            self.m[name] = self.m[name].astype(dt)
            self.v[name] = self.v[name].astype(dt)


# -- gradient verification --------------------------------------------------


def grad_check(f, inputs, eps: float = 1e-4, tol: float = 1e-5, max_coords: int = 64, seed: int = 0):
    """Compare reverse-mode gradients of scalar f(*inputs) with central differences.

    Large tensors are checked on a random sample of >= `max_coords`
    coordinates.  One-sided differences that disagree flag a non-smooth
    point; those coordinates are skipped and counted instead of failed.
    Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.

    Returns a dict: {max_rel_err, pass, n_checked, n_skipped, worst}.
    """
    inputs = [t if isinstance(t, Tensor) else Tensor(t) for t in inputs]
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ContractError("grad_check requires f64 inputs (use precision('f64'))")
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None

    out = f(*inputs)
    if out.data.size != 1:
        raise ContractError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    f0 = float(out.data.reshape(()))

    rng = np.random.default_rng(seed)
    max_rel = 0.0
    worst = None
    n_checked = 0
    n_skipped = 0
    for ti, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for ci in coords:
            orig = flat[ci]
            flat[ci] = orig + eps
            fp = float(f(*inputs).data.reshape(()))
            flat[ci] = orig - eps
            fm = float(f(*inputs).data.reshape(()))
            flat[ci] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("non-finite function value during grad_check")
            num = (fp - fm) / (2 * eps)
            d_plus = (fp - f0) / eps
            d_minus = (f0 - fm) / eps
            if abs(d_plus - d_minus) > 1e-2 * max(1.0, abs(d_plus), abs(d_minus)):
                n_skipped += 1  # kink: one-sided slopes disagree
                continue
            ana = float(analytic[ti].reshape(-1)[ci])
            # difference quotients cannot resolve gradients below the
            # cancellation noise of f (ulp-scale over 2*eps) relative to tol
            noise_est = max(1.0, abs(f0), abs(fp), abs(fm)) * 5e-14 / (2 * eps)
            if max(abs(ana), abs(num)) < noise_est / tol:
                n_skipped += 1
                continue
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            n_checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = (ti, int(ci), ana, num)
    return {
        "max_rel_err": max_rel,
        "pass": bool(max_rel < tol),
        "n_checked": n_checked,
        "n_skipped": n_skipped,
        "worst": worst,
    }
