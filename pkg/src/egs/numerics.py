"""Small reverse-mode autodiff layer over dense numpy arrays.

Every differentiable quantity in the pipeline is a :class:`Tensor`. Ops build a
tape lazily (only when an input requires a gradient) and :meth:`Tensor.backward`
walks it in reverse topological order.

Precision is a process-wide mode: ``f32`` for training, ``f64`` for gradient
checks and oracle suites.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, DomainError, EvaluationError, GeometryError

__all__ = [
    "Tensor",
    "GradCheckReport",
    "precision",
    "set_precision",
    "get_precision",
    "default_dtype",
    "checked",
    "no_grad",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sum",
    "mean",
    "concat",
    "stack",
    "reshape",
    "transpose",
    "l2norm",
    "log_softmax",
    "standardize",
    "rot90",
    "roll",
    "conv2d",
    "avg_pool2d",
    "elementwise",
    "grad_check",
]

_DTYPES = {"f32": np.float32, "f64": np.float64}
_MODE = {"precision": "f32", "checked": True, "grad": True}

L2_EPS = 1e-12


def get_precision() -> str:
    return _MODE["precision"]


def set_precision(name: str) -> None:
    if name not in _DTYPES:
        raise DomainError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _MODE["precision"] = name


def default_dtype():
    return _DTYPES[_MODE["precision"]]


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the global precision mode."""
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


@contextlib.contextmanager
def checked(flag: bool = True):
    previous = _MODE["checked"]
    _MODE["checked"] = flag
    try:
        yield
    finally:
        _MODE["checked"] = previous


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block."""
    previous = _MODE["grad"]
    _MODE["grad"] = False
    try:
        yield
    finally:
        _MODE["grad"] = previous


class Tensor:
    """Dense array with an optional gradient slot.

    Leaves are cast to the current precision on construction. In checked mode
    non-finite values are rejected.
    """

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None, _op: str = ""):
        if _backward is None:
            arr = np.array(data, dtype=default_dtype())
        else:
            arr = data
        if _MODE["checked"] and not np.all(np.isfinite(arr)):
            raise DomainError(f"non-finite values in tensor{' ' + name if name else ''} ({_op or 'leaf'})")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if not self.requires_grad:
            raise EvaluationError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    needs = _MODE["grad"] and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, _backward=_noop, _op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, _op=op)


def _noop(g):
    return ()


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# --- linear algebra -------------------------------------------------------

def _ordered_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Accumulates k = 0, 1, ... in order so results match a naive loop bit for bit.
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    out = np.zeros(batch + (a.shape[-2], b.shape[-1]), dtype=np.result_type(a, b))
    for k in range(a.shape[-1]):
        out += a[..., :, k:k + 1] * b[..., k:k + 1, :]
    return out


def matmul(a, b, ordered: bool = False) -> Tensor:
    """Batched matrix product ``a @ b`` with numpy broadcasting of leading axes.

    With ``ordered=True`` the inner reduction runs in a fixed row-major order
    instead of going through BLAS (use for small operands that need exact
    reproducibility against loop oracles).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise DimensionError(f"matmul batch axes incompatible: {a.shape} @ {b.shape}") from exc
    mm = _ordered_matmul if ordered else np.matmul
    out = mm(a.data, b.data)

    def backward(g):
        ga = mm(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = mm(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _result(out, (a, b), backward, "matmul")


# --- pointwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a.data, b.data, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a.data, b.data, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a.data, b.data, "mul")

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _result(a.data * b.data, (a, b), backward, "mul")


def scale(x, factor: float) -> Tensor:
    x = _as_tensor(x)
    c = x.data.dtype.type(factor)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, x.data.dtype.type(0)), (x,), lambda g: (g * mask,), "relu")


# --- reductions and layout ------------------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    if x.data.size == 0:
        raise DimensionError("mean of an empty tensor")
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    axes = tuple(range(x.ndim)) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([x.shape[a] for a in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / g.dtype.type(count), x.shape).copy(),)

    return _result(np.asarray(out, dtype=x.dtype), (x,), backward, "mean")


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    inverse = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise DimensionError("concat of zero tensors")
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[x.shape for x in xs]}") from exc
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, xs, backward, "concat")


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    try:
        out = np.stack([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: incompatible shapes {[x.shape for x in xs]}") from exc

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _result(out, xs, backward, "stack")


def _getitem(x: Tensor, index) -> Tensor:
    out = np.asarray(x.data[index])

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(out.copy(), (x,), backward, "getitem")


def l2norm(x, axis: int = -1, eps: float = L2_EPS) -> Tensor:
    """Divide by ``max(||x||_2, eps)`` along ``axis``."""
    x = _as_tensor(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    denom = np.maximum(norm, x.dtype.type(eps))
    y = x.data / denom
    active = norm > eps

    def backward(g):
        radial = np.sum(g * y, axis=axis, keepdims=True)
        return (np.where(active, (g - y * radial) / denom, g / denom),)

    return _result(y, (x,), backward, "l2norm")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * np.sum(g, axis=axis, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


def standardize(x, axes, eps: float = 1e-5) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Shift and scale to zero mean, unit variance over ``axes`` using the batch's own statistics.

    Returns ``(y, mean, var)``; the statistics are reduced (not kept) over ``axes``
    so callers can fold them into running estimates.
    """
    x = _as_tensor(x)
    axes = tuple(a % x.ndim for a in axes)
    n = int(np.prod([x.shape[a] for a in axes]))
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    y = (x.data - mu) * inv

    def backward(g):
        gs = np.sum(g, axis=axes, keepdims=True)
        gy = np.sum(g * y, axis=axes, keepdims=True)
        return ((inv / n) * (n * g - gs - y * gy),)

    return _result(y, (x,), backward, "standardize"), np.squeeze(mu, axes), np.squeeze(var, axes)


# --- spatial --------------------------------------------------------------

def rot90(x, k: int = 1, axes=(-2, -1)) -> Tensor:
    """Exact quarter-turn rotation of the two ``axes`` (a pure permutation)."""
    x = _as_tensor(x)
    k = k % 4
    if k == 0:
        return x
    out = np.ascontiguousarray(np.rot90(x.data, k, axes=axes))
    return _result(out, (x,), lambda g: (np.rot90(g, -k, axes=axes),), "rot90")


def roll(x, shift: int, axis: int) -> Tensor:
    x = _as_tensor(x)
    if shift % x.shape[axis] == 0:
        return x
    return _result(np.roll(x.data, shift, axis=axis), (x,), lambda g: (np.roll(g, -shift, axis=axis),), "roll")


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    # (B, C, H, W) -> (B*H*W, k*k*C), columns ordered (ky, kx, c).
    B, C, H, W = x.shape
    p = k // 2
    xl = np.pad(x.transpose(0, 2, 3, 1), ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xl, (k, k), axis=(1, 2))  # (B, H, W, C, k, k)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(B * H * W, k * k * C)


def _correlate(x: np.ndarray, w: np.ndarray, wide: bool = False) -> tuple[np.ndarray, np.ndarray]:
    B, C, H, W = x.shape
    cout, k = w.shape[0], w.shape[-1]
    cols = _im2col(x, k)
    w2 = w.transpose(0, 2, 3, 1).reshape(cout, -1)
    if wide and cols.dtype == np.float32:
        # Accumulate in f64 and round once: the result no longer depends on the
        # order the taps are visited in, which is what keeps f32 feature maps of
        # rotated inputs equal to rotated feature maps.
        out = (cols.astype(np.float64) @ w2.T.astype(np.float64)).astype(np.float32)
    else:
        out = cols @ w2.T
    out = out.reshape(B, H, W, cout).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def conv2d(x, w) -> Tensor:
    """Stride-1 cross-correlation with zero "same" padding.

    ``x`` is (B, Cin, H, W); ``w`` is (Cout, Cin, k, k) with odd ``k``.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects rank-4 operands, got {x.shape} and {w.shape}")
    C = x.shape[1]
    cout, cin, kh, kw = w.shape
    if cin != C:
        raise DimensionError(f"conv2d channel mismatch: input {C}, kernel {cin}")
    if kh != kw or kh % 2 == 0:
        raise GeometryError(f"conv2d kernel must be square with odd side, got {kh}x{kw}")
    out, cols = _correlate(x.data, w.data, wide=True)

    def backward(g):
        gw = None
        if w.requires_grad:
            g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
            gw = (g2.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            # Adjoint of same-padded correlation: correlate with the flipped, transposed bank.
            flipped = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx = _correlate(g, flipped)[0]
        return gx, gw

    return _result(out, (x, w), backward, "conv2d")


def avg_pool2d(x, factor: int) -> Tensor:
    """Non-overlapping ``factor x factor`` mean over the last two axes."""
    x = _as_tensor(x)
    if factor == 1:
        return x
    H, W = x.shape[-2:]
    if H % factor or W % factor:
        raise GeometryError(f"avg_pool2d: {H}x{W} not divisible by {factor}")
    area = x.dtype.type(factor * factor)
    out = None
    for i in range(factor):
        for j in range(factor):
            part = x.data[..., i::factor, j::factor]
            out = part.copy() if out is None else out + part
    out = out / area

    def backward(g):
        g = np.repeat(np.repeat(g, factor, axis=-2), factor, axis=-1)
        return (g / area,)

    return _result(out, (x,), backward, "avg_pool2d")


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "relu": relu,
    "scale": scale,
    "mean": mean,
    "concat": lambda *xs, axis=0: concat(xs, axis=axis),
    "l2norm": l2norm,
}


def elementwise(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch one of the registered pointwise/shape ops by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise DomainError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs, **kwargs)


# --- gradient checking ----------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    step: float
    precision: str
    worst_index: dict[str, tuple] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst <= tol


def relative_error(analytic, numeric) -> np.ndarray:
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f()`` with central differences.

    ``params`` must be float64 leaves that ``f`` closes over; they are perturbed
    in place and restored.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise DomainError(f"grad_check requires f64 parameters, got {p.data.dtype} for {p.name or 'param'}")
        p.grad = None

    with precision("f64"):
        out = f()
        if not np.all(np.isfinite(out.data)):
            raise EvaluationError("grad_check: f() is not finite")
        out.backward()
        analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

        def value() -> float:
            with no_grad():
                v = float(f().data)
            if not np.isfinite(v):
                raise EvaluationError("grad_check: f() is not finite at a perturbed point")
            return v

        errors, worst = {}, {}
        for i, (p, a) in enumerate(zip(params, analytic)):
            numeric = np.zeros_like(p.data)
            for idx in np.ndindex(p.shape):
                orig = p.data[idx]
                p.data[idx] = orig + step
                fp = value()
                p.data[idx] = orig - step
                fm = value()
                p.data[idx] = orig
                numeric[idx] = (fp - fm) / (2.0 * step)
            rel = relative_error(a, numeric)
            key = p.name or f"param{i}"
            errors[key] = float(rel.max()) if rel.size else 0.0
            worst[key] = tuple(int(v) for v in np.unravel_index(int(rel.argmax()), rel.shape)) if rel.size else ()
        for p in params:
            p.grad = None
    return GradCheckReport(errors, step, "f64", worst)
