"""A small reverse-mode automatic differentiation substrate over numpy.

Each op computes its forward value eagerly and records a backward rule looked
up by name in ``BACKWARD`` at backward time, so rules can be swapped out
(``override_backward``) to exercise the gradient checker.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import NonFinite, ShapeMismatch

_state = {"dtype": np.float32, "check_finite": True}


@contextlib.contextmanager
def precision(dtype):
    """Create new tensors in ``dtype`` (e.g. ``np.float64`` for gradient checks)."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = old


def default_dtype():
    return _state["dtype"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_op", "_parents", "_ctx")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _state["dtype"])
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._op = None
        self._parents: tuple = ()
        self._ctx = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._op is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, BACKWARD[node._op](node, g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap constants; a constant next to tensor ``like`` takes its dtype."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=None if like is None else like.data.dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    return as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b)


def _result(data, op: str, parents: Sequence[Tensor], ctx=None) -> Tensor:
    if _state["check_finite"] and not np.isfinite(data).all():
        raise NonFinite(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._op, out._parents, out._ctx = op, tuple(parents), ctx
    else:
        out._op, out._parents, out._ctx = None, (), None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


BACKWARD: dict[str, Callable] = {}


def _register(name):
    def deco(fn):
        BACKWARD[name] = fn
        return fn
    return deco


@contextlib.contextmanager
def override_backward(name: str, fn: Callable):
    """Temporarily replace the backward rule of op ``name``."""
    old = BACKWARD[name]
    BACKWARD[name] = fn
    try:
        yield
    finally:
        BACKWARD[name] = old


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return _result(data, "add", (a, b))


@_register("add")
def _add_bw(out, g):
    a, b = out._parents
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return _result(data, "sub", (a, b))


@_register("sub")
def _sub_bw(out, g):
    a, b = out._parents
    return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return _result(data, "mul", (a, b))


@_register("mul")
def _mul_bw(out, g):
    a, b = out._parents
    ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
    gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
    return ga, gb


def relu(x: Tensor) -> Tensor:
    return _result(np.maximum(x.data, 0), "relu", (x,))


@_register("relu")
def _relu_bw(out, g):
    return (g * (out._parents[0].data > 0),)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    data = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)
    return _result(data, "sigmoid", (x,))


@_register("sigmoid")
def _sigmoid_bw(out, g):
    s = out.data
    return (g * s * (1 - s),)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NonFinite("log of a non-positive value")
    return _result(np.log(x.data), "log", (x,))


@_register("log")
def _log_bw(out, g):
    return (g / out._parents[0].data,)


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) = -softplus(-x), evaluated without overflow."""
    z = x.data
    return _result(np.minimum(z, 0) - np.log1p(np.exp(-np.abs(z))), "log_sigmoid", (x,))


@_register("log_sigmoid")
def _log_sigmoid_bw(out, g):
    z = out._parents[0].data
    e = np.exp(-np.abs(z))
    sig_neg = np.where(z >= 0, e / (1 + e), 1 / (1 + e))  # sigmoid(-z)
    return (g * sig_neg,)


# ---------------------------------------------------------------- reductions / shape


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), "sum", (x,), (axis, keepdims))


@_register("sum")
def _sum_bw(out, g):
    x = out._parents[0]
    axis, keepdims = out._ctx
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _result(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), "mean", (x,), (axis, keepdims))


@_register("mean")
def _mean_bw(out, g):
    x = out._parents[0]
    axis, keepdims = out._ctx
    n = x.data.size // max(out.data.size, 1)
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / n, x.shape).copy(),)


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), "reshape", (x,))


@_register("reshape")
def _reshape_bw(out, g):
    return (g.reshape(out._parents[0].shape),)


def transpose(x: Tensor, axes) -> Tensor:
    return _result(np.transpose(x.data, axes), "transpose", (x,), tuple(axes))


@_register("transpose")
def _transpose_bw(out, g):
    return (np.transpose(g, np.argsort(out._ctx)),)


def index(x: Tensor, idx) -> Tensor:
    return _result(x.data[idx], "index", (x,), idx)


@_register("index")
def _index_bw(out, g):
    x = out._parents[0]
    gx = np.zeros_like(x.data)
    np.add.at(gx, out._ctx, g)
    return (gx,)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    sizes = [t.shape[axis] for t in tensors]
    return _result(data, "concat", tensors, (axis, sizes))


@_register("concat")
def _concat_bw(out, g):
    axis, sizes = out._ctx
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=axis))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    return _result(np.matmul(a.data, b.data), "matmul", (a, b))


@_register("matmul")
def _matmul_bw(out, g):
    a, b = out._parents
    ga = gb = None
    if a.requires_grad:
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
    if b.requires_grad:
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
    return ga, gb


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeMismatch(f"ids outside table of {table.shape[0]} rows")
    return _result(table.data[ids], "embedding_lookup", (table,), ids)


@_register("embedding_lookup")
def _embedding_bw(out, g):
    table = out._parents[0]
    gt = np.zeros_like(table.data)
    np.add.at(gt, out._ctx, g)
    return (gt,)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------- normalization / attention


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-8) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = _result(xhat, "layer_norm", (x,), (xhat, inv))
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


@_register("layer_norm")
def _layer_norm_bw(out, g):
    xhat, inv = out._ctx
    n = xhat.shape[-1]
    gx = inv / n * (n * g - g.sum(axis=-1, keepdims=True)
                    - xhat * (g * xhat).sum(axis=-1, keepdims=True))
    return (gx,)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; positions where ``mask`` is False get zero weight."""
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=-1).all():
            raise NonFinite("softmax row with every position masked")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return _result(e / e.sum(axis=-1, keepdims=True), "softmax", (x,))


@_register("softmax")
def _softmax_bw(out, g):
    y = out.data
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def causal_mask(length: int) -> np.ndarray:
    """Boolean (length, length) mask; True where a query may attend to a key."""
    return np.tril(np.ones((length, length), dtype=bool))


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norm <= eps):
        from .errors import ZeroVector
        raise ZeroVector("l2_normalize of a zero vector")
    y = x.data / norm
    return _result(y, "l2_normalize", (x,), norm)


@_register("l2_normalize")
def _l2n_bw(out, g):
    y, norm = out.data, out._ctx
    return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep, dtype=x.data.dtype))


# ---------------------------------------------------------------- gradient checking


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    max_abs_err: float
    n_checked: int
    passed: bool


@dataclass
class GradCheckReport:
    params: list[ParamCheck] = field(default_factory=list)
    tolerance: float = 1e-3

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    def __getitem__(self, name: str) -> ParamCheck:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    def summary(self) -> str:
        lines = [
            f"{p.name:<32} rel={p.max_rel_err:.2e} abs={p.max_abs_err:.2e} "
            f"n={p.n_checked} {'ok' if p.passed else 'FAIL'}"
            for p in self.params
        ]
        return "\n".join(lines)


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-4,
    tol: float = 1e-3,
    max_coords: int | None = 64,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    ``f`` must rebuild its graph from the current parameter values on every
    call. Up to ``max_coords`` coordinates per parameter are sampled.
    """
    for p in params.values():
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = {
        name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
        for name, p in params.items()
    }
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tol)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n)
        if max_coords is not None and n > max_coords:
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        a_flat = analytic[name].reshape(-1)
        max_rel = max_abs = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = f().item()
            flat[c] = orig - eps
            fm = f().item()
            flat[c] = orig
            num = (fp - fm) / (2 * eps)
            a = float(a_flat[c])
            abs_err = abs(a - num)
            rel = abs_err / max(abs(a), abs(num), 1e-8)
            max_rel, max_abs = max(max_rel, rel), max(max_abs, abs_err)
        report.params.append(ParamCheck(name, max_rel, max_abs, len(coords), max_rel <= tol))
    for p in params.values():
        p.zero_grad()
    return report
