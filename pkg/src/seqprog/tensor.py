"""Dense numpy-backed tensors with define-by-run reverse-mode autodiff.

Every op builds a node holding its parents and a closure that maps the output
gradient onto input gradients. ``Tensor.backward`` walks the graph once in
reverse topological order, accumulates into leaf ``.grad`` buffers and then
frees the graph, so a second call on the same loss raises ``GraphError``.

Training runs in float32 by default; gradient checks switch to float64 with
``default_dtype(np.float64)``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DimensionError, GraphError, NonFiniteError

_state = {"dtype": np.dtype(np.float32), "grad_enabled": True}

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported element type {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


@contextlib.contextmanager
def deterministic_mode():
    """Pin BLAS/OpenMP pools to one thread so kernels are bitwise repeatable."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_freed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            # numpy float arrays keep their precision; Python numbers and lists take the default
            keep = isinstance(data, (np.ndarray, np.floating)) and data.dtype in (np.float32, np.float64)
            dtype = data.dtype if keep else _state["dtype"]
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._freed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    @property
    def is_leaf(self) -> bool:
        return self._op == "leaf"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self._op})"

    # -- operators --------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        if self._freed:
            raise GraphError("graph already consumed by a previous backward(); rebuild the forward pass")
        if self.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("loss is detached from any parameter requiring grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            if node._freed:
                raise GraphError(f"op '{node._op}' belongs to a graph already consumed by backward()")
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise GraphError(f"{node._op}: gradient shape {pg.shape} != input shape {parent.shape}")
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._freed = True


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or _state["dtype"]))


def _check_finite(op: str, out: np.ndarray) -> None:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


def _node(op: str, out: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    _check_finite(op, out)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t._freed = False
    t._op = op
    needs = _state["grad_enabled"] and any(p.requires_grad for p in parents)
    t.requires_grad = needs
    if needs:
        t._parents = tuple(parents)
        t._backward = backward
    else:
        t._parents = ()
        t._backward = None
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    return _node("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        out = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: cannot broadcast {a.shape} with {b.shape}") from None
    return _node("sub", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(a, b)
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    return _node(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(a, 1.0 / b)
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * a.data / (b.data * b.data), b.shape)

    return _node("div", out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = a.dtype.type(c)
    return _node("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT_2))
    out = (x.data * cdf).astype(x.dtype)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return ((g * (cdf + x.data * pdf)).astype(x.dtype),)

    return _node("gelu", out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    return _node("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _node("tanh", out, (x,), lambda g: (g * (1 - out * out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _node("log", out, (x,), lambda g: (g / x.data,))


def square(x: Tensor) -> Tensor:
    return _node("square", x.data * x.data, (x,), lambda g: (2 * g * x.data,))


# -- shape ------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _node("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _node("transpose", out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def cast(x: Tensor, dtype) -> Tensor:
    """Change element type; the gradient is cast back to the input type."""
    dtype = np.dtype(dtype)
    if x.dtype == dtype:
        return x
    return _node("cast", x.data.astype(dtype), (x,), lambda g: (g.astype(x.dtype),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    try:
        out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    except ValueError:
        raise DimensionError(f"broadcast_to: {x.shape} -> {tuple(shape)}") from None
    return _node("broadcast_to", out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return _node("concat", out, tensors, backward)


def getitem(x: Tensor, index) -> Tensor:
    out = np.ascontiguousarray(x.data[index])

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _node("getitem", out, (x,), backward)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """x: (B, N, D), idx: (B, K) integer -> (B, K, D) with out[b, j] = x[b, idx[b, j]]."""
    idx = np.asarray(idx)
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise DimensionError(f"gather_rows: x {x.shape}, idx {idx.shape}")
    rows = np.arange(x.shape[0])[:, None]
    out = np.ascontiguousarray(x.data[rows, idx])

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, idx), g)
        return (full,)

    return _node("gather_rows", out, (x,), backward)


# -- reductions -------------------------------------------------------------


def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axis(axis, x.ndim)
    out = np.asarray(x.data.sum(axis=axes, keepdims=keepdims), dtype=x.dtype)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.ascontiguousarray(np.broadcast_to(g, x.shape)),)

    return _node("sum", out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum_(x, axis, keepdims), 1.0 / count)


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over the trailing (length) axis: (..., C, L) -> (..., C)."""
    return mean(x, axis=-1)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node("matmul", out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias, weight stored as (out_features, in_features)."""
    if x.shape[-1] != weight.shape[-1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, weight.shape[0])

    def backward(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape)
        gw = g2.T @ x2
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node("linear", out, parents, backward)


def outer_accumulate(k: Tensor, c: Tensor) -> Tensor:
    """Sum of outer products over the last axis: K·Cᵀ for (…, D', M) inputs."""
    if k.shape != c.shape or k.ndim < 2:
        raise DimensionError(f"outer_accumulate: shapes {k.shape} and {c.shape} differ")
    out = np.matmul(k.data, np.swapaxes(c.data, -1, -2))

    def backward(g):
        return np.matmul(g, c.data), np.matmul(np.swapaxes(g, -1, -2), k.data)

    return _node("outer_accumulate", out, (k, c), backward)


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded 1-D cross-correlation.

    x is (C_in, L) or (N, C_in, L); kernel is (C_out, C_in, k) with k odd.
    """
    batched = x.ndim == 3
    if x.ndim not in (2, 3) or kernel.ndim != 3:
        raise DimensionError(f"conv1d: input {x.shape}, kernel {kernel.shape}")
    c_out, c_in, k = kernel.shape
    if x.shape[-2] != c_in:
        raise DimensionError(f"conv1d: input has {x.shape[-2]} channels, kernel expects {c_in}")
    if k % 2 == 0:
        raise DimensionError(f"conv1d: kernel width {k} must be odd")
    xb = x.data if batched else x.data[None]
    n, _, length = xb.shape
    pad = k // 2
    xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad)))
    # cols[n, ci, j, l] = xp[n, ci, l + j]
    cols = np.stack([xp[:, :, j:j + length] for j in range(k)], axis=2).reshape(n, c_in * k, length)
    w2 = kernel.data.reshape(c_out, c_in * k)
    out = np.matmul(w2, cols)
    if bias is not None:
        out = out + bias.data[:, None]
    if not batched:
        out = out[0]

    def backward(g):
        gb3 = g if batched else g[None]
        gw = np.einsum("nol,nkl->ok", gb3, cols).reshape(kernel.shape)
        gcols = np.matmul(w2.T, gb3).reshape(n, c_in, k, length)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, j:j + length] += gcols[:, :, j, :]
        gx = gxp[:, :, pad:pad + length]
        gx = np.ascontiguousarray(gx if batched else gx[0])
        gbias = gb3.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw, gbias

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node("conv1d", out, parents, backward)


# -- normalisation / probabilities -------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node("softmax", out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        ggam = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx.astype(x.dtype), ggam, gbeta

    return _node("layer_norm", out.astype(x.dtype), (x, gamma, beta), backward)


def cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Softmax cross-entropy with max-subtraction.

    ``logits`` of shape (C,) with an int label gives the per-example loss;
    (N, C) with N labels gives the mean, or ``sum(weights * loss_i)`` when
    ``weights`` is supplied.
    """
    single = logits.ndim == 1
    z = logits.data[None] if single else logits.data
    if z.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be 1-D or 2-D, got {logits.shape}")
    y = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    n, n_class = z.shape
    if y.shape != (n,):
        raise DimensionError(f"cross_entropy: {y.shape[0]} labels for {n} rows of logits")
    if (y < 0).any() or (y >= n_class).any():
        raise ValueError(f"cross_entropy: label out of range [0, {n_class})")
    if weights is None:
        w = np.full(n, 1.0 / n, dtype=z.dtype)
    else:
        w = np.asarray(weights, dtype=z.dtype).reshape(n)

    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    per = lse - shifted[np.arange(n), y]
    out = np.asarray((w * per).sum(), dtype=z.dtype)

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), y] -= 1.0
        grad = p * (w[:, None] * g)
        return (grad[0] if single else grad,)

    return _node("cross_entropy", out, (logits,), backward)


# -- finite-difference gradient check ----------------------------------------


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` with respect to ``x.data`` (mutated in place)."""
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-6,
) -> float:
    """Compare autodiff and central-difference gradients for every input.

    Returns the worst relative error; raises AssertionError on an element with
    |a - n| > atol and |a - n| / max(|a|, |n|) > rtol.
    """
    for t in inputs:
        t.grad = None
    loss = fn()
    loss.backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(fn, t, h)
        diff = np.abs(analytic - numeric)
        denom = np.maximum(np.abs(analytic), np.abs(numeric))
        rel = np.where(denom > 0, diff / np.where(denom > 0, denom, 1), 0.0)
        bad = (diff > atol) & (rel > rtol)
        if bad.any():
            i = np.flatnonzero(bad.reshape(-1))[0]
            raise AssertionError(
                f"gradient mismatch at flat index {i}: autodiff {analytic.reshape(-1)[i]!r}, "
                f"finite difference {numeric.reshape(-1)[i]!r}"
            )
        significant = denom > atol
        if significant.any():
            worst = max(worst, float(rel[significant].max()))
    return worst
