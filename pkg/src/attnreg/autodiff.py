"""Reverse-mode automatic differentiation over dense numpy arrays.

Tensors store float32 by default (float64 is available for verification
runs); reductions accumulate in float64. Each operation records a backward
closure; `backward` walks the recorded graph in reverse topological order.
A module-level debug switch traps non-finite values after every op.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import GraphStateError, NumericError, ShapeError, SizeError

_DEBUG_FINITE = False


def set_debug_finite(enabled: bool) -> None:
    """Toggle NaN/Inf trapping after every forward op."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


@contextlib.contextmanager
def debug_finite(enabled: bool = True):
    global _DEBUG_FINITE
    prev = _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)
    try:
        yield
    finally:
        _DEBUG_FINITE = prev


class Tensor:
    """A dense array with an optional gradient slot and recorded provenance."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"


def _result(data: np.ndarray, parents, backward_fn) -> Tensor:
    if _DEBUG_FINITE and not np.all(np.isfinite(data)):
        raise NumericError("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out._parents = ()
        out._backward_fn = None
    return out


def _accumulate(parent: Tensor, grad: np.ndarray) -> None:
    if not parent.requires_grad:
        return
    if parent.grad is None:
        parent.grad = np.zeros_like(parent.data)
    parent.grad += grad.astype(parent.data.dtype, copy=False)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def as_tensor(value, dtype=np.float32) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def constant(value, dtype=np.float32) -> Tensor:
    return Tensor(value, requires_grad=False, dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise ops (numpy broadcasting, gradients unbroadcast)
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, -g)

    return _result(-a.data, (a,), backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    data = a.data ** exponent

    def backward(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1.0))

    return _result(data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * data)

    return _result(data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, g / a.data)

    return _result(np.log(a.data), (a,), backward)


def leaky_relu(a, negative_slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    data = np.where(mask, a.data, negative_slope * a.data)

    def backward(g):
        _accumulate(a, np.where(mask, g, negative_slope * g))

    return _result(data, (a,), backward)


def clip(a, low: float, high: float) -> Tensor:
    a = as_tensor(a)
    data = np.clip(a.data, low, high)
    mask = (a.data >= low) & (a.data <= high)

    def backward(g):
        _accumulate(a, np.where(mask, g, 0.0))

    return _result(data, (a,), backward)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _result(data, (a, b), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")

    def backward(g):
        _accumulate(a, g.T)

    return _result(a.data.T.copy(), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    original = a.shape

    def backward(g):
        _accumulate(a, g.reshape(original))

    return _result(a.data.reshape(shape), (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise SizeError("concat needs at least one tensor")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for part, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, stop)
            _accumulate(part, g[tuple(idx)])

    return _result(data, parts, backward)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        _accumulate(a, buf)

    return _result(a.data[idx].copy(), (a,), backward)


def expand(a, shape) -> Tensor:
    a = as_tensor(a)
    original = a.shape

    def backward(g):
        _accumulate(a, _unbroadcast(g, original))

    return _result(np.broadcast_to(a.data, shape).copy(), (a,), backward)


def gather(a, indices) -> Tensor:
    """Select rows of `a` (leading axis) by an integer index array.

    The output shape is indices.shape + a.shape[1:].
    """
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        _accumulate(a, buf)

    return _result(a.data[idx], (a,), backward)


# ---------------------------------------------------------------------------
# reductions (float64 accumulation)
# ---------------------------------------------------------------------------


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _result(np.asarray(data), (a,), backward)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    data = np.mean(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape) / count)

    return _result(np.asarray(data), (a,), backward)


def max_pool(a, axis: int) -> Tensor:
    """Maximum over one axis; gradient flows to the first argmax per slice."""
    a = as_tensor(a)
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    data = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        buf = np.zeros_like(a.data)
        np.put_along_axis(buf, idx, np.expand_dims(g, axis), axis=axis)
        _accumulate(a, buf)

    return _result(data, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max subtraction, float64 accumulation)."""
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted.astype(np.float64))
    y = (e / e.sum(axis=axis, keepdims=True)).astype(a.dtype)

    def backward(g):
        inner = np.sum(g * y, axis=axis, keepdims=True, dtype=np.float64).astype(a.dtype)
        _accumulate(a, (g - inner) * y)

    return _result(y, (a,), backward)


def logsumexp(a, axis: int, keepdims: bool = True) -> Tensor:
    """Stable log-sum-exp along one axis."""
    a = as_tensor(a)
    mx = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp((a.data - mx).astype(np.float64))
    out = (np.log(e.sum(axis=axis, keepdims=True)) + mx).astype(a.dtype)
    soft = (e / e.sum(axis=axis, keepdims=True)).astype(a.dtype)
    data = out if keepdims else out.squeeze(axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, g * soft)

    return _result(data, (a,), backward)


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "eval",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize per feature channel over the leading (point) axis.

    mode "train" uses batch statistics and updates the running buffers in
    place; "gradcheck" uses batch statistics without side effects; "eval"
    uses the stored running statistics.
    """
    if mode not in ("train", "gradcheck", "eval"):
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    x = as_tensor(x)
    if mode == "eval":
        inv_std = constant(1.0 / np.sqrt(running_var + eps), dtype=x.dtype)
        xhat = mul(sub(x, constant(running_mean, dtype=x.dtype)), inv_std)
        return add(mul(xhat, gamma), beta)
    mu = reduce_mean(x, axis=0, keepdims=True)
    centered = sub(x, mu)
    var = reduce_mean(mul(centered, centered), axis=0, keepdims=True)
    if mode == "train":
        running_mean *= 1.0 - momentum
        running_mean += (momentum * mu.data.reshape(running_mean.shape)).astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += (momentum * var.data.reshape(running_var.shape)).astype(running_var.dtype)
    inv_std = power(add(var, constant(eps, dtype=x.dtype)), -0.5)
    return add(mul(mul(centered, inv_std), gamma), beta)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into .grad over the recorded graph."""
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss._parents:
        raise GraphStateError("backward called on a tensor with no recorded graph")
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


class ParamStore:
    """Named trainable tensors plus non-trainable buffers.

    Iteration over parameters is always sorted by name so optimizer updates
    and serialization are deterministic.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}

    def param(self, name: str, values) -> Tensor:
        if name in self._params or name in self._buffers:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor = Tensor(values, requires_grad=True, dtype=self.dtype)
        self._params[name] = tensor
        return tensor

    def buffer(self, name: str, values) -> np.ndarray:
        if name in self._params or name in self._buffers:
            raise ValueError(f"duplicate buffer name {name!r}")
        arr = np.asarray(values, dtype=self.dtype)
        self._buffers[name] = arr
        return arr

    def parameters(self):
        for name in sorted(self._params):
            yield name, self._params[name]

    def buffers(self):
        for name in sorted(self._buffers):
            yield name, self._buffers[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params or name in self._buffers

    def get_param(self, name: str) -> Tensor:
        return self._params[name]

    def zero_grad(self) -> None:
        for _, p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict:
        state = {name: p.data.copy() for name, p in self.parameters()}
        state.update({name: b.copy() for name, b in self.buffers()})
        return state

    def load_state_dict(self, state: dict) -> None:
        """Copy values in; every tensor must exist with a matching shape."""
        names = set(self._params) | set(self._buffers)
        missing = names - set(state)
        if missing:
            raise ShapeError(f"state is missing tensor {sorted(missing)[0]!r}")
        unexpected = set(state) - names
        if unexpected:
            raise ShapeError(f"state has unexpected tensor {sorted(unexpected)[0]!r}")
        for name, values in state.items():
            values = np.asarray(values)
            if name in self._params:
                target = self._params[name]
                if values.shape != target.data.shape:
                    raise ShapeError(
                        f"tensor {name!r} has shape {values.shape}, "
                        f"model expects {target.data.shape}"
                    )
                target.data = values.astype(target.data.dtype)
                target.zero_grad()
            else:
                target = self._buffers[name]
                if values.shape != target.shape:
                    raise ShapeError(
                        f"tensor {name!r} has shape {values.shape}, "
                        f"model expects {target.shape}"
                    )
                target[...] = values.astype(target.dtype)


def grad_check(f, store: ParamStore, eps: float = 1e-4, max_coords: int = 200, seed: int = 0):
    """Compare analytic gradients of f(store) against central finite differences.

    Checks a random subsample of at most `max_coords` coordinates per
    parameter tensor and returns the maximum relative error
    |g_an - g_fd| / max(1e-8, |g_an| + |g_fd|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    store.zero_grad()
    out = f(store)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("function produced a non-finite value")
    backward(out)
    analytic = {name: p.grad.copy() for name, p in store.parameters()}
    rng = np.random.default_rng(seed)
    max_rel = 0.0
    for name, p in store.parameters():
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, max_coords, replace=False))
        for c in coords:
            original = flat[c]
            flat[c] = original + eps
            f_plus = float(f(store).data)
            flat[c] = original - eps
            f_minus = float(f(store).data)
            flat[c] = original
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError("function produced a non-finite value during probing")
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            g_an = float(analytic[name].reshape(-1)[c])
            rel = abs(g_an - g_fd) / max(1e-8, abs(g_an) + abs(g_fd))
            max_rel = max(max_rel, rel)
    return max_rel
