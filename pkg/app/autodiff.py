"""
Autodiff - Minimal reverse-mode differentiation over float64 numpy arrays.

Operations record themselves on the active Tape only when one of their inputs
requires a gradient, so frozen encoder weights never enter the graph.
"""

import contextvars
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

ArrayLike = Union["Tensor", np.ndarray, float, int]

_active_tape: contextvars.ContextVar = contextvars.ContextVar("active_tape", default=None)

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
LAYERNORM_EPS = 1e-5


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""
    pass


class NonFiniteError(ArithmeticError):
    """Raised when a computation produced or received NaN/inf values."""
    pass


class Tensor:
    """Dense float64 array that may take part in gradient accumulation."""

    __slots__ = ("data", "requires_grad", "grad", "_from_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._from_op = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


@dataclass
class Node:
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """
    Ordered record of differentiable operations.

    Usage:
        with Tape() as tape:
            loss = ...
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def record(self, inputs: Tuple[Tensor, ...], output: Tensor, backward) -> None:
        output._from_op = True
        self.nodes.append(Node(inputs, output, backward))

    def backward(self, loss: Tensor) -> None:
        """
        Accumulate d(loss)/d(leaf) into `.grad` of every leaf tensor that requires it.

        Raises:
            DimensionError: If the loss is not a scalar
        """
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            return
        if not loss._from_op:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
            return

        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            for tensor, g_in in zip(node.inputs, node.backward(g_out)):
                if g_in is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + g_in
                else:
                    grads[key] = g_in
                if not tensor._from_op:
                    leaves[key] = tensor

        for key, tensor in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, inputs: Tuple[Tensor, ...], backward) -> Tensor:
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        tape = _active_tape.get()
        if tape is None:
            # No tape active: the result is a constant.
            out.requires_grad = False
        else:
            tape.record(inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from e


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise quotient. Division by zero yields inf/nan, never an exception."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (_unbroadcast(g / b.data, a.shape),
                    _unbroadcast(-g * a.data / (b.data ** 2), b.shape))

    return _make(out, (a, b), backward)


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,))


def sqrt(a: ArrayLike) -> Tensor:
    """Square root; the backward pass uses the zero subgradient at 0."""
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def backward(g):
        grad = np.zeros_like(out)
        np.divide(g, 2.0 * out, out=grad, where=out > 0)
        return (grad,)

    return _make(out, (a,), backward)


def gelu(a: ArrayLike) -> Tensor:
    """Exact GELU: x * Phi(x)."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data / _SQRT_2))
    out = a.data * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data ** 2)
        return (g * (cdf + a.data * pdf),)

    return _make(out, (a,), backward)


ELEMENTWISE_OPS = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "gelu": gelu, "exp": exp, "log": log, "sqrt": sqrt,
}


def elementwise(a: ArrayLike, op: str, b: Optional[ArrayLike] = None) -> Tensor:
    """Dispatch one of the named elementwise ops."""
    fn = ELEMENTWISE_OPS.get(op)
    if fn is None:
        raise ValueError(f"Unknown elementwise op '{op}'. Options: {list(ELEMENTWISE_OPS)}")
    if op in ("add", "sub", "mul", "div"):
        if b is None:
            raise ValueError(f"'{op}' needs a second operand")
        return fn(a, b)
    return fn(a)


# ---------------------------------------------------------------------------
# Linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product, batched over leading axes like np.matmul."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"matmul: incompatible batch shapes {a.shape} @ {b.shape}") from e

    def backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if grad_a is None else _unbroadcast(grad_a, a.shape),
                None if grad_b is None else _unbroadcast(grad_b, b.shape))

    return _make(out, (a, b), backward)


def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    """Permute axes; by default swaps the last two."""
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def broadcast_to(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise DimensionError(f"cannot broadcast {a.shape} to {shape}") from e
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {[t.shape for t in tensors]} along axis {axis}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, backward)


def take(a: ArrayLike, index) -> Tensor:
    """Numpy-style indexing with scatter-add backward."""
    a = as_tensor(a)
    out = np.array(a.data[index], dtype=np.float64)
    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def backward(g):
        grad = np.zeros_like(a.data)
        if fancy:
            np.add.at(grad, index, g)
        else:
            grad[index] += g
        return (grad,)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# Reductions and normalizations
# ---------------------------------------------------------------------------

def sum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return div(sum(a, axis=axis, keepdims=keepdims), float(count))


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    """Max-stabilized softmax."""
    a = as_tensor(a)
    if a.size == 0:
        raise DimensionError("softmax of an empty tensor")
    if not np.all(np.isfinite(a.data)):
        raise NonFiniteError("softmax received non-finite input")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (a,), backward)


def logsumexp(a: ArrayLike, axis: int = -1, keepdims: bool = False) -> Tensor:
    """log(sum(exp(a))) along `axis`, max-stabilized."""
    a = as_tensor(a)
    if a.size == 0:
        raise DimensionError("logsumexp of an empty tensor")
    m = np.max(a.data, axis=axis, keepdims=True)
    s = np.sum(np.exp(a.data - m), axis=axis, keepdims=True)
    out_keep = m + np.log(s)
    out = out_keep if keepdims else np.squeeze(out_keep, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(a.data - out_keep),)

    return _make(out, (a,), backward)


def layernorm(x: ArrayLike, gamma: ArrayLike, beta: ArrayLike, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply the affine (gamma, beta)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if d < 2:
        raise DimensionError(f"layernorm needs a last dimension >= 2, got {d}")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm affine shapes {gamma.shape}/{beta.shape} do not match {d}")

    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        grad_gamma = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        grad_beta = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        grad_x = None
        if x.requires_grad:
            gx = g * gamma.data
            grad_x = inv_std * (gx - gx.mean(axis=-1, keepdims=True)
                                - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return grad_x, grad_gamma, grad_beta

    return _make(out, (x, gamma, beta), backward)


def normalize_rows(a: ArrayLike) -> Tensor:
    """
    Divide each row (last axis) by its L2 norm.

    Zero-norm rows stay zero and pass no gradient.
    """
    a = as_tensor(a)
    norms = np.sqrt(np.sum(a.data ** 2, axis=-1, keepdims=True))
    nonzero = norms > 0
    safe = np.where(nonzero, norms, 1.0)
    unit = np.where(nonzero, a.data / safe, 0.0)

    def backward(g):
        proj = np.sum(g * unit, axis=-1, keepdims=True)
        return (np.where(nonzero, (g - unit * proj) / safe, 0.0),)

    return _make(unit, (a,), backward)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def check_finite(t: Tensor, what: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"non-finite values in {what}")
    return t


def numerical_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = fn(x)
        flat[i] = original - step
        minus = fn(x)
        flat[i] = original
        grad_flat[i] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise error scaled by gradient magnitude, with an absolute floor."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    diff = np.abs(analytic - numeric)
    return float(np.max(np.where(diff <= floor, 0.0, diff / scale))) if diff.size else 0.0
