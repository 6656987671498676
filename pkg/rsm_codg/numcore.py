"""
Differentiable numeric kernel.

A small reverse-mode automatic differentiation engine over numpy arrays.
Every operation returns a ``Tensor`` that remembers its parents and a
closure mapping the output gradient to parent gradients; ``backward`` walks
the graph in reverse topological order. The fused kernels (linear, masked
softmax, normalisation, log-softmax) carry hand-written backward passes and
are validated against central differences by ``grad_check``.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

# Additive stand-in for minus infinity in attention masks.
MASK_SENTINEL = -1e9

ArrayLike = Union["Tensor", np.ndarray, float, int]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class MaskError(ValueError):
    """Raised when an attention row has no unmasked entry."""


class Tensor:
    """An array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, parents: Tuple["Tensor", ...] = (),
                 backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
                 name: Optional[str] = None):
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.name = name

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # -- differentiation ---------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grads: Dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}

        for node in reversed(_topological_order(self)):
            node_grad = grads.pop(id(node), None)
            if node_grad is None:
                continue
            if not node._parents:
                node.grad = node_grad if node.grad is None else node.grad + node_grad
                continue
            parent_grads = node._backward(node_grad)
            for parent, parent_grad in zip(node._parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + parent_grad
                else:
                    grads[key] = parent_grad

    # -- operators ---------------------------------------------------------

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    """Wrap constants; python scalars take the dtype of ``like``."""
    if isinstance(value, Tensor):
        return value
    if like is not None and not isinstance(value, np.ndarray):
        return Tensor(np.asarray(value, dtype=like.dtype))
    return Tensor(value)


def _node(data: np.ndarray, parents: Tuple[Tensor, ...], backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def _pair(a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (np.where(out > 0, g / (2 * np.where(out > 0, out, 1)), 0),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form is overflow-free and gives exactly 0.5 at the origin
    out = 0.5 * (1 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1 - out),))


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0
    return _node(np.where(positive, a.data, 0).astype(a.dtype), (a,), lambda g: (g * positive,))


# -- shape manipulation ----------------------------------------------------

def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)
    return _node(a.data[index], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    return _node(np.stack([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.moveaxis(g, axis, 0)))


# -- reductions ------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


# -- linear algebra --------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        grad_a = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        grad_b = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return grad_a, grad_b
    return _node(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """
    Dense map y = x . W^T (+ b) over the last axis of ``x``.

    Raises:
        ShapeError: If x's last axis differs from W's input width
    """
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[0])
        grad_x = g @ weight.data if x.requires_grad else None
        grad_w = g2.T @ x.data.reshape(-1, weight.shape[1]) if weight.requires_grad else None
        if bias is None:
            return grad_x, grad_w
        return grad_x, grad_w, g2.sum(axis=0)
    return _node(out, parents, backward)


# -- softmax family ----------------------------------------------------------

def _check_rows(allowed: np.ndarray, axis: int) -> None:
    if not np.all(np.any(allowed, axis=axis)):
        raise MaskError("attention mask has a row with no unmasked entry")


def _masked_probabilities(x: np.ndarray, allowed: np.ndarray, axis: int) -> np.ndarray:
    allowed = np.broadcast_to(allowed, x.shape)
    peak = np.max(np.where(allowed, x, -np.inf), axis=axis, keepdims=True)
    shifted = np.where(allowed, x - peak, -np.inf)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=axis, keepdims=True)


def masked_softmax(x: Tensor, allowed: Optional[np.ndarray] = None, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with disallowed entries excluded; their weight is exactly 0."""
    allowed = np.ones(x.shape, dtype=bool) if allowed is None else np.asarray(allowed, dtype=bool)
    _check_rows(np.broadcast_to(allowed, x.shape), axis)
    out = _masked_probabilities(x.data, allowed, axis)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)
    return _node(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return masked_softmax(x, None, axis)


def masked_logsumexp(x: Tensor, allowed: np.ndarray, axis: int = -1) -> Tensor:
    """log sum exp over allowed entries along ``axis`` (axis removed)."""
    allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), x.shape)
    _check_rows(allowed, axis)
    peak = np.max(np.where(allowed, x.data, -np.inf), axis=axis, keepdims=True)
    total = np.where(allowed, np.exp(np.where(allowed, x.data - peak, 0)), 0).sum(axis=axis, keepdims=True)
    out = np.squeeze(peak + np.log(total), axis=axis)
    probabilities = _masked_probabilities(x.data, allowed, axis)
    return _node(out, (x,), lambda g: (np.expand_dims(g, axis) * probabilities,))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    peak = np.max(x.data, axis=axis, keepdims=True)
    shifted = x.data - peak
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probabilities = np.exp(out)
    return _node(out, (x,), lambda g: (g - probabilities * g.sum(axis=axis, keepdims=True),))


def additive_mask(allowed: np.ndarray) -> np.ndarray:
    """Encode a boolean pattern as the {0, sentinel} additive mask."""
    return np.where(allowed, 0.0, MASK_SENTINEL)


def mask_allowed(mask: np.ndarray) -> np.ndarray:
    return np.asarray(mask) > MASK_SENTINEL / 2


def masked_softmax_attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray],
                             d_k: int) -> Tuple[Tensor, Tensor]:
    """
    Scaled dot-product attention under an additive {0, -inf} mask.

    Args:
        q, k, v: (..., T, d) query, key and value tensors
        mask: (T, T) additive mask, ``None`` for no masking
        d_k: Key width used for the 1/sqrt(d_k) scale

    Returns:
        Tuple of (output, attention weights)

    Raises:
        MaskError: If some mask row is fully masked
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query {q.shape} and key {k.shape} widths differ")
    scores = matmul(q, swap_last(k)) * (1.0 / math.sqrt(d_k))
    allowed = None
    if mask is not None:
        scores = scores + as_tensor(np.asarray(mask, dtype=q.dtype))
        allowed = mask_allowed(mask)
    weights = masked_softmax(scores, allowed, axis=-1)
    return matmul(weights, v), weights


# -- normalisation -----------------------------------------------------------

def normalize(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5,
              axis: int = -1) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """
    Standardise ``x`` along ``axis`` then apply gain and bias.

    Returns:
        Tuple of (output, mean, biased variance); statistics keep ``axis``
    """
    if x.shape[axis] < 2:
        raise ShapeError(f"normalisation axis {axis} of {x.shape} must have length >= 2")
    mu = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        gxhat = g * gain.data
        grad_x = inv_std * (gxhat - gxhat.mean(axis=axis, keepdims=True)
                            - xhat * (gxhat * xhat).mean(axis=axis, keepdims=True))
        return grad_x, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)
    return _node(out.astype(x.dtype), (x, gain, bias), backward), mu, var


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-vector layer normalisation over the last axis."""
    return normalize(x, gain, bias, eps, axis=-1)[0]


def batch_norm(x: Tensor, gain: Tensor, bias: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, train: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """
    Batch normalisation over axis 0 of a (B, C) input.

    In train mode the running statistics are updated in place with
    ``momentum``; in eval mode they replace the batch statistics.
    """
    if train:
        out, mu, var = normalize(x, gain, bias, eps, axis=0)
        batch = x.shape[0]
        unbiased = var.reshape(-1) * batch / max(batch - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1 - momentum
        running_var += momentum * unbiased
        return out
    scale = as_tensor((1.0 / np.sqrt(running_var + eps)).astype(x.dtype))
    return (x - as_tensor(running_mean.astype(x.dtype))) * scale * gain + bias


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = sqrt(tsum(x * x, axis=axis, keepdims=True) + eps)
    return x / norm


def row_norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at the origin is taken as 0."""
    return sqrt(tsum(x * x, axis=axis))


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-rate) in train mode, identity otherwise."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * as_tensor(keep)


# -- gradient checking -------------------------------------------------------

@dataclass
class GradCheckResult:
    """Outcome of a finite-difference gradient check."""
    max_rel_error: float
    checked: int
    skipped: int
    worst_coordinate: Optional[Tuple[str, int]] = None
    errors: List[float] = field(default_factory=list)

    def passed(self, tolerance: float) -> bool:
        return self.checked > 0 and self.max_rel_error < tolerance


def relative_error(analytic: float, numeric: float, atol: float = 1e-5) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), atol)


def grad_check(loss_fn: Callable[[], Tensor], params: Dict[str, Tensor], n_coords: int,
               rng: np.random.Generator, h: float = 1e-5, atol: float = 1e-5,
               tolerance: float = 1e-4, kink_tolerance: float = 1e-3,
               max_attempts: Optional[int] = None) -> GradCheckResult:
    """
    Compare analytic gradients with central differences on random coordinates.

    Args:
        loss_fn: Rebuilds the graph and returns a scalar loss tensor
        params: Path -> float64 leaf tensors to check
        n_coords: Number of differentiable coordinates to collect
        rng: Generator choosing the coordinates
        h: Finite-difference step
        atol: Floor of the relative-error denominator
        tolerance: Errors above this trigger the non-differentiability test
        kink_tolerance: One-sided slopes disagreeing by more than this
            (relative) mark the coordinate as sitting on a kink; it is skipped

    Returns:
        GradCheckResult with the worst relative error over checked coordinates
    """
    for path, tensor in params.items():
        if tensor.dtype != np.float64:
            raise ValueError(f"grad_check requires 64-bit parameters, {path} is {tensor.dtype}")
        tensor.grad = None

    loss = loss_fn()
    base = loss.item()
    loss.backward()
    analytic = {path: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for path, t in params.items()}

    paths = sorted(params)
    result = GradCheckResult(max_rel_error=0.0, checked=0, skipped=0)
    attempts = 0
    limit = max_attempts if max_attempts is not None else 4 * n_coords + 16
    while result.checked < n_coords and attempts < limit and paths:
        attempts += 1
        path = paths[int(rng.integers(len(paths)))]
        tensor = params[path]
        flat = int(rng.integers(tensor.data.size))
        index = np.unravel_index(flat, tensor.shape)
        original = tensor.data[index]

        tensor.data[index] = original + h
        plus = loss_fn().item()
        tensor.data[index] = original - h
        minus = loss_fn().item()
        tensor.data[index] = original

        numeric = (plus - minus) / (2 * h)
        expected = float(analytic[path][index])
        error = relative_error(expected, numeric, atol)
        if error > tolerance:
            forward = (plus - base) / h
            backward_slope = (base - minus) / h
            if abs(forward - backward_slope) > kink_tolerance * max(abs(forward), abs(backward_slope), atol):
                result.skipped += 1
                logger.debug(f"Skipping non-differentiable coordinate {path}[{flat}]")
                continue
        result.checked += 1
        result.errors.append(error)
        if error >= result.max_rel_error:
            result.max_rel_error = error
            result.worst_coordinate = (path, flat)

    logger.info(f"Gradient check: {result.checked} coordinates, {result.skipped} skipped, "
                f"worst relative error {result.max_rel_error:.3e}")
    return result
