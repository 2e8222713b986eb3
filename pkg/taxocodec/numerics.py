"""
numerics.py
Dense tensors with reverse-mode differentiation
===============================================

A deliberately small autodiff layer: every differentiable operation is a
``Function`` with a numpy ``forward`` and a ``backward`` returning one
gradient per input. ``Tensor.backward`` walks the graph in a fixed
topological order, so repeated runs accumulate gradients bit-identically.

Training runs in float32; ``grad_check`` is meant to be used on float64
copies of the parameters (see ``layers.Module.astype``).
"""

import contextlib
import functools
import logging
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import GradientCheckError, ShapeMismatchError

logger = logging.getLogger(__name__)

POSITIVE_EPS = 1e-6

ArrayLike = Union["Tensor", np.ndarray, float, int]

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (encoder/decoder inference)."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


# ============================================================================
# GRAPH MACHINERY
# ============================================================================

class Function:
    """
    Base class for differentiable operations.

    ``forward`` receives the raw arrays of the input tensors; ``backward``
    receives dL/d(output) as an array and returns dL/d(input) for every input
    (``None`` where no gradient flows).
    """

    def __init__(self, *tensors: "Tensor"):
        self.tensors = tensors

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs) -> "Tensor":
        func = cls(*tensors)
        out_data = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = grad_enabled() and any(t.requires_grad for t in tensors)
        return Tensor(out_data, requires_grad=requires_grad, creator=func if requires_grad else None)

    @staticmethod
    def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        """Sum out broadcast dimensions so ``grad`` matches ``shape``."""
        if grad.shape == shape:
            return grad
        while grad.ndim > len(shape):
            grad = grad.sum(axis=0)
        for dim, extent in enumerate(shape):
            if extent == 1 and grad.shape[dim] != 1:
                grad = grad.sum(axis=dim, keepdims=True)
        return grad


class Tensor:
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, creator: Optional[Function] = None):
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float32)
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.creator = creator

    # ------------------------------------------------------------------ info
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _wrap(self, other: ArrayLike) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    # ------------------------------------------------------------ operators
    def __add__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self, self._wrap(other))

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self._wrap(other), self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self, Neg.apply(self._wrap(other)))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self._wrap(other), Neg.apply(self))

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(self, self._wrap(other))

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(self._wrap(other), self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return Div.apply(self, self._wrap(other))

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return Div.apply(self._wrap(other), self)

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    # ------------------------------------------------------------- backprop
    def _accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.shape:
            grad = np.broadcast_to(grad, self.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.dtype, copy=True)
        else:
            self.grad = self.grad + grad.astype(self.dtype, copy=False)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if not self.requires_grad:
            return
        if grad is None:
            grad = np.ones_like(self.data)
        self._accumulate(np.asarray(grad, dtype=self.dtype))

        order: List[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in visited:
                continue
            if expanded:
                visited.add(id(node))
                order.append(node)
                continue
            stack.append((node, True))
            if node.creator is not None:
                for parent in node.creator.tensors:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))

        for node in reversed(order):
            func = node.creator
            if func is None or node.grad is None:
                continue
            grads = func.backward(node.grad)
            if not isinstance(grads, tuple):
                grads = (grads,)
            for parent, g in zip(func.tensors, grads):
                if g is not None and parent.requires_grad:
                    parent._accumulate(g)
            if node is not self:
                node.grad = None
            node.creator = None


# ============================================================================
# ELEMENTWISE AND SHAPE OPS
# ============================================================================

class Add(Function):
    def forward(self, x, y):
        self.shapes = (x.shape, y.shape)
        return x + y

    def backward(self, grad):
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(grad, self.shapes[1])


class Mul(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return (self.unbroadcast(grad * self.y, self.x.shape),
                self.unbroadcast(grad * self.x, self.y.shape))


class Div(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x / y

    def backward(self, grad):
        gx = grad / self.y
        gy = -grad * self.x / (self.y * self.y)
        return self.unbroadcast(gx, self.x.shape), self.unbroadcast(gy, self.y.shape)


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.in_shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            axes = (self.axis,) if isinstance(self.axis, int) else tuple(self.axis)
            axes = sorted(a % len(self.in_shape) for a in axes)
            for a in axes:
                grad = np.expand_dims(grad, a)
        return (np.broadcast_to(grad, self.in_shape).copy(),)


class Mean(Sum):
    def forward(self, x, axis=None, keepdims=False):
        out = super().forward(x, axis=axis, keepdims=keepdims)
        self.count = x.size // max(out.size, 1)
        return out / self.count

    def backward(self, grad):
        (g,) = super().backward(grad)
        return (g / self.count,)


class Reshape(Function):
    def forward(self, x, shape=()):
        self.in_shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, np.zeros_like(x))

    def backward(self, grad):
        return (grad * self.mask,)


class Softplus(Function):
    def forward(self, x):
        self.x = x
        return np.logaddexp(np.zeros_like(x), x)

    def backward(self, grad):
        return (grad * expit(self.x).astype(self.x.dtype),)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=self.axis))


class Slice(Function):
    def forward(self, x, axis=0, start=0, stop=None):
        self.in_shape = x.shape
        self.index = (slice(None),) * axis + (slice(start, stop),)
        return x[self.index].copy()

    def backward(self, grad):
        out = np.zeros(self.in_shape, dtype=grad.dtype)
        out[self.index] = grad
        return (out,)


# ============================================================================
# LAYER OPS
# ============================================================================

class Conv2dFn(Function):
    def forward(self, x, w, b=None, stride=1, padding=0):
        k = w.shape[2]
        self.x_shape, self.stride, self.padding = x.shape, stride, padding
        self.w = w
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        self.xp_shape = xp.shape
        self.windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        out = np.tensordot(self.windows, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if b is not None:
            out = out + b[None, :, None, None]
        return np.ascontiguousarray(out)

    def backward(self, grad):
        k, s, p = self.w.shape[2], self.stride, self.padding
        _, _, ho, wo = grad.shape
        gw = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros(self.xp_shape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                contrib = np.einsum("bohw,oc->bchw", grad, self.w[:, :, i, j])
                gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += contrib
        h, w = self.x_shape[2], self.x_shape[3]
        gx = gxp[:, :, p:p + h, p:p + w]
        if len(self.tensors) == 3:
            return gx, gw, grad.sum(axis=(0, 2, 3))
        return gx, gw


class LinearFn(Function):
    def forward(self, x, w, b=None):
        self.x, self.w = x, w
        out = x @ w.T
        return out + b if b is not None else out

    def backward(self, grad):
        gx = grad @ self.w
        gw = grad.T @ self.x
        if len(self.tensors) == 3:
            return gx, gw, grad.sum(axis=0)
        return gx, gw


class Einsum(Function):
    def forward(self, a, b, subscripts=""):
        inputs, self.out = subscripts.replace(" ", "").split("->")
        self.sa, self.sb = inputs.split(",")
        for index in self.sa:
            if index not in self.out and index not in self.sb:
                raise ShapeMismatchError(f"einsum: index '{index}' is reduced inside a single operand")
        for index in self.sb:
            if index not in self.out and index not in self.sa:
                raise ShapeMismatchError(f"einsum: index '{index}' is reduced inside a single operand")
        self.a, self.b = a, b
        return np.einsum(subscripts, a, b)

    def backward(self, grad):
        ga = np.einsum(f"{self.out},{self.sb}->{self.sa}", grad, self.b)
        gb = np.einsum(f"{self.sa},{self.out}->{self.sb}", self.a, grad)
        return ga, gb


@functools.lru_cache(maxsize=256)
def _resize_matrix(n_in: int, n_out: int, dtype_str: str) -> np.ndarray:
    """Half-pixel bilinear interpolation weights, shape (n_out, n_in)."""
    matrix = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        matrix[i, i0] += 1.0 - frac
        matrix[i, i1] += frac
    matrix = matrix.astype(np.dtype(dtype_str))
    matrix.setflags(write=False)
    return matrix


class BilinearResize(Function):
    def forward(self, x, out_h=1, out_w=1):
        self.rh = _resize_matrix(x.shape[-2], out_h, x.dtype.str)
        self.rw = _resize_matrix(x.shape[-1], out_w, x.dtype.str)
        return self.rh @ x @ self.rw.T

    def backward(self, grad):
        return (self.rh.T @ grad @ self.rw,)


class GlobalMeanPool(Function):
    def forward(self, x):
        self.in_shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        h, w = self.in_shape[2], self.in_shape[3]
        return (np.broadcast_to(grad[:, :, None, None] / (h * w), self.in_shape).copy(),)


class SoftmaxCrossEntropy(Function):
    def forward(self, logits, labels=None):
        self.in_shape = logits.shape
        k = logits.shape[1]
        flat = np.moveaxis(logits, 1, -1).reshape(-1, k)
        self.labels = labels.reshape(-1)
        shifted = flat - flat.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_p = shifted - log_z
        self.probs = np.exp(log_p)
        rows = np.arange(self.labels.size)
        return np.asarray(-log_p[rows, self.labels].mean(), dtype=logits.dtype)

    def backward(self, grad):
        k = self.in_shape[1]
        g = self.probs.copy()
        g[np.arange(self.labels.size), self.labels] -= 1.0
        g *= grad / self.labels.size
        moved = (self.in_shape[0],) + self.in_shape[2:] + (k,)
        return (np.moveaxis(g.reshape(moved), -1, 1),)


class L1Loss(Function):
    def forward(self, pred, target=None):
        self.diff = pred - target
        return np.asarray(np.abs(self.diff).mean(), dtype=pred.dtype)

    def backward(self, grad):
        return (np.sign(self.diff) * (grad / self.diff.size),)


# ============================================================================
# FUNCTIONAL API
# ============================================================================

def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    if stride < 1:
        raise ShapeMismatchError(f"conv2d: stride must be >= 1, got {stride}")
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1] \
            or weight.shape[2] != weight.shape[3]:
        raise ShapeMismatchError(
            f"conv2d: input shape {x.shape} incompatible with weight shape {weight.shape}")
    k = weight.shape[2]
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ShapeMismatchError(
            f"conv2d: input shape {x.shape} smaller than kernel of weight shape {weight.shape}")
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeMismatchError(
                f"conv2d: bias shape {bias.shape} does not match weight shape {weight.shape}")
        return Conv2dFn.apply(x, weight, bias, stride=stride, padding=padding)
    return Conv2dFn.apply(x, weight, stride=stride, padding=padding)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatchError(
            f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}")
    if bias is not None:
        return LinearFn.apply(x, weight, bias)
    return LinearFn.apply(x, weight)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def softplus(x: Tensor) -> Tensor:
    return Softplus.apply(x)


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    return Einsum.apply(a, b, subscripts=subscripts)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> List[Tensor]:
    if sum(sizes) != x.shape[axis]:
        raise ShapeMismatchError(f"split: sizes {tuple(sizes)} do not cover axis {axis} of {x.shape}")
    parts, start = [], 0
    for size in sizes:
        parts.append(Slice.apply(x, axis=axis, start=start, stop=start + size))
        start += size
    return parts


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ShapeMismatchError(f"bilinear_resize: target extent {(out_h, out_w)} must be >= 1")
    if x.ndim < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ShapeMismatchError(f"bilinear_resize: input shape {x.shape} has no spatial extent")
    if x.shape[-2:] == (out_h, out_w):
        return x
    return BilinearResize.apply(x, out_h=out_h, out_w=out_w)


def global_mean_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeMismatchError(f"global_mean_pool: expected (B, C, H, W), got {x.shape}")
    if x.shape[2] * x.shape[3] == 0:
        raise ShapeMismatchError(f"global_mean_pool: zero-sized spatial extent in {x.shape}")
    return GlobalMeanPool.apply(x)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels)
    expected = (logits.shape[0],) + logits.shape[2:]
    if labels.shape != expected:
        raise ShapeMismatchError(
            f"softmax_cross_entropy: logits shape {logits.shape} incompatible with labels shape {labels.shape}")
    if labels.size == 0:
        raise ShapeMismatchError("softmax_cross_entropy: empty batch")
    return SoftmaxCrossEntropy.apply(logits, labels=labels.astype(np.int64))


def l1_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ShapeMismatchError(
            f"l1_loss: prediction shape {pred.shape} does not match target shape {target.shape}")
    return L1Loss.apply(pred, target=target)


# ============================================================================
# PARAMETERS
# ============================================================================

class Parameter(Tensor):
    """
    A trainable leaf tensor. ``positive`` parameters store an unconstrained
    value ``s`` and expose ``softplus(s) + 1e-6`` through ``value``.
    """

    def __init__(self, data, trainable: bool = True, positive: bool = False):
        array = np.array(data, copy=True)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float32)
        super().__init__(np.ascontiguousarray(array), requires_grad=trainable)
        self.positive = positive

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)
        if not flag:
            self.grad = None

    @property
    def value(self) -> Tensor:
        if self.positive:
            return softplus(self) + POSITIVE_EPS
        return self

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, trainable={self.trainable}, positive={self.positive})"


# ============================================================================
# GRADIENT CHECK
# ============================================================================

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_parameter: int
    worst_index: Tuple[int, ...]
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _scalar(value) -> float:
    data = value.data if isinstance(value, Tensor) else np.asarray(value)
    return float(np.asarray(data, dtype=np.float64).sum())


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5,
               tol: float = 1e-4, atol: float = 1e-6) -> GradCheckReport:
    """
    Compare reverse-mode gradients of the scalar ``f()`` with central finite
    differences, perturbing every element of every tensor in ``params``.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            logger.warning("grad_check on %s data; use float64 for meaningful tolerances", p.dtype)
        p.grad = None

    loss = f()
    if not np.isfinite(_scalar(loss)):
        raise GradientCheckError("non-finite loss at the unperturbed point", -1)
    if isinstance(loss, Tensor):
        loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst, worst_param, worst_index, checked = 0.0, 0, (), 0
    with no_grad():
        for i, p in enumerate(params):
            for flat in range(p.data.size):
                index = np.unravel_index(flat, p.shape)
                original = p.data[index]
                p.data[index] = original + eps
                f_plus = _scalar(f())
                p.data[index] = original - eps
                f_minus = _scalar(f())
                p.data[index] = original
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise GradientCheckError(f"non-finite loss while perturbing parameter {i}", i)
                numeric = (f_plus - f_minus) / (2.0 * eps)
                exact = float(analytic[i][index])
                err = abs(exact - numeric) / max(abs(exact), abs(numeric), atol)
                checked += 1
                if err > worst:
                    worst, worst_param, worst_index = err, i, tuple(int(v) for v in index)
    for p in params:
        p.grad = None
    return GradCheckReport(worst, worst_param, worst_index, checked, tol)
