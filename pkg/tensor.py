# tensor.py
"""
Dense float tensors with reverse-mode automatic differentiation.

Every differentiable primitive is a `Function` subclass with a numpy `forward`
and a `backward` that maps the output gradient to input gradients. Calling
`Function.apply` records the op on the output tensor when any input requires
grad, and `Tensor.backward()` walks the recorded graph in reverse topological
order. Layout is row-major numpy throughout; image tensors are channel-first
(N, C, H, W) and volumes (N, C, T, H, W).
"""
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import DomainError, ShapeError

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
PROB_EPS = 1e-7

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True

Number = Union[int, float]


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype new tensors and parameters are created with."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@dataclass
class RngStream:
    """
    Deterministic random stream keyed by (seed, stream id).

    Two streams with equal keys produce equal draw sequences on the same
    platform; distinct stream ids are statistically independent.
    """

    seed: int
    stream: int = 0
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        seq = np.random.SeedSequence(entropy=int(self.seed) & MASK64, spawn_key=(int(self.stream) & MASK64,))
        self._gen = np.random.Generator(np.random.PCG64(seq))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def child(self, stream: int) -> "RngStream":
        return RngStream(self.seed, stream)


# -----------------------------
# Tensor
# -----------------------------
class Tensor:
    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None, _ctx=None):
        if isinstance(data, Tensor):
            data = data.data
        if isinstance(data, (np.ndarray, np.generic)) and np.issubdtype(data.dtype, np.floating):
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._ctx: Optional["Function"] = _ctx

    # --- introspection
    @property
    def shape(self) -> Tuple[int, ...]:
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
        if self.data.size != 1:
            raise ShapeError("item", f"only single-element tensors convert to a float, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    def _wrap(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # --- arithmetic
    def __add__(self, other):
        return Add.apply(self, self._wrap(other))

    def __radd__(self, other):
        return Add.apply(self._wrap(other), self)

    def __sub__(self, other):
        return Add.apply(self, Neg.apply(self._wrap(other)))

    def __rsub__(self, other):
        return Add.apply(self._wrap(other), Neg.apply(self))

    def __mul__(self, other):
        return Mul.apply(self, self._wrap(other))

    def __rmul__(self, other):
        return Mul.apply(self._wrap(other), self)

    def __truediv__(self, other):
        return Div.apply(self, self._wrap(other))

    def __rtruediv__(self, other):
        return Div.apply(self._wrap(other), self)

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return MatMul.apply(self, self._wrap(other))

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    # --- reductions / movement
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def flip(self, axis: int) -> "Tensor":
        return Flip.apply(self, axis=axis)

    # --- element-wise
    def relu(self):
        return Relu.apply(self)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def tanh(self):
        return Tanh.apply(self)

    def softplus(self):
        return Softplus.apply(self)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def clamp(self, lo: Number, hi: Number):
        return Clamp.apply(self, lo=lo, hi=hi)

    def softmax(self, axis: int = -1):
        return Softmax.apply(self, axis=axis)

    def log_softmax(self, axis: int = -1):
        return LogSoftmax.apply(self, axis=axis)

    # --- autodiff
    def backward(self) -> None:
        """
        Accumulate d(self)/d(leaf) into `.grad` of every leaf that requires grad.

        Gradients add onto whatever the leaves already hold, so repeated calls
        accumulate until `zero_grad`.
        """
        if self.data.size != 1:
            raise ShapeError("backward", f"loss must be a scalar, got shape {self.shape}")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._ctx is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            in_grads = node._ctx.backward(g)
            if not isinstance(in_grads, tuple):
                in_grads = (in_grads,)
            for inp, ig in zip(node._ctx.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                ig = _unbroadcast(np.asarray(ig), inp.shape).astype(inp.dtype, copy=False)
                key = id(inp)
                pending[key] = pending[key] + ig if key in pending else ig


class Parameter(Tensor):
    """A trainable leaf tensor with a dotted name path."""

    def __init__(self, data: Any, name: str = ""):
        super().__init__(data, requires_grad=True, name=name)

    @property
    def gradient(self) -> np.ndarray:
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def tensor(data: Any, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for inp in node._ctx.inputs:
                if inp.requires_grad and id(inp) not in visited:
                    stack.append((inp, False))
    return order


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -----------------------------
# Function base
# -----------------------------
class Function:
    """Base class of recorded ops; subclasses keep whatever forward state backward needs."""

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__}.forward")

    def backward(self, grad: np.ndarray):
        raise NotImplementedError(f"{type(self).__name__}.backward")

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        record = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=record, _ctx=fn if record else None)


def _broadcast_check(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# -----------------------------
# Arithmetic
# -----------------------------
class Add(Function):
    def forward(self, a, b):
        _broadcast_check("add", a, b)
        return a + b

    def backward(self, grad):
        return grad, grad


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return -grad


class Mul(Function):
    def forward(self, a, b):
        _broadcast_check("mul", a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Div(Function):
    def forward(self, a, b):
        _broadcast_check("div", a, b)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return grad / self.b, -grad * self.a / (self.b * self.b)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError("matmul", f"inner extents differ: {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ np.swapaxes(self.b, -1, -2), np.swapaxes(self.a, -1, -2) @ grad


# -----------------------------
# Element-wise non-linearities
# -----------------------------
def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return grad * self.mask


class Sigmoid(Function):
    def forward(self, x):
        self.y = _stable_sigmoid(x)
        return self.y

    def backward(self, grad):
        return grad * self.y * (1 - self.y)


class Tanh(Function):
    def forward(self, x):
        self.y = np.tanh(x)
        return self.y

    def backward(self, grad):
        return grad * (1 - self.y * self.y)


class Softplus(Function):
    def forward(self, x):
        self.x = x
        return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def backward(self, grad):
        return grad * _stable_sigmoid(self.x)


class Exp(Function):
    def forward(self, x):
        self.y = np.exp(x)
        return self.y

    def backward(self, grad):
        return grad * self.y


class Log(Function):
    def forward(self, x):
        if np.any(x <= 0):
            raise DomainError(f"log: non-positive input (min {float(np.min(x)):.3g}); clamp first")
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return grad / self.x


class Clamp(Function):
    def forward(self, x, lo, hi):
        self.mask = (x >= lo) & (x <= hi)
        return np.clip(x, lo, hi)

    def backward(self, grad):
        return grad * self.mask


class Softmax(Function):
    def forward(self, x, axis=-1):
        self.axis = axis
        z = np.exp(x - x.max(axis=axis, keepdims=True))
        self.y = z / z.sum(axis=axis, keepdims=True)
        return self.y

    def backward(self, grad):
        y = self.y
        return y * (grad - (grad * y).sum(axis=self.axis, keepdims=True))


class LogSoftmax(Function):
    def forward(self, x, axis=-1):
        self.axis = axis
        shifted = x - x.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        y = shifted - lse
        self.p = np.exp(y)
        return y

    def backward(self, grad):
        return grad - self.p * grad.sum(axis=self.axis, keepdims=True)


# -----------------------------
# Reductions and movement
# -----------------------------
def _norm_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape = x.shape
        self.axes = _norm_axes(axis, x.ndim)
        self.keepdims = keepdims
        return np.asarray(x.sum(axis=self.axes, keepdims=keepdims))

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return np.broadcast_to(grad, self.shape).copy()


class Mean(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape = x.shape
        self.axes = _norm_axes(axis, x.ndim)
        self.keepdims = keepdims
        self.count = int(np.prod([x.shape[a] for a in self.axes])) if self.axes else 1
        return np.asarray(x.mean(axis=self.axes, keepdims=keepdims))

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return np.broadcast_to(grad / self.count, self.shape).copy()


class Reshape(Function):
    def forward(self, x, shape):
        self.shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError:
            raise ShapeError("reshape", f"cannot view {x.shape} as {tuple(shape)}") from None

    def backward(self, grad):
        return grad.reshape(self.shape)


class Transpose(Function):
    def forward(self, x, axes=None):
        self.axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
        return np.transpose(x, self.axes)

    def backward(self, grad):
        return np.transpose(grad, np.argsort(self.axes))


class Flip(Function):
    def forward(self, x, axis):
        self.axis = axis
        return np.flip(x, axis=axis).copy()

    def backward(self, grad):
        return np.flip(grad, axis=self.axis).copy()


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


class GetItem(Function):
    def forward(self, x, index):
        self.shape = x.shape
        self.dtype = x.dtype
        self.index = index
        return np.array(x[index])

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=self.dtype)
        if _is_basic_index(self.index):
            # basic indexing never repeats an element
            out[self.index] = grad
        else:
            np.add.at(out, self.index, grad)
        return out


class Concat(Function):
    def forward(self, *arrays, axis=0):
        ref = arrays[0]
        ax = axis % ref.ndim
        for a in arrays[1:]:
            if a.ndim != ref.ndim or any(a.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
                raise ShapeError("concat", f"extents {ref.shape} and {a.shape} differ off axis {axis}")
        self.axis = ax
        self.splits = np.cumsum([a.shape[ax] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=ax)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class Stack(Function):
    def forward(self, *arrays, axis=0):
        shapes = {a.shape for a in arrays}
        if len(shapes) != 1:
            raise ShapeError("stack", f"inputs have differing shapes {sorted(shapes)}")
        self.axis = axis
        return np.stack(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.take(grad, i, axis=self.axis) for i in range(grad.shape[self.axis]))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Stack.apply(*tensors, axis=axis)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


# -----------------------------
# Convolution and pooling
# -----------------------------
class ConvNd(Function):
    """
    Cross-correlation over the trailing 2 or 3 axes.

    x: (N, C, *spatial), w: (O, C, *kernel). Output extent per axis is
    (L + 2p - k) // s + 1. Implemented by windowed tensordot (im2col view).
    """

    def forward(self, x, w, stride, padding):
        nsp = w.ndim - 2
        op = f"conv{nsp}d"
        if x.ndim != nsp + 2:
            raise ShapeError(op, f"expected {nsp + 2}-d input, got shape {x.shape}")
        if x.shape[1] != w.shape[1]:
            raise ShapeError(op, f"input channels {x.shape[1]} != kernel channels {w.shape[1]} (input {x.shape}, kernel {w.shape})")
        kernel = w.shape[2:]
        xp = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in padding])
        out_sp = tuple((xp.shape[2 + i] - kernel[i]) // stride[i] + 1 for i in range(nsp))
        if any(o <= 0 for o in out_sp) or any(xp.shape[2 + i] < kernel[i] for i in range(nsp)):
            raise ShapeError(op, f"kernel {kernel} does not fit padded input {xp.shape[2:]}")

        sp_axes = tuple(range(2, 2 + nsp))
        win = sliding_window_view(xp, kernel, axis=sp_axes)
        win = win[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)]
        self.win = win
        self.w = w
        self.x_shape = x.shape
        self.xp_shape = xp.shape
        self.stride, self.padding, self.out_sp, self.nsp = stride, padding, out_sp, nsp

        k_axes = list(range(2 + nsp, 2 + 2 * nsp))
        out = np.tensordot(win, w, axes=([1] + k_axes, [1] + list(sp_axes)))
        return np.ascontiguousarray(np.moveaxis(out, -1, 1))

    def backward(self, grad):
        nsp = self.nsp
        sp_axes = list(range(2, 2 + nsp))
        gw = np.tensordot(grad, self.win, axes=([0] + sp_axes, [0] + sp_axes))

        cols = np.tensordot(grad, self.w, axes=([1], [0]))
        cols = np.moveaxis(cols, 1 + nsp, 1)
        gxp = np.zeros(self.xp_shape, dtype=grad.dtype)
        lead = (slice(None),) * (2 + nsp)
        for offset in np.ndindex(*self.w.shape[2:]):
            region = tuple(
                slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, self.stride, self.out_sp)
            )
            gxp[(slice(None), slice(None)) + region] += cols[lead + offset]
        inner = tuple(slice(p, p + n) for p, n in zip(self.padding, self.x_shape[2:]))
        return gxp[(slice(None), slice(None)) + inner], gw


def _tuple(v, n: int) -> Tuple[int, ...]:
    if isinstance(v, int):
        return (v,) * n
    v = tuple(int(x) for x in v)
    if len(v) != n:
        raise ShapeError("conv", f"expected {n} values, got {v}")
    return v


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    out = ConvNd.apply(x, w, stride=_tuple(stride, 2), padding=_tuple(padding, 2))
    if b is not None:
        out = out + b.reshape(1, -1, 1, 1)
    return out


def conv3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    out = ConvNd.apply(x, w, stride=_tuple(stride, 3), padding=_tuple(padding, 3))
    if b is not None:
        out = out + b.reshape(1, -1, 1, 1, 1)
    return out


class MaxPool2d(Function):
    def forward(self, x, kernel, stride):
        if x.ndim != 4:
            raise ShapeError("max_pool2d", f"expected (N, C, H, W), got {x.shape}")
        if x.shape[2] < kernel or x.shape[3] < kernel:
            raise ShapeError("max_pool2d", f"window {kernel} larger than input {x.shape[2:]}")
        win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
        n, c, ho, wo = win.shape[:4]
        flat = win.reshape(n, c, ho, wo, kernel * kernel)
        self.arg = flat.argmax(axis=-1)
        self.x_shape, self.dtype = x.shape, x.dtype
        self.kernel, self.stride, self.out = kernel, stride, (ho, wo)
        return np.take_along_axis(flat, self.arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        gx = np.zeros(self.x_shape, dtype=self.dtype)
        ho, wo = self.out
        s = self.stride
        for idx in range(self.kernel * self.kernel):
            i, j = divmod(idx, self.kernel)
            gx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += grad * (self.arg == idx)
        return gx


def max_pool2d(x: Tensor, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    return MaxPool2d.apply(x, kernel=int(kernel), stride=int(stride or kernel))


# -----------------------------
# Dropout
# -----------------------------
class DropoutMask(Function):
    def forward(self, x, mask, scale):
        self.factor = mask.astype(x.dtype) * x.dtype.type(scale)
        return x * self.factor

    def backward(self, grad):
        return grad * self.factor


def dropout(x: Tensor, keep_prob: float, rng: Optional[RngStream], training: bool) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/keep_prob at train time, eval is identity."""
    if not training or keep_prob >= 1.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an RngStream")
    mask = rng.generator.random(x.shape) < keep_prob
    return DropoutMask.apply(x, mask=mask, scale=1.0 / keep_prob)


def log_prob(p: Tensor) -> Tensor:
    """log of a probability tensor clamped to [PROB_EPS, 1 - PROB_EPS]."""
    return p.clamp(PROB_EPS, 1.0 - PROB_EPS).log()


def log1m_prob(p: Tensor) -> Tensor:
    return (1.0 - p.clamp(PROB_EPS, 1.0 - PROB_EPS)).log()
