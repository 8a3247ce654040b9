"""
Dense tensors, the gradient tape and the numerical kernels of the autoencoder

Forward kernels are pure numpy functions of their inputs. While a GradTape is
active (``with GradTape() as tape:``) every kernel also records a closure that
maps the gradient of its output to the gradients of its inputs, so that
``tape.backward(loss)`` can replay the graph in reverse.
"""

import contextvars
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from lapdae.errors import DimensionError, GradientError

logger = logging.getLogger(__name__)

_ACTIVE_TAPE = contextvars.ContextVar("lapdae_active_tape", default=None)


def _storage_dtype(*arrays: np.ndarray) -> type:
    if any(np.asarray(a).dtype == np.float64 for a in arrays):
        return np.float64
    return np.float32


class Tensor:
    """
    Dense row-major array of reals; image tensors use (batch, channel, height, width)

    Storage is float32 unless the source data is float64, which is kept (used for
    gradient checks). Learnable tensors set ``requires_grad`` and a ``name``.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.asarray(data)
        self.data = np.ascontiguousarray(array, dtype=_storage_dtype(array))
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))


TensorLike = Union[Tensor, np.ndarray, float, int, Sequence]


def as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class TapeRecord:
    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class GradTape:
    """
    Ordered record of executed operations plus the gradient map they produce

    Gradients are keyed by parameter identity and accumulate additively over
    every use of the same parameter. A tape can be replayed once; call
    ``reset()`` before recording the next graph.
    """

    def __init__(self):
        self.records: List[TapeRecord] = []
        self.grads: Dict[Tensor, np.ndarray] = {}
        self._consumed = False
        self._token = None

    def __enter__(self) -> "GradTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def reset(self):
        self.records.clear()
        self.grads = {}
        self._consumed = False

    def record(self, op: str, output: Tensor, inputs: Tuple[Tensor, ...], backward_fn):
        if self._consumed:
            raise GradientError("Tape was already replayed; call reset() before recording a new graph")
        self.records.append(TapeRecord(op, output, inputs, backward_fn))
        output._tape = self

    def backward(self, loss: Tensor) -> Dict[Tensor, np.ndarray]:
        """
        Replay the tape in reverse from a scalar loss

        Args:
            loss: Scalar tensor produced by operations recorded on this tape

        Returns:
            Map from every learnable tensor on the tape to d(loss)/d(tensor)
        """
        if self._consumed:
            raise GradientError("backward() called twice on the same tape without reset()")
        if loss._tape is not self:
            raise GradientError("Loss was not recorded on this tape")
        if loss.size != 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self._consumed = True

        adjoints: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=np.float64)}
        leaves: Dict[int, Tensor] = {}
        for rec in reversed(self.records):
            grad_out = adjoints.pop(id(rec.output), None)
            if grad_out is None:
                continue
            for tensor, grad in zip(rec.inputs, rec.backward(grad_out)):
                if grad is None:
                    continue
                if grad.shape != tensor.shape:
                    raise DimensionError(
                        f"{rec.op}: gradient shape {grad.shape} does not match input shape {tensor.shape}"
                    )
                key = id(tensor)
                adjoints[key] = adjoints[key] + grad if key in adjoints else grad
                if tensor.requires_grad:
                    leaves[key] = tensor

        for key, tensor in leaves.items():
            self.grads[tensor] = adjoints[key].astype(tensor.dtype)
        return dict(self.grads)


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Replay the tape that produced ``loss`` and return the gradient map"""
    if loss._tape is None:
        raise GradientError("Loss was not produced under an active GradTape")
    return loss._tape.backward(loss)


def _emit(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape.record(op, out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} cannot be broadcast") from None


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    dtype = _storage_dtype(a.data, b.data)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a.data + b.data).astype(dtype), (a, b), _backward)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    dtype = _storage_dtype(a.data, b.data)

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", (a.data * b.data).astype(dtype), (a, b), _backward)


def relu(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def _backward(g):
        return (g * mask,)

    return _emit("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), _backward)


def _stable_sigmoid(values: np.ndarray) -> np.ndarray:
    values = values.astype(np.float64)
    e = np.exp(-np.abs(values))
    return np.where(values >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    s = _stable_sigmoid(x.data)

    def _backward(g):
        return (g * s * (1.0 - s),)

    return _emit("sigmoid", s.astype(x.dtype), (x,), _backward)


def mse_loss(z: TensorLike, x: TensorLike) -> Tensor:
    """
    Mean over all elements of (z - x)^2, accumulated in float64

    Args:
        z: Reconstruction
        x: Target; plain arrays are treated as constants

    Returns:
        Scalar float64 tensor
    """
    z, x = as_tensor(z), as_tensor(x)
    if z.shape != x.shape:
        raise DimensionError(f"mse_loss: reconstruction shape {z.shape} != target shape {x.shape}")
    diff = z.data.astype(np.float64) - x.data.astype(np.float64)
    count = diff.size

    def _backward(g):
        grad = g * 2.0 * diff / count
        return grad, -grad

    return _emit("mse_loss", np.asarray(np.mean(diff * diff)), (z, x), _backward)


def linear(x: TensorLike, w: TensorLike, b: TensorLike) -> Tensor:
    """Affine map x @ w + b for (N, D) inputs, (D, M) weights and (M,) bias"""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} (axis 1) does not match weight {w.shape} (axis 0)")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    dtype = _storage_dtype(x.data, w.data)

    def _backward(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _emit("linear", (x.data @ w.data + b.data).astype(dtype), (x, w, b), _backward)


def softmax_cross_entropy(logits: TensorLike, labels: np.ndarray) -> Tensor:
    """Mean multinomial cross-entropy of integer labels under softmax(logits)"""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(labels.shape[0])
    count = labels.shape[0]

    def _backward(g):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return (g * grad / count,)

    return _emit("softmax_cross_entropy", np.asarray(-log_probs[rows, labels].mean()), (logits,), _backward)


def _check_conv_args(op: str, x: Tensor, w: Tensor, b: Tensor, in_axis: int, out_axis: int,
                     stride: int, padding: int):
    if x.ndim != 4:
        raise DimensionError(f"{op}: input must be (batch, channels, height, width), got shape {x.shape}")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"{op}: kernels must be square 4-D, got shape {w.shape}")
    if x.shape[1] != w.shape[in_axis]:
        raise DimensionError(
            f"{op}: input channels (input axis 1) = {x.shape[1]} but kernels expect "
            f"{w.shape[in_axis]} (kernel axis {in_axis})"
        )
    if b.shape != (w.shape[out_axis],):
        raise DimensionError(f"{op}: bias shape {b.shape} != ({w.shape[out_axis]},) (kernel axis {out_axis})")
    if stride < 1 or padding < 0:
        raise DimensionError(f"{op}: stride must be >= 1 and padding >= 0, got {stride}, {padding}")


def _pad_spatial(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(padded: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> strided view (B, C, Ho, Wo, K, K)"""
    view = sliding_window_view(padded, (kernel, kernel), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


def _scatter_windows(cols: np.ndarray, stride: int, padded_hw: Tuple[int, int]) -> np.ndarray:
    """Sum (B, C, Ho, Wo, K, K) window contributions back into a (B, C, Hp, Wp) buffer"""
    batch, channels, out_h, out_w, kernel, _ = cols.shape
    buffer = np.zeros((batch, channels) + tuple(padded_hw), dtype=cols.dtype)
    for i in range(kernel):
        for j in range(kernel):
            buffer[:, :, i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride] += cols[..., i, j]
    return buffer


def conv2d(x: TensorLike, kernels: TensorLike, bias: TensorLike, stride: int = 1, padding: int = 0) -> Tensor:
    """
    Cross-correlation of a (B, I, H, W) batch with (O, I, K, K) kernels plus bias

    Output extents are floor((H + 2*padding - K) / stride) + 1 per spatial axis.
    """
    x, w, b = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    _check_conv_args("conv2d", x, w, b, 1, 0, stride, padding)
    if w.shape[2] % 2 == 0:
        raise DimensionError(f"conv2d: kernel size {w.shape[2]} (kernel axes 2, 3) must be odd")
    kernel = w.shape[2]
    height, width = x.shape[2], x.shape[3]
    if height + 2 * padding < kernel or width + 2 * padding < kernel:
        raise DimensionError(
            f"conv2d: spatial extents {height}x{width} (axes 2, 3) with padding {padding} "
            f"are smaller than kernel {kernel}"
        )
    dtype = _storage_dtype(x.data, w.data)
    padded = _pad_spatial(x.data.astype(dtype), padding)
    wd = w.data.astype(dtype)

    out = np.tensordot(_windows(padded, kernel, stride), wd, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + b.data.reshape(1, -1, 1, 1)

    def _backward(g):
        windows = _windows(padded, kernel, stride)
        grad_w = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g, wd, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        grad_padded = _scatter_windows(cols, stride, padded.shape[2:])
        grad_x = grad_padded[:, :, padding:padding + height, padding:padding + width]
        return grad_x, grad_w, g.sum(axis=(0, 2, 3))

    return _emit("conv2d", out.astype(dtype), (x, w, b), _backward)


def conv_transpose2d(x: TensorLike, kernels: TensorLike, bias: TensorLike, stride: int = 1,
                     padding: int = 0, output_padding: int = 0) -> Tensor:
    """
    Transposed convolution ("up-conv") of a (B, I, H, W) batch with (I, O, K, K) kernels

    This is the adjoint of conv2d with the same kernels, stride and padding.
    Output extents are (H - 1) * stride - 2 * padding + K + output_padding.
    """
    x, w, b = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    _check_conv_args("conv_transpose2d", x, w, b, 0, 1, stride, padding)
    if not 0 <= output_padding < stride:
        raise DimensionError(f"conv_transpose2d: output_padding {output_padding} must be in [0, stride={stride})")
    kernel = w.shape[2]
    height, width = x.shape[2], x.shape[3]
    full_h = (height - 1) * stride + kernel + output_padding
    full_w = (width - 1) * stride + kernel + output_padding
    out_h, out_w = full_h - 2 * padding, full_w - 2 * padding
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"conv_transpose2d: padding {padding} leaves no output for input {height}x{width}")
    dtype = _storage_dtype(x.data, w.data)
    xd = x.data.astype(dtype)
    wd = w.data.astype(dtype)

    cols = np.tensordot(xd, wd, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    full = _scatter_windows(cols, stride, (full_h, full_w))
    out = full[:, :, padding:padding + out_h, padding:padding + out_w] + b.data.reshape(1, -1, 1, 1)

    def _backward(g):
        windows = _windows(_pad_spatial(g, padding), kernel, stride)
        grad_x = np.tensordot(windows, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        grad_w = np.tensordot(xd, windows, axes=([0, 2, 3], [0, 2, 3]))
        return grad_x, grad_w, g.sum(axis=(0, 2, 3))

    return _emit("conv_transpose2d", out.astype(dtype), (x, w, b), _backward)
