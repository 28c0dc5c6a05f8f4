"""
Dense (N, C, H, W) tensor primitives with hand-written backward passes.

Tensors are plain numpy arrays in row-major (N, C, H, W) order. Every op keeps
the dtype of its inputs, so the same code runs in float32 for training and
inference and in float64 for gradient checking.

Backward functions take the forward inputs plus the gradient of the loss with
respect to the forward output and return gradients with the same shapes as
the corresponding inputs.
"""
import enum
from typing import NamedTuple, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

DEFAULT_DTYPE = np.float32
GRADCHECK_DTYPE = np.float64
STANDARDIZE_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy an op's preconditions."""


class PoolStatistic(str, enum.Enum):
    MAX = "max"
    AVG = "avg"
    VAR = "var"
    STDVAR = "stdvar"
    POWER = "power"
    # ICD feed only: the FC pair runs on MAX and AVG vectors, outputs are summed
    MAX_AVG = "maxavg"


class Activation(str, enum.Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"


class ConvParams(NamedTuple):
    kernel: np.ndarray  # (C_out, C_in, kH, kW)
    bias: np.ndarray  # (C_out,)


class DenseParams(NamedTuple):
    weight: np.ndarray  # (rows, cols)
    bias: np.ndarray  # (rows,)


def _require_4d(x: np.ndarray, name: str = "x"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be a 4-D (N, C, H, W) tensor, got shape {x.shape}")


def _windows(x: np.ndarray, kh: int, kw: int, pad_h: int, pad_w: int) -> np.ndarray:
    """Sliding (kh, kw) windows over a zero-padded tensor: (N, C, H_out, W_out, kh, kw)."""
    if pad_h or pad_w:
        x = np.pad(x, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)))
    return sliding_window_view(x, (kh, kw), axis=(2, 3))


def _im2col(x: np.ndarray, kh: int, kw: int, pad_h: int, pad_w: int) -> np.ndarray:
    win = _windows(x, kh, kw, pad_h, pad_w)
    n, c, h_out, w_out = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c * kh * kw)


def _pad_or_crop(x: np.ndarray, pad_h: int, pad_w: int) -> np.ndarray:
    # negative amounts crop that many rows/columns from each side
    if pad_h < 0:
        x = x[:, :, -pad_h:x.shape[2] + pad_h]
        pad_h = 0
    if pad_w < 0:
        x = x[:, :, :, -pad_w:x.shape[3] + pad_w]
        pad_w = 0
    if pad_h or pad_w:
        x = np.pad(x, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)))
    return x


def conv_output_shape(x_shape: Tuple[int, ...], kernel_shape: Tuple[int, ...], pad: int) -> Tuple[int, int, int, int]:
    n, c, h, w = x_shape
    c_out, c_in, kh, kw = kernel_shape
    if pad < 0:
        raise ShapeError(f"padding must be non-negative, got {pad}")
    if c != c_in:
        raise ShapeError(f"input has {c} channels but kernel expects {c_in}")
    h_out = h + 2 * pad - kh + 1
    w_out = w + 2 * pad - kw + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"empty spatial output for input {h}x{w}, kernel {kh}x{kw}, pad {pad}")
    return n, c_out, h_out, w_out


def conv2d(x: np.ndarray, p: ConvParams, pad: int = 1) -> np.ndarray:
    """Stride-1 zero-padded 2-D convolution (cross-correlation) with bias."""
    _require_4d(x)
    if p.kernel.ndim != 4 or p.bias.shape != (p.kernel.shape[0],):
        raise ShapeError(f"bad conv params: kernel {p.kernel.shape}, bias {p.bias.shape}")
    n, c_out, h_out, w_out = conv_output_shape(x.shape, p.kernel.shape, pad)
    kh, kw = p.kernel.shape[2:]

    cols = _im2col(x, kh, kw, pad, pad)
    out = cols @ p.kernel.reshape(c_out, -1).T + p.bias
    return np.ascontiguousarray(out.reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2))


def conv2d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray, pad: int = 1) -> Tuple[np.ndarray, ConvParams]:
    _require_4d(x)
    expected = conv_output_shape(x.shape, p.kernel.shape, pad)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match conv output {expected}")
    c_out, c_in, kh, kw = p.kernel.shape
    n, _, h, w = x.shape

    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, c_out)
    cols = _im2col(x, kh, kw, pad, pad)
    grad_kernel = (g.T @ cols).reshape(p.kernel.shape)
    grad_bias = g.sum(axis=0)

    # input gradient: full correlation of grad_out with the flipped, channel-swapped kernel
    flipped = p.kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    padded = _pad_or_crop(grad_out, kh - 1 - pad, kw - 1 - pad)
    grad_cols = _im2col(padded, kh, kw, 0, 0)
    grad_x = grad_cols @ flipped.reshape(c_in, -1).T
    grad_x = np.ascontiguousarray(grad_x.reshape(n, h, w, c_in).transpose(0, 3, 1, 2))
    return grad_x, ConvParams(grad_kernel, grad_bias)


def _check_depthwise(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray):
    _require_4d(x)
    c = x.shape[1]
    if kernels.shape != (c, 3, 3):
        raise ShapeError(f"depth-wise kernels must be ({c}, 3, 3), got {kernels.shape}")
    if bias.shape != (c,):
        raise ShapeError(f"depth-wise bias must be ({c},), got {bias.shape}")


def depthwise_conv2d(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 per-channel convolution, pad 1, stride 1; output channel c sees only input channel c."""
    _check_depthwise(x, kernels, bias)
    win = _windows(x, 3, 3, 1, 1)
    return np.einsum("nchwij,cij->nchw", win, kernels) + bias[None, :, None, None]


def depthwise_conv2d_backward(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, grad_out: np.ndarray):
    _check_depthwise(x, kernels, bias)
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match input {x.shape}")
    win = _windows(x, 3, 3, 1, 1)
    grad_kernels = np.einsum("nchw,nchwij->cij", grad_out, win)
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    grad_win = _windows(grad_out, 3, 3, 1, 1)
    grad_x = np.einsum("nchwij,cij->nchw", grad_win, kernels[:, ::-1, ::-1])
    return grad_x, grad_kernels, grad_bias


def dense(x: np.ndarray, p: DenseParams) -> np.ndarray:
    """Fully-connected layer on (N, cols) rows: out = x W^T + b."""
    if x.ndim != 2 or x.shape[1] != p.weight.shape[1]:
        raise ShapeError(f"dense input {x.shape} does not match weight {p.weight.shape}")
    if p.bias.shape != (p.weight.shape[0],):
        raise ShapeError(f"dense bias {p.bias.shape} does not match weight {p.weight.shape}")
    return x @ p.weight.T + p.bias


def dense_backward(x: np.ndarray, p: DenseParams, grad_out: np.ndarray) -> Tuple[np.ndarray, DenseParams]:
    if grad_out.shape != (x.shape[0], p.weight.shape[0]):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match dense output")
    return grad_out @ p.weight, DenseParams(grad_out.T @ x, grad_out.sum(axis=0))


def activation(x: np.ndarray, kind: Activation) -> np.ndarray:
    if kind is Activation.RELU:
        return np.maximum(x, 0)
    if kind is Activation.SIGMOID:
        return expit(x)
    raise ValueError(f"Unknown activation: {kind}")


def activation_backward(x: np.ndarray, kind: Activation, grad_out: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        # subgradient at 0 is 0
        return grad_out * (x > 0)
    if kind is Activation.SIGMOID:
        s = expit(x)
        return grad_out * s * (1 - s)
    raise ValueError(f"Unknown activation: {kind}")


def standardize_channels(v: np.ndarray, eps: float = STANDARDIZE_EPS) -> np.ndarray:
    """Z-score each row of an (N, C) matrix across its C entries (population std, eps added to std)."""
    if v.ndim != 2 or v.shape[1] < 1:
        raise ShapeError(f"expected an (N, C) matrix with C >= 1, got {v.shape}")
    dev = v - v.mean(axis=1, keepdims=True)
    std = np.sqrt(np.mean(dev * dev, axis=1, keepdims=True))
    return dev / (std + eps)


def standardize_channels_backward(v: np.ndarray, grad_out: np.ndarray, eps: float = STANDARDIZE_EPS) -> np.ndarray:
    c = v.shape[1]
    dev = v - v.mean(axis=1, keepdims=True)
    std = np.sqrt(np.mean(dev * dev, axis=1, keepdims=True))
    denom = std + eps

    grad_dev = grad_out / denom
    grad_std = -np.sum(grad_out * dev, axis=1, keepdims=True) / (denom * denom)
    # d std / d dev_c = dev_c / (C std); dev is all zero where std is
    grad_dev = grad_dev + grad_std * dev / (c * np.where(std > 0, std, 1))
    return grad_dev - grad_dev.mean(axis=1, keepdims=True)


def global_pool(x: np.ndarray, stat: PoolStatistic, eps: float = STANDARDIZE_EPS) -> np.ndarray:
    """Reduce each (n, c) spatial map to one statistic, giving an (N, C) matrix."""
    _require_4d(x)
    n, c, h, w = x.shape
    if h * w < 1:
        raise ShapeError(f"global pooling needs H*W >= 1, got {h}x{w}")
    flat = x.reshape(n, c, h * w)

    if stat is PoolStatistic.AVG:
        return flat.mean(axis=-1)
    if stat is PoolStatistic.MAX:
        return flat.max(axis=-1)
    if stat is PoolStatistic.VAR:
        return flat.var(axis=-1)
    if stat is PoolStatistic.POWER:
        return np.mean(flat * flat, axis=-1)
    if stat is PoolStatistic.STDVAR:
        return standardize_channels(flat.var(axis=-1), eps)
    raise ValueError(f"{stat.value} is not a single pooling statistic")


def global_pool_backward(x: np.ndarray, stat: PoolStatistic, grad_out: np.ndarray, eps: float = STANDARDIZE_EPS) -> np.ndarray:
    _require_4d(x)
    n, c, h, w = x.shape
    if grad_out.shape != (n, c):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match pooled shape {(n, c)}")
    hw = h * w
    flat = x.reshape(n, c, hw)
    g = grad_out[..., None]

    if stat is PoolStatistic.AVG:
        grad = np.broadcast_to(g / hw, flat.shape)
    elif stat is PoolStatistic.MAX:
        grad = np.zeros_like(flat)
        np.put_along_axis(grad, flat.argmax(axis=-1)[..., None], g, axis=-1)
    elif stat is PoolStatistic.VAR:
        grad = g * 2 * (flat - flat.mean(axis=-1, keepdims=True)) / hw
    elif stat is PoolStatistic.POWER:
        grad = g * 2 * flat / hw
    elif stat is PoolStatistic.STDVAR:
        grad_var = standardize_channels_backward(flat.var(axis=-1), grad_out, eps)
        return global_pool_backward(x, PoolStatistic.VAR, grad_var, eps)
    else:
        raise ValueError(f"{stat.value} is not a single pooling statistic")
    return np.array(grad, dtype=x.dtype).reshape(x.shape)


def broadcast_channels(v: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resize of per-channel scalars (N, C) to (N, C, H, W); a broadcast for 1x1 sources."""
    return np.broadcast_to(v[:, :, None, None], v.shape + (height, width))


def pixel_shuffle(x: np.ndarray, r: int) -> np.ndarray:
    """(N, C*r*r, H, W) -> (N, C, rH, rW) with out[n, c, r*i+di, r*j+dj] = x[n, c*r*r + di*r + dj, i, j]."""
    _require_4d(x)
    n, c, h, w = x.shape
    if r < 1 or c % (r * r):
        raise ShapeError(f"channels ({c}) must be divisible by r^2 ({r * r})")
    oc = c // (r * r)
    return x.reshape(n, oc, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, oc, h * r, w * r)


def space_to_depth(x: np.ndarray, r: int) -> np.ndarray:
    """Inverse of pixel_shuffle."""
    _require_4d(x)
    n, c, h, w = x.shape
    if r < 1 or h % r or w % r:
        raise ShapeError(f"spatial size {h}x{w} must be divisible by {r}")
    return x.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h // r, w // r)


def pixel_shuffle_backward(grad_out: np.ndarray, r: int) -> np.ndarray:
    return space_to_depth(grad_out, r)
