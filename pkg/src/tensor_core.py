"""
Dense numeric substrate for Kernel Warehouse.
Rank-4 tensors in (batch, channels, height, width) layout, 2-D convolution via
im2col, pooling, fully connected layers, activations, batch normalization and
the fused softmax cross-entropy loss, each paired with its exact adjoint.
"""
import logging
from typing import Any, Dict, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

DTYPES = {
    "float32": np.float32,
    "float64": np.float64,
}

BN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when tensor dimensions are incompatible."""


def resolve_dtype(dtype: Any) -> np.dtype:
    """
    Map a dtype name or numpy type onto one of the supported scalar types.

    Args:
        dtype: "float32", "float64" or a numpy dtype

    Returns:
        numpy dtype object

    Raises:
        ValueError: If the dtype is not supported
    """
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ValueError(f"Unsupported dtype '{dtype}'. Expected one of {sorted(DTYPES)}")
        return np.dtype(DTYPES[dtype])
    resolved = np.dtype(dtype)
    if resolved not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"Unsupported dtype '{resolved}'. Expected float32 or float64")
    return resolved


def as_tensor4(data: Any, dtype: Any = None) -> np.ndarray:
    """
    Validate rank-4 layout and cast to the run dtype.

    Args:
        data: Array-like with four dimensions (batch, channels, height, width)
        dtype: Target scalar type; keeps the input type when None

    Returns:
        C-contiguous numpy array

    Raises:
        ShapeError: If the input is not rank 4
    """
    array = np.asarray(data)
    if array.ndim != 4:
        raise ShapeError(f"Expected a rank-4 tensor (N, C, H, W), got shape {array.shape}")
    if dtype is not None:
        array = array.astype(resolve_dtype(dtype), copy=False)
    return np.ascontiguousarray(array)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    """Spatial output extent of a convolution or pooling window."""
    return (size + 2 * pad - k) // stride + 1


def _check_conv_args(input_shape: Tuple[int, ...], kernel_shape: Tuple[int, ...], stride: int, pad: int) -> Tuple[int, int]:
    if len(kernel_shape) != 4:
        raise ShapeError(f"Expected kernel dims (f, c, k, k), got {kernel_shape}")
    if len(input_shape) != 4:
        raise ShapeError(f"Expected input dims (N, C, H, W), got {input_shape}")
    f, c, kh, kw = kernel_shape
    if kh != kw:
        raise ShapeError(f"Only square kernels are supported, got kernel shape {kernel_shape}")
    if input_shape[1] != c:
        raise ShapeError(f"Input shape {input_shape} does not match kernel shape {kernel_shape}: channel count {input_shape[1]} != {c}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"Invalid stride {stride} or pad {pad} for input shape {input_shape} and kernel shape {kernel_shape}")
    out_h = conv_output_size(input_shape[2], kh, stride, pad)
    out_w = conv_output_size(input_shape[3], kh, stride, pad)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"Input shape {input_shape} is too small for kernel shape {kernel_shape} at stride {stride}, pad {pad}")
    return out_h, out_w


def im2col(x: np.ndarray, k: int, stride: int, pad: int, pad_value: float = 0.0) -> Tuple[np.ndarray, int, int]:
    """
    Unfold sliding windows into rows.

    Args:
        x: Input tensor (N, C, H, W)
        k: Window size
        stride: Window step
        pad: Zero padding on each spatial border
        pad_value: Fill value for the padded border

    Returns:
        Tuple of (columns with shape (N, out_h*out_w, C*k*k), out_h, out_w).
        Each row is ordered (channel, row, col) to match a (f, c, k, k) kernel.
    """
    n, c, h, w = x.shape
    out_h = conv_output_size(h, k, stride, pad)
    out_w = conv_output_size(w, k, stride, pad)
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="constant", constant_values=pad_value)
    windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, out_h * out_w, c * k * k)
    return np.ascontiguousarray(cols), out_h, out_w


def col2im(cols: np.ndarray, input_shape: Tuple[int, int, int, int], k: int, stride: int, pad: int) -> np.ndarray:
    """
    Fold rows produced by im2col back into an image, summing overlaps.

    Args:
        cols: Columns (N, out_h*out_w, C*k*k)
        input_shape: Shape of the original input (N, C, H, W)
        k: Window size
        stride: Window step
        pad: Padding used by im2col

    Returns:
        Tensor with the original input shape
    """
    n, c, h, w = input_shape
    out_h = conv_output_size(h, k, stride, pad)
    out_w = conv_output_size(w, k, stride, pad)
    windows = cols.reshape(n, out_h, out_w, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        row_stop = i + stride * out_h
        for j in range(k):
            col_stop = j + stride * out_w
            padded[:, :, i:row_stop:stride, j:col_stop:stride] += windows[:, :, :, :, i, j]
    if pad > 0:
        return padded[:, :, pad:pad + h, pad:pad + w].copy()
    return padded


def _forward_cols(cols: np.ndarray, kernels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    # one (P, CKK) @ (CKK, f) product per batch element, kernels indexed per element
    n = cols.shape[0]
    f = kernels.shape[1]
    out = np.empty((n, f, out_h * out_w), dtype=cols.dtype)
    for i in range(n):
        out[i] = (cols[i] @ kernels[i].reshape(f, -1).T).T
    return out.reshape(n, f, out_h, out_w)


def _backward_cols(grad_out: np.ndarray, cols: np.ndarray, kernels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    n, f = grad_out.shape[:2]
    grad_flat = grad_out.reshape(n, f, -1)
    grad_cols = np.empty_like(cols)
    grad_kernels = np.empty((n, f, cols.shape[2]), dtype=cols.dtype)
    for i in range(n):
        weights = kernels[i].reshape(f, -1)
        grad_cols[i] = grad_flat[i].T @ weights
        grad_kernels[i] = grad_flat[i] @ cols[i]
    return grad_cols, grad_kernels


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """
    Bias-free 2-D cross-correlation.

    Args:
        x: Input tensor (N, C, H, W)
        kernel: Kernel (f, c, k, k)
        stride: Positive stride
        pad: Non-negative zero padding

    Returns:
        Output tensor (N, f, out_h, out_w)

    Raises:
        ShapeError: If the input and kernel dimensions disagree
    """
    _check_conv_args(x.shape, kernel.shape, stride, pad)
    cols, out_h, out_w = im2col(x, kernel.shape[2], stride, pad)
    shared = np.broadcast_to(kernel, (x.shape[0],) + kernel.shape)
    return _forward_cols(cols, shared, out_h, out_w)


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, kernel: np.ndarray, stride: int = 1, pad: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Adjoint of conv2d_forward.

    Returns:
        Tuple of (grad_input, grad_kernel)

    Raises:
        ShapeError: If grad_out does not match the forward output dims
    """
    out_h, out_w = _check_conv_args(x.shape, kernel.shape, stride, pad)
    expected = (x.shape[0], kernel.shape[0], out_h, out_w)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output shape {expected}")
    cols, _, _ = im2col(x, kernel.shape[2], stride, pad)
    shared = np.broadcast_to(kernel, (x.shape[0],) + kernel.shape)
    grad_cols, grad_kernels = _backward_cols(grad_out, cols, shared)
    grad_kernel = np.zeros(kernel.shape, dtype=x.dtype).reshape(kernel.shape[0], -1)
    for i in range(x.shape[0]):
        grad_kernel += grad_kernels[i]
    grad_input = col2im(grad_cols, x.shape, kernel.shape[2], stride, pad)
    return grad_input, grad_kernel.reshape(kernel.shape)


def conv2d_forward_per_sample(x: np.ndarray, kernels: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """
    Convolve each batch element with its own kernel.

    Args:
        x: Input tensor (N, C, H, W)
        kernels: Per-element kernels (N, f, c, k, k)

    Returns:
        Output tensor (N, f, out_h, out_w); identical to conv2d_forward when all kernels coincide
    """
    if kernels.ndim != 5 or kernels.shape[0] != x.shape[0]:
        raise ShapeError(f"Per-sample kernels shape {kernels.shape} does not match input shape {x.shape}")
    _check_conv_args(x.shape, kernels.shape[1:], stride, pad)
    cols, out_h, out_w = im2col(x, kernels.shape[3], stride, pad)
    return _forward_cols(cols, kernels, out_h, out_w)


def conv2d_backward_per_sample(grad_out: np.ndarray, x: np.ndarray, kernels: np.ndarray, stride: int = 1, pad: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Adjoint of conv2d_forward_per_sample.

    Returns:
        Tuple of (grad_input, grad_kernels) where grad_kernels has shape (N, f, c, k, k)
    """
    if kernels.ndim != 5 or kernels.shape[0] != x.shape[0]:
        raise ShapeError(f"Per-sample kernels shape {kernels.shape} does not match input shape {x.shape}")
    out_h, out_w = _check_conv_args(x.shape, kernels.shape[1:], stride, pad)
    expected = (x.shape[0], kernels.shape[1], out_h, out_w)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output shape {expected}")
    cols, _, _ = im2col(x, kernels.shape[3], stride, pad)
    grad_cols, grad_kernels = _backward_cols(grad_out, cols, kernels)
    grad_input = col2im(grad_cols, x.shape, kernels.shape[3], stride, pad)
    return grad_input, grad_kernels.reshape(kernels.shape)


def max_pool2d_forward(x: np.ndarray, k: int, stride: int, pad: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Channel-wise max pooling with -inf padding.

    Returns:
        Tuple of (output (N, C, out_h, out_w), argmax indices into each window)
    """
    n, c, h, w = x.shape
    if conv_output_size(h, k, stride, pad) < 1 or conv_output_size(w, k, stride, pad) < 1:
        raise ShapeError(f"Input shape {x.shape} is too small for a {k}x{k} pooling window")
    cols, out_h, out_w = im2col(x.reshape(n * c, 1, h, w), k, stride, pad, pad_value=-np.inf)
    argmax = cols.argmax(axis=2)
    out = np.take_along_axis(cols, argmax[..., None], axis=2)[..., 0]
    return out.reshape(n, c, out_h, out_w), argmax


def max_pool2d_backward(grad_out: np.ndarray, argmax: np.ndarray, input_shape: Tuple[int, int, int, int], k: int, stride: int, pad: int = 0) -> np.ndarray:
    """Route each output gradient to the window position that won the max."""
    n, c, h, w = input_shape
    grad_cols = np.zeros((n * c, argmax.shape[1], k * k), dtype=grad_out.dtype)
    np.put_along_axis(grad_cols, argmax[..., None], grad_out.reshape(n * c, -1)[..., None], axis=2)
    return col2im(grad_cols, (n * c, 1, h, w), k, stride, pad).reshape(input_shape)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """
    Per-channel mean over all spatial positions.

    Args:
        x: Input tensor (N, C, H, W)

    Returns:
        Matrix (N, C)
    """
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"Global average pooling needs spatial dims >= 1, got shape {x.shape}")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(grad_out: np.ndarray, input_shape: Tuple[int, int, int, int]) -> np.ndarray:
    """Spread each channel gradient evenly over the pooled positions."""
    n, c, h, w = input_shape
    if grad_out.shape != (n, c):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match pooled shape {(n, c)}")
    return np.broadcast_to((grad_out / (h * w))[:, :, None, None], input_shape).copy()


def fc_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """
    Fully connected layer y = x W^T + b.

    Args:
        x: Inputs (N, d_in)
        weights: Matrix (d_out, d_in)
        bias: Vector (d_out,)
    """
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[1] or bias.shape != (weights.shape[0],):
        raise ShapeError(f"FC shapes do not line up: input {x.shape}, weights {weights.shape}, bias {bias.shape}")
    return x @ weights.T + bias


def fc_backward(grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Adjoint of fc_forward.

    Returns:
        Tuple of (grad_input, grad_weights, grad_bias)
    """
    if grad_out.shape != (x.shape[0], weights.shape[0]):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match FC output shape {(x.shape[0], weights.shape[0])}")
    return grad_out @ weights, grad_out.T @ x, grad_out.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Subgradient 0 at x = 0."""
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=axis, keepdims=True)


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"Logits shape {logits.shape} does not match labels shape {labels.shape}")
    return labels.astype(np.int64, copy=False)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """
    Mean softmax cross-entropy over the batch, computed through log-sum-exp.

    Args:
        logits: Matrix (N, classes)
        labels: Integer class per row

    Returns:
        Scalar loss
    """
    labels = _check_labels(logits, labels)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(logits.shape[0]), labels]
    return float(np.mean(log_norm - picked))


def cross_entropy_backward(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of the mean cross-entropy with respect to the logits."""
    labels = _check_labels(logits, labels)
    grad = softmax(logits, axis=1)
    grad[np.arange(logits.shape[0]), labels] -= 1
    return grad / logits.shape[0]


def batch_norm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = BN_EPS) -> Tuple[np.ndarray, Dict[str, Any]]:
    """
    Training-mode batch normalization over (N, H, W) with a per-channel affine map.
    No running statistics are kept.

    Returns:
        Tuple of (output, cache for batch_norm_backward)
    """
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"BatchNorm parameters {gamma.shape}/{beta.shape} do not match input shape {x.shape}")
    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    x_hat = centered * inv_std
    out = x_hat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out, {"x_hat": x_hat, "inv_std": inv_std, "gamma": gamma}


def batch_norm_backward(grad_out: np.ndarray, cache: Dict[str, Any]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Adjoint of batch_norm_forward.

    Returns:
        Tuple of (grad_input, grad_gamma, grad_beta)
    """
    x_hat = cache["x_hat"]
    inv_std = cache["inv_std"]
    gamma = cache["gamma"]
    grad_gamma = (grad_out * x_hat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_x_hat = grad_out * gamma[None, :, None, None]
    mean_grad = grad_x_hat.mean(axis=(0, 2, 3), keepdims=True)
    mean_grad_xhat = (grad_x_hat * x_hat).mean(axis=(0, 2, 3), keepdims=True)
    grad_input = (grad_x_hat - mean_grad - x_hat * mean_grad_xhat) * inv_std
    return grad_input, grad_gamma, grad_beta
