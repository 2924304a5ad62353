"""
Forward and backward numeric kernels on dense numpy arrays.

Every function is pure: caches needed by a backward pass are returned by the
matching forward call and handed back explicitly. Kernels keep the floating
dtype of their inputs, so float32 training and float64 gradient checks run
through the same code.
"""
import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from steerkit.defs import TRAIN, EVAL, MODES, ConvSpec
from steerkit.errors import ConfigurationError, DimensionError


LOGGER = logging.getLogger(__name__)


def _float_dtype(*arrays):
    dtype = np.result_type(*arrays)
    if not np.issubdtype(dtype, np.floating):
        return np.dtype(np.float32)
    return dtype


def _require_rank(array, rank, name):
    if array.ndim != rank:
        raise DimensionError(
            f"{name} must have rank {rank}, got shape {array.shape}",
            axis="rank"
        )


def as_tensor(data, dtype=np.float32):
    """
    :param data: array-like
    :param dtype: numpy dtype
    :return: numpy.ndarray, contiguous copy-free when possible
    """
    return np.ascontiguousarray(data, dtype=dtype)


#
# CONVOLUTION
#
def _check_conv(inputs, weights, bias, spec):
    _require_rank(inputs, 4, "conv input")
    _require_rank(weights, 4, "conv weights")
    _require_rank(bias, 1, "conv bias")

    if spec.stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {spec.stride}")
    if inputs.shape[1] != spec.in_channels:
        raise DimensionError(
            f"input has {inputs.shape[1]} channels, expected "
            f"{spec.in_channels}", axis="channels")
    expected = (spec.out_channels, spec.in_channels,
                spec.kernel_h, spec.kernel_w)
    if weights.shape != expected:
        raise DimensionError(
            f"weights shape {weights.shape} does not match {expected}",
            axis="weights")
    if bias.shape != (spec.out_channels,):
        raise DimensionError(
            f"bias shape {bias.shape} does not match "
            f"({spec.out_channels},)", axis="bias")

    out_h, out_w = spec.output_extent(inputs.shape[2], inputs.shape[3])
    if out_h < 1:
        raise DimensionError(
            f"height {inputs.shape[2]} too small for kernel {spec.kernel_h}",
            axis="height")
    if out_w < 1:
        raise DimensionError(
            f"width {inputs.shape[3]} too small for kernel {spec.kernel_w}",
            axis="width")
    return out_h, out_w


def _windows(inputs, spec, out_h, out_w):
    """N, C, out_h, out_w, kh, kw view of the receptive fields."""
    s = spec.stride
    view = sliding_window_view(inputs, (spec.kernel_h, spec.kernel_w),
                               axis=(2, 3))
    return view[:, :, ::s, ::s][:, :, :out_h, :out_w]


def conv2d_forward(inputs, weights, bias, spec):
    """
    Valid cross-correlation plus bias.

    :param inputs: numpy.ndarray, (N, Cin, H, W)
    :param weights: numpy.ndarray, (Cout, Cin, kh, kw)
    :param bias: numpy.ndarray, (Cout,)
    :param spec: steerkit.ConvSpec
    :return: numpy.ndarray, (N, Cout, H', W')
    """
    out_h, out_w = _check_conv(inputs, weights, bias, spec)
    dtype = _float_dtype(inputs, weights)

    windows = _windows(inputs, spec, out_h, out_w)
    out = np.tensordot(windows, weights, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + bias[None, :, None, None]
    return np.ascontiguousarray(out, dtype=dtype)


def conv2d_backward(grad_out, cached_input, weights, spec):
    """
    :param grad_out: numpy.ndarray, (N, Cout, H', W')
    :param cached_input: numpy.ndarray, the forward input
    :param weights: numpy.ndarray, (Cout, Cin, kh, kw)
    :param spec: steerkit.ConvSpec
    :return: tuple, (grad_input, grad_weights, grad_bias)
    """
    bias_stub = np.zeros(spec.out_channels, dtype=weights.dtype)
    out_h, out_w = _check_conv(cached_input, weights, bias_stub, spec)
    expected = (cached_input.shape[0], spec.out_channels, out_h, out_w)
    if grad_out.shape != expected:
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match forward output "
            f"{expected}", axis="grad_out")

    dtype = _float_dtype(grad_out, cached_input, weights)
    s = spec.stride

    windows = _windows(cached_input, spec, out_h, out_w)
    grad_weights = np.tensordot(grad_out, windows,
                                axes=([0, 2, 3], [0, 2, 3]))
    grad_bias = grad_out.sum(axis=(0, 2, 3))

    grad_input = np.zeros(cached_input.shape, dtype=dtype)
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            # (N, Cout, h, w) x (Cout, Cin) -> (N, h, w, Cin)
            contrib = np.tensordot(grad_out, weights[:, :, i, j],
                                   axes=([1], [0]))
            grad_input[:, :,
                       i:i + s * (out_h - 1) + 1:s,
                       j:j + s * (out_w - 1) + 1:s] += \
                contrib.transpose(0, 3, 1, 2)

    return (grad_input,
            np.ascontiguousarray(grad_weights, dtype=dtype),
            np.ascontiguousarray(grad_bias, dtype=dtype))


#
# POOLING
#
def _pool_windows(inputs):
    _require_rank(inputs, 4, "pool input")
    n, c, h, w = inputs.shape
    if h < 2:
        raise DimensionError(f"height {h} < 2 cannot be pooled",
                             axis="height")
    if w < 2:
        raise DimensionError(f"width {w} < 2 cannot be pooled", axis="width")

    out_h, out_w = h // 2, w // 2
    trimmed = inputs[:, :, :2 * out_h, :2 * out_w]
    # Window scan order is row-major: (0,0), (0,1), (1,0), (1,1).
    return (trimmed.reshape(n, c, out_h, 2, out_w, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, out_h, out_w, 4))


def _unpool(window_grads, input_shape, dtype):
    n, c, h, w = input_shape
    out_h, out_w = h // 2, w // 2
    grad_input = np.zeros(input_shape, dtype=dtype)
    grad_input[:, :, :2 * out_h, :2 * out_w] = (
        window_grads.reshape(n, c, out_h, out_w, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, 2 * out_h, 2 * out_w)
    )
    return grad_input


def maxpool2x2_forward(inputs):
    """
    2x2 max pooling with stride 2; a trailing odd row or column is dropped.

    :param inputs: numpy.ndarray, (N, C, H, W)
    :return: tuple, (output, argmax) where argmax holds the winning
             row-major window slot 0..3, first occurrence on ties
    """
    windows = _pool_windows(inputs)
    argmax = np.argmax(windows, axis=-1).astype(np.int8)
    output = np.take_along_axis(windows, argmax[..., None].astype(np.intp),
                                axis=-1)[..., 0]
    return np.ascontiguousarray(output), argmax


def argmax_positions(argmax):
    """
    :param argmax: numpy.ndarray, map returned by maxpool2x2_forward
    :return: tuple, (row, col) offsets within each window
    """
    return np.divmod(argmax.astype(np.intp), 2)


def maxpool2x2_backward(grad_out, argmax, input_shape):
    """
    :param grad_out: numpy.ndarray, (N, C, H//2, W//2)
    :param argmax: numpy.ndarray, from the matching forward call
    :param input_shape: tuple, (N, C, H, W)
    :return: numpy.ndarray, gradient routed to the argmax positions
    """
    n, c, h, w = input_shape
    expected = (n, c, h // 2, w // 2)
    if argmax.shape != expected:
        raise DimensionError(
            f"argmax map {argmax.shape} is stale for input {input_shape}",
            axis="argmax")
    if grad_out.shape != expected:
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match {expected}",
            axis="grad_out")

    dtype = _float_dtype(grad_out)
    window_grads = np.zeros(expected + (4,), dtype=dtype)
    np.put_along_axis(window_grads, argmax[..., None].astype(np.intp),
                      grad_out[..., None], axis=-1)
    return _unpool(window_grads, input_shape, dtype)


def avgpool2x2_forward(inputs):
    """
    :param inputs: numpy.ndarray, (N, C, H, W)
    :return: numpy.ndarray, (N, C, H//2, W//2)
    """
    windows = _pool_windows(inputs)
    return np.ascontiguousarray(windows.mean(axis=-1),
                                dtype=_float_dtype(inputs))


def avgpool2x2_backward(grad_out, input_shape):
    n, c, h, w = input_shape
    expected = (n, c, h // 2, w // 2)
    if grad_out.shape != expected:
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match {expected}",
            axis="grad_out")

    dtype = _float_dtype(grad_out)
    window_grads = np.repeat(grad_out[..., None] / 4.0, 4, axis=-1)
    return _unpool(window_grads.astype(dtype), input_shape, dtype)


#
# AFFINE
#
def linear_forward(inputs, weights, bias):
    """
    :param inputs: numpy.ndarray, (N, F)
    :param weights: numpy.ndarray, (F, G)
    :param bias: numpy.ndarray, (G,)
    :return: numpy.ndarray, (N, G)
    """
    _require_rank(inputs, 2, "linear input")
    _require_rank(weights, 2, "linear weights")
    if inputs.shape[1] != weights.shape[0]:
        raise DimensionError(
            f"input has {inputs.shape[1]} features, weights expect "
            f"{weights.shape[0]}", axis="features")
    if bias.shape != (weights.shape[1],):
        raise DimensionError(
            f"bias shape {bias.shape} does not match ({weights.shape[1]},)",
            axis="bias")

    return inputs @ weights + bias


def linear_backward(grad_out, cached_input, weights):
    """
    :return: tuple, (grad_input, grad_weights, grad_bias)
    """
    if grad_out.shape != (cached_input.shape[0], weights.shape[1]):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match forward output "
            f"({cached_input.shape[0]}, {weights.shape[1]})",
            axis="grad_out")

    return (grad_out @ weights.T,
            cached_input.T @ grad_out,
            grad_out.sum(axis=0))


#
# ACTIVATIONS
#
def relu_forward(inputs):
    return np.maximum(inputs, 0).astype(_float_dtype(inputs), copy=False)


def relu_backward(grad_out, cached_input):
    """Gradient at exactly zero is zero."""
    if grad_out.shape != cached_input.shape:
        raise DimensionError("grad_out and cached input differ in shape",
                             axis="grad_out")
    return np.where(cached_input > 0, grad_out, 0).astype(grad_out.dtype)


def elu_forward(inputs, alpha=1.0):
    negative = alpha * np.expm1(np.minimum(inputs, 0))
    return np.where(inputs > 0, inputs, negative).astype(
        _float_dtype(inputs), copy=False)


def elu_backward(grad_out, cached_input, alpha=1.0):
    if grad_out.shape != cached_input.shape:
        raise DimensionError("grad_out and cached input differ in shape",
                             axis="grad_out")
    slope = np.where(cached_input > 0, 1.0,
                     alpha * np.exp(np.minimum(cached_input, 0)))
    return (grad_out * slope).astype(grad_out.dtype)


#
# DROPOUT
#
def dropout(inputs, rate, mode, rng=None):
    """
    Inverted dropout: kept elements are scaled by 1 / (1 - rate) at train
    time so evaluation is the identity.

    :param inputs: numpy.ndarray
    :param rate: float, in [0, 1)
    :param mode: str, "train" or "eval"
    :param rng: numpy.random.Generator, required in train mode
    :return: tuple, (output, keep mask)
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode: {mode}")

    if mode == EVAL or rate == 0.0:
        return inputs, np.ones(inputs.shape, dtype=bool)

    if rng is None:
        raise ConfigurationError("train-mode dropout needs a random stream")

    mask = rng.random(inputs.shape) >= rate
    scale = inputs.dtype.type(1.0 / (1.0 - rate))
    return np.where(mask, inputs * scale, 0).astype(inputs.dtype), mask


def dropout_backward(grad_out, mask, rate):
    if grad_out.shape != mask.shape:
        raise DimensionError("grad_out and dropout mask differ in shape",
                             axis="grad_out")
    if rate == 0.0:
        return grad_out
    scale = grad_out.dtype.type(1.0 / (1.0 - rate))
    return np.where(mask, grad_out * scale, 0).astype(grad_out.dtype)


#
# GRADIENT CHECKING
#
def numerical_gradient(func, point, eps=1e-3, indices=None):
    """
    Central finite differences of a scalar function, evaluated in float64.

    :param func: callable, numpy.ndarray -> float
    :param point: numpy.ndarray, perturbed in place and restored
    :param eps: float
    :param indices: iterable of flat indices, defaults to every element
    :return: numpy.ndarray, same shape as point (zero where not evaluated)
    """
    grad = np.zeros(point.shape, dtype=np.float64)
    flat = point.reshape(-1)
    flat_grad = grad.reshape(-1)
    for index in (range(flat.size) if indices is None else indices):
        original = flat[index]
        flat[index] = original + eps
        upper = float(func(point))
        flat[index] = original - eps
        lower = float(func(point))
        flat[index] = original
        flat_grad[index] = (upper - lower) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric, floor=1e-8):
    """
    :return: float, max over elements of |a - n| / max(|a| + |n|, floor)
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


__all__ = [
    "TRAIN", "EVAL", "ConvSpec", "as_tensor",
    "conv2d_forward", "conv2d_backward",
    "maxpool2x2_forward", "maxpool2x2_backward", "argmax_positions",
    "avgpool2x2_forward", "avgpool2x2_backward",
    "linear_forward", "linear_backward",
    "relu_forward", "relu_backward", "elu_forward", "elu_backward",
    "dropout", "dropout_backward",
    "numerical_gradient", "relative_error",
]
