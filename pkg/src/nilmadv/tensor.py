"""Forward and reverse-mode kernels for the layer types used by the NILM baselines.

Tensors are plain float64 numpy arrays. Every kernel accepts either a single
sample or a batch with a leading batch axis:

    conv1d:  input (C, L)  or (B, C, L)
    dense:   input (n,)    or (B, n)

Convolution is cross-correlation with valid padding and stride 1.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "as_tensor",
    "conv1d_forward",
    "conv1d_backward",
    "dense_forward",
    "dense_backward",
    "relu",
    "relu_backward",
    "mse_loss",
]


class ShapeError(ValueError):
    """Raised when operand extents do not compose."""


def as_tensor(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0 or 0 in arr.shape:
        raise ShapeError(f"tensor extents must be positive, got shape {arr.shape}")
    return arr


def _batched(x: np.ndarray, ndim: int, name: str) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim:
        return x[None], False
    if x.ndim == ndim + 1:
        return x, True
    raise ShapeError(f"{name} must have {ndim} or {ndim + 1} dims, got shape {x.shape}")


def _check_conv(x: np.ndarray, kernels: np.ndarray) -> None:
    if kernels.ndim != 3:
        raise ShapeError(
            f"kernels must be (channels_out, channels_in, k), got shape {kernels.shape}"
        )
    if x.shape[1] != kernels.shape[1]:
        raise ShapeError(
            f"channels_in mismatch: input has {x.shape[1]}, kernels expect {kernels.shape[1]}"
        )
    k = kernels.shape[2]
    if not x.shape[2] >= k >= 1:
        raise ShapeError(f"length {x.shape[2]} shorter than kernel size {k}")


def conv1d_forward(x, kernels, bias) -> np.ndarray:
    """out[o, t] = bias[o] + sum_{c, j} x[c, t + j] * kernels[o, c, j]."""
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    xb, batched = _batched(x, 2, "input")
    _check_conv(xb, kernels)
    if bias.shape != (kernels.shape[0],):
        raise ShapeError(
            f"bias must have shape (channels_out,)=({kernels.shape[0]},), got {bias.shape}"
        )
    k = kernels.shape[2]
    cols = sliding_window_view(xb, k, axis=2)  # (B, C, T, k)
    out = np.tensordot(cols, kernels, axes=([1, 3], [1, 2]))  # (B, T, O)
    out = out.transpose(0, 2, 1) + bias[None, :, None]
    out = np.ascontiguousarray(out)
    return out if batched else out[0]


def conv1d_backward(grad_out, x, kernels):
    """Adjoints of :func:`conv1d_forward`; returns (grad_input, grad_kernels, grad_bias)."""
    grad_out, x, kernels = as_tensor(grad_out), as_tensor(x), as_tensor(kernels)
    xb, batched = _batched(x, 2, "input")
    gb, g_batched = _batched(grad_out, 2, "grad_out")
    if batched != g_batched:
        raise ShapeError("grad_out and input disagree on the batch axis")
    _check_conv(xb, kernels)
    n_out, _, k = kernels.shape
    expected = (xb.shape[0], n_out, xb.shape[2] - k + 1)
    if gb.shape != expected:
        raise ShapeError(f"grad_out must have shape {expected[1:]}, got {gb.shape[1:]}")

    grad_bias = gb.sum(axis=(0, 2))
    cols = sliding_window_view(xb, k, axis=2)
    grad_kernels = np.tensordot(gb, cols, axes=([0, 2], [0, 2]))  # (O, C, k)

    # full correlation of grad_out with the flipped kernels
    padded = np.pad(gb, ((0, 0), (0, 0), (k - 1, k - 1)))
    gcols = sliding_window_view(padded, k, axis=2)  # (B, O, L, k)
    grad_x = np.tensordot(gcols, kernels[:, :, ::-1], axes=([1, 3], [0, 2]))  # (B, L, C)
    grad_x = np.ascontiguousarray(grad_x.transpose(0, 2, 1))
    return (grad_x if batched else grad_x[0]), grad_kernels, grad_bias


def _check_dense(x: np.ndarray, weights: np.ndarray) -> None:
    if weights.ndim != 2:
        raise ShapeError(f"weights must be (m, n), got shape {weights.shape}")
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(
            f"inner extent mismatch: input has n={x.shape[1]}, weights expect n={weights.shape[1]}"
        )


def dense_forward(x, weights, bias) -> np.ndarray:
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    xb, batched = _batched(x, 1, "input")
    _check_dense(xb, weights)
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias must have shape (m,)=({weights.shape[0]},), got {bias.shape}")
    out = xb @ weights.T + bias
    return out if batched else out[0]


def dense_backward(grad_out, x, weights):
    """Adjoints of :func:`dense_forward`; returns (grad_input, grad_weights, grad_bias)."""
    grad_out, x, weights = as_tensor(grad_out), as_tensor(x), as_tensor(weights)
    xb, batched = _batched(x, 1, "input")
    gb, g_batched = _batched(grad_out, 1, "grad_out")
    if batched != g_batched:
        raise ShapeError("grad_out and input disagree on the batch axis")
    _check_dense(xb, weights)
    if gb.shape != (xb.shape[0], weights.shape[0]):
        raise ShapeError(f"grad_out must have m={weights.shape[0]} columns, got {gb.shape[1:]}")
    grad_x = gb @ weights
    return (grad_x if batched else grad_x[0]), gb.T @ xb, gb.sum(axis=0)


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor(x), 0.0)


def relu_backward(grad_out, x) -> np.ndarray:
    # sub-gradient at exactly 0 is 0
    grad_out, x = as_tensor(grad_out), as_tensor(x)
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    return np.where(x > 0.0, grad_out, 0.0)


def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements and its gradient w.r.t. ``pred``."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    n = diff.size
    return float(np.mean(diff * diff)), (2.0 / n) * diff
