"""Dense-tensor primitives with hand-derived backward passes.

Tensors are plain numpy arrays.  Every differentiable operation returns a
:class:`GradPair`: the forward value together with a ``backward`` closure
that maps the upstream gradient to gradients for each tensor input, in
argument order.  Operations are pure, never mutate their inputs, and keep
the dtype of the inputs (float64 for verification, float32 in training
loops).  ``gradcheck`` compares an analytic gradient against central
finite differences and should always be run in double precision.
"""

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .errors import DimensionError, EvaluationError

__all__ = [
    "GradPair",
    "conv2d",
    "conv2d_batch",
    "relu",
    "global_avg_pool",
    "fully_connected",
    "linear",
    "gradcheck",
]


@dataclass(frozen=True)
class GradPair:
    """Forward value plus the backward closure of the op that produced it.

    ``backward`` takes the gradient of the final scalar w.r.t. ``value`` and
    returns the gradient for each tensor input of the op, in argument order
    (a single array for one-input ops, a tuple otherwise).  Output shapes
    equal the corresponding input shapes.
    """

    value: np.ndarray
    backward: Callable[..., Any]


def _conv_out_extent(size, k, stride, pad, axis):
    span = size + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise DimensionError(
            f"conv2d: {axis} axis of size {size} with kernel {k}, stride {stride}, "
            f"pad {pad} does not produce a whole output extent"
        )
    return span // stride + 1


def conv2d_batch(x, kernel, bias, stride=1, pad=0):
    """Cross-correlation over a batch of images, (B, H, W, C_in) layout.

    Returns a GradPair whose backward maps (B, H', W', C_out) upstream
    gradients to (d_input, d_kernel, d_bias).
    """
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    bias = np.asarray(bias)
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must have rank 4 (batch, h, w, c), got rank {x.ndim}")
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d: kernel must have rank 4 (k, k, c_in, c_out), got rank {kernel.ndim}")
    k, k2, c_in_k, c_out = kernel.shape
    if k != k2:
        raise DimensionError(f"conv2d: kernel spatial axes must be square, got {k}x{k2}")
    if k < 1 or stride < 1 or pad < 0:
        raise ValueError(f"conv2d: need k >= 1, stride >= 1, pad >= 0, got k={k}, stride={stride}, pad={pad}")
    b, h, w, c_in = x.shape
    if c_in != c_in_k:
        raise DimensionError(f"conv2d: input channel axis is {c_in} but kernel expects {c_in_k}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias axis must have length {c_out}, got shape {bias.shape}")
    h_out = _conv_out_extent(h, k, stride, pad, "height")
    w_out = _conv_out_extent(w, k, stride, pad, "width")

    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    cols = np.empty((b, h_out, w_out, k, k, c_in), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            cols[:, :, :, di, dj, :] = xp[:, di:di + stride * h_out:stride, dj:dj + stride * w_out:stride, :]
    kmat = kernel.reshape(k * k * c_in, c_out)
    out = cols.reshape(b * h_out * w_out, k * k * c_in) @ kmat
    out = out.reshape(b, h_out, w_out, c_out) + bias

    def backward(dout):
        dout = np.asarray(dout)
        dmat = dout.reshape(b * h_out * w_out, c_out)
        dbias = dout.sum(axis=(0, 1, 2))
        dkernel = (cols.reshape(b * h_out * w_out, k * k * c_in).T @ dmat).reshape(kernel.shape)
        dcols = (dmat @ kmat.T).reshape(b, h_out, w_out, k, k, c_in)
        dxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                dxp[:, di:di + stride * h_out:stride, dj:dj + stride * w_out:stride, :] += dcols[:, :, :, di, dj, :]
        dx = dxp[:, pad:pad + h, pad:pad + w, :] if pad else dxp
        return dx, dkernel, dbias

    return GradPair(out, backward)


def conv2d(x, kernel, bias, stride=1, pad=0):
    """2-D cross-correlation over a single H x W x C_in image.

    ``kernel`` is k x k x C_in x C_out and the output extent
    (H + 2*pad - k)/stride + 1 must be a whole number on both spatial axes.
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise DimensionError(f"conv2d: input must have rank 3 (h, w, c), got rank {x.ndim}")
    inner = conv2d_batch(x[None], kernel, bias, stride=stride, pad=pad)

    def backward(dout):
        dx, dkernel, dbias = inner.backward(np.asarray(dout)[None])
        return dx[0], dkernel, dbias

    return GradPair(inner.value[0], backward)


def relu(x):
    """Elementwise max(0, x); backward passes gradient only where x > 0."""
    x = np.asarray(x)
    out = np.maximum(x, 0)

    def backward(dout):
        return np.asarray(dout) * (x > 0)

    return GradPair(out, backward)


def global_avg_pool(x):
    """Mean over the two spatial axes of an H x W x C map, yielding length C."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise DimensionError(f"global_avg_pool: input must have rank 3 (h, w, c), got rank {x.ndim}")
    h, w, _ = x.shape
    out = x.mean(axis=(0, 1))

    def backward(dout):
        return np.broadcast_to(np.asarray(dout) / (h * w), x.shape).copy()

    return GradPair(out, backward)


def fully_connected(x, weight, bias):
    """Affine map of a length-C_in vector: out = x @ weight + bias."""
    x = np.asarray(x)
    weight = np.asarray(weight)
    bias = np.asarray(bias)
    if x.ndim != 1:
        raise DimensionError(f"fully_connected: input must have rank 1, got rank {x.ndim}")
    if weight.ndim != 2 or weight.shape[0] != x.shape[0]:
        raise DimensionError(
            f"fully_connected: weight input axis must match input length {x.shape[0]}, "
            f"got weight shape {weight.shape}"
        )
    if bias.shape != (weight.shape[1],):
        raise DimensionError(
            f"fully_connected: bias axis must have length {weight.shape[1]}, got shape {bias.shape}"
        )
    out = x @ weight + bias

    def backward(dout):
        dout = np.asarray(dout)
        return weight @ dout, np.outer(x, dout), dout.copy()

    return GradPair(out, backward)


def linear(x, weight, bias):
    """Batched affine map of (B, C_in) rows: out = x @ weight + bias."""
    x = np.asarray(x)
    weight = np.asarray(weight)
    bias = np.asarray(bias)
    if x.ndim != 2:
        raise DimensionError(f"linear: input must have rank 2 (batch, c_in), got rank {x.ndim}")
    if weight.ndim != 2 or weight.shape[0] != x.shape[1]:
        raise DimensionError(
            f"linear: weight input axis must match input width {x.shape[1]}, got weight shape {weight.shape}"
        )
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias axis must have length {weight.shape[1]}, got shape {bias.shape}")
    out = x @ weight + bias

    def backward(dout):
        dout = np.asarray(dout)
        return dout @ weight.T, x.T @ dout, dout.sum(axis=0)

    return GradPair(out, backward)


def gradcheck(f, x, h=1e-6):
    """Max relative error between the analytic gradient of f and central differences.

    ``f`` maps a tensor to a GradPair holding a scalar value; its backward,
    applied to 1.0, must yield the gradient w.r.t. the input.  Per
    coordinate the numeric gradient is (f(x + h e_i) - f(x - h e_i)) / 2h
    and the error is |analytic - numeric| / max(1, |analytic|, |numeric|).
    Runs in double precision regardless of the dtype of ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    pair = f(x)
    value = float(np.asarray(pair.value))
    if not np.isfinite(value):
        raise EvaluationError(f"gradcheck: function value {value} is not finite")
    analytic = np.asarray(pair.backward(1.0), dtype=np.float64)
    if analytic.shape != x.shape:
        raise DimensionError(
            f"gradcheck: analytic gradient shape {analytic.shape} does not match input shape {x.shape}"
        )

    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += h
        fp = float(np.asarray(f(xp.reshape(x.shape)).value))
        xm = flat.copy()
        xm[i] -= h
        fm = float(np.asarray(f(xm.reshape(x.shape)).value))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"gradcheck: non-finite evaluation at coordinate {i}")
        numeric = (fp - fm) / (2.0 * h)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst
