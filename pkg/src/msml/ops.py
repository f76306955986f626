"""Differentiable layer primitives on float64 numpy arrays.

Every op comes as an explicit forward/backward pair (no taped autodiff).
Forward returns ``(out, cache)``; backward consumes the upstream gradient and
the cache and returns gradients for the forward inputs. All analytic
gradients are finite-difference checked in the test suite and by
``msml.gradcheck``.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, ParameterError

FLOAT = np.float64


def _as_f64(x):
    return np.asarray(x, dtype=FLOAT)


# ---------------------------------------------------------------------------
# affine
# ---------------------------------------------------------------------------

def affine_forward(x, w, b):
    """out[n, j] = sum_i x[n, i] * w[i, j] + b[j]."""
    x, w, b = _as_f64(x), _as_f64(w), _as_f64(b)
    if x.ndim != 2 or w.ndim != 2:
        raise DimensionError(f"affine expects 2-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise DimensionError.mismatch("affine inner dimension", x.shape, (x.shape[0], w.shape[0]))
    if b.shape != (w.shape[1],):
        raise DimensionError.mismatch("affine bias", b.shape, (w.shape[1],))
    return x @ w + b, (x, w)


def affine_backward(dout, cache):
    x, w = cache
    dout = _as_f64(dout)
    dx = dout @ w.T
    dw = x.T @ dout
    db = dout.sum(axis=0)
    return dx, dw, db


# ---------------------------------------------------------------------------
# conv2d (cross-correlation, zero padding)
# ---------------------------------------------------------------------------

def conv2d_forward(x, kernel, stride=1, pad=0):
    """Cross-correlate NCHW input with an (C_out, C_in, k, k) kernel.

    Output spatial size is floor((H + 2*pad - k) / stride) + 1. Implemented by
    gathering sliding windows into a column matrix and using one matmul.
    """
    x, kernel = _as_f64(x), _as_f64(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c_in, h, w = x.shape
    c_out, kc_in, kh, kw = kernel.shape
    if kc_in != c_in:
        raise DimensionError.mismatch("conv2d kernel channels", kernel.shape, (c_out, c_in, kh, kw))
    if stride < 1:
        raise ParameterError(f"conv2d stride must be >= 1, got {stride}")
    if pad < 0:
        raise ParameterError(f"conv2d pad must be >= 0, got {pad}")
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise DimensionError(
            f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )
    if pad:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (n, c_in, h_out, w_out, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c_in * kh * kw)
    out = cols @ kernel.reshape(c_out, -1).T
    out = out.reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2)
    cache = (cols, kernel, x.shape, stride, pad, (h_out, w_out))
    return np.ascontiguousarray(out), cache


def conv2d_backward(dout, cache):
    cols, kernel, x_shape, stride, pad, (h_out, w_out) = cache
    n, c_in, h, w = x_shape
    c_out, _, kh, kw = kernel.shape
    dout = _as_f64(dout)
    dmat = dout.transpose(0, 2, 3, 1).reshape(n * h_out * w_out, c_out)
    dk = (dmat.T @ cols).reshape(kernel.shape)
    dcols = dmat @ kernel.reshape(c_out, -1)
    dcols = dcols.reshape(n, h_out, w_out, c_in, kh, kw)
    dxp = np.zeros((n, c_in, h + 2 * pad, w + 2 * pad), dtype=FLOAT)
    for a in range(kh):
        for b in range(kw):
            dxp[:, :, a : a + h_out * stride : stride, b : b + w_out * stride : stride] += (
                dcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
            )
    dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
    return dx, dk


# ---------------------------------------------------------------------------
# maxpool2d
# ---------------------------------------------------------------------------

def maxpool2d_forward(x, window, stride):
    """Per-window maximum. Ties route to the first index in row-major order."""
    x = _as_f64(x)
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise DimensionError(f"maxpool2d window {window} exceeds spatial extent {h}x{w}")
    if stride < 1:
        raise ParameterError(f"maxpool2d stride must be >= 1, got {stride}")
    win = np.lib.stride_tricks.sliding_window_view(x, (window, window), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    h_out, w_out = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, h_out, w_out, window * window)
    arg = flat.argmax(axis=-1)  # argmax picks the first maximum: the tie rule
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    cache = (arg, x.shape, window, stride, (h_out, w_out))
    return out, cache


def maxpool2d_backward(dout, cache):
    arg, x_shape, window, stride, (h_out, w_out) = cache
    n, c, h, w = x_shape
    dout = _as_f64(dout)
    dx = np.zeros(x_shape, dtype=FLOAT)
    # Window-local argmax -> absolute coordinates; scatter-add handles
    # overlapping windows when stride < window.
    oi, oj = np.meshgrid(np.arange(h_out), np.arange(w_out), indexing="ij")
    rows = oi[None, None] * stride + arg // window
    cols = oj[None, None] * stride + arg % window
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(dx, (np.broadcast_to(ni, arg.shape), np.broadcast_to(ci, arg.shape), rows, cols), dout)
    return dx


# ---------------------------------------------------------------------------
# relu
# ---------------------------------------------------------------------------

def relu_forward(x):
    x = _as_f64(x)
    out = np.maximum(x, 0.0)
    return out, x > 0  # subgradient at 0 is 0


def relu_backward(dout, mask):
    return _as_f64(dout) * mask


# ---------------------------------------------------------------------------
# dropout (inverted: eval mode is the identity)
# ---------------------------------------------------------------------------

def dropout_forward(x, rate, training, rng_seed):
    x = _as_f64(x)
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x.copy(), None
    keep = np.random.default_rng(rng_seed).random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    return x * keep * scale, (keep, scale)


def dropout_backward(dout, cache):
    dout = _as_f64(dout)
    if cache is None:
        return dout.copy()
    keep, scale = cache
    return dout * keep * scale


# ---------------------------------------------------------------------------
# sigmoid
# ---------------------------------------------------------------------------

def sigmoid(x):
    """Numerically stable logistic function; never overflows for large |x|."""
    x = _as_f64(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_backward(dout, z):
    return _as_f64(dout) * z * (1.0 - z)
