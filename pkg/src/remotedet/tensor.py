"""Dense float64 tensor primitives.

Convolutions, per-position linear maps, layer normalization, activations, and
a central-difference gradient oracle. Everything operates on contiguous
float64 numpy arrays; shapes are checked strictly and there is no implicit
broadcasting beyond what each op defines. All functions are pure.

Each differentiable op comes in two flavors: the plain forward (public
surface) and a ``*_fwd``/``*_bwd`` pair used by the training code, where the
forward returns a cache and the backward consumes it.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from .errors import EvaluationError, ShapeError

Array = np.ndarray

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def as_f64(x) -> Array:
    """Coerce to a contiguous float64 array."""
    return np.ascontiguousarray(x, dtype=np.float64)


def _check_ndim(name: str, x: Array, ndim: int) -> None:
    if x.ndim != ndim:
        raise ShapeError(f"{name} must have {ndim} dims, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(input: Array, weight: Array, bias: Array, stride: int = 1,
           padding: int = 0) -> Array:
    """Cross-correlation of a [C_in,H,W] map with a [C_out,C_in,kH,kW] kernel.

    Output spatial size is floor((H + 2*padding - kH)/stride) + 1 (same for W).
    Kernel sides must be odd; no kernel flip is performed.
    """
    out, _ = conv2d_fwd(input, weight, bias, stride, padding)
    return out


def conv2d_fwd(input: Array, weight: Array, bias: Array, stride: int,
               padding: int):
    input = as_f64(input)
    weight = as_f64(weight)
    bias = as_f64(bias)
    _check_ndim("conv2d input", input, 3)
    _check_ndim("conv2d weight", weight, 4)
    c_out, c_in_w, kh, kw = weight.shape
    c_in, h, w = input.shape
    if c_in != c_in_w:
        raise ShapeError(
            f"conv2d channel mismatch: input {input.shape} vs weight {weight.shape}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias must be ({c_out},), got {bias.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel sides must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(
            f"conv2d output would be empty: input {input.shape}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}")

    padded = np.pad(input, ((0, 0), (padding, padding), (padding, padding)))
    # windows: [C_in, H', W', kH, kW] after strided slicing
    win = sliding_window_view(padded, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(
        h_out * w_out, c_in * kh * kw)
    out = cols @ weight.reshape(c_out, -1).T + bias
    out = np.ascontiguousarray(out.reshape(h_out, w_out, c_out).transpose(2, 0, 1))
    cache = (cols, weight, input.shape, stride, padding, (h_out, w_out))
    return out, cache


def conv2d_bwd(cache, grad_out: Array):
    """Gradients of conv2d; returns (grad_input, grad_weight, grad_bias)."""
    cols, weight, in_shape, stride, padding, (h_out, w_out) = cache
    c_out = weight.shape[0]
    g = grad_out.transpose(1, 2, 0).reshape(h_out * w_out, c_out)
    grad_weight = (g.T @ cols).reshape(weight.shape)
    grad_bias = g.sum(axis=0)
    grad_cols = g @ weight.reshape(c_out, -1)
    grad_input = _col2im(grad_cols, in_shape, weight.shape, stride, padding,
                         (h_out, w_out))
    return grad_input, grad_weight, grad_bias


def _col2im(grad_cols: Array, in_shape, w_shape, stride: int, padding: int,
            out_hw) -> Array:
    c_in, h, w = in_shape
    _, _, kh, kw = w_shape
    h_out, w_out = out_hw
    g = grad_cols.reshape(h_out, w_out, c_in, kh, kw).transpose(2, 0, 1, 3, 4)
    gpad = np.zeros((c_in, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            gpad[:, i:i + h_out * stride:stride, j:j + w_out * stride:stride] += g[:, :, :, i, j]
    if padding:
        gpad = gpad[:, padding:-padding, padding:-padding]
    return np.ascontiguousarray(gpad)


def depthwise_conv2d(input: Array, weight: Array, bias: Array,
                     padding: int) -> Array:
    """Per-channel cross-correlation: channel c of the output depends only on
    channel c of the input. Padding must preserve the spatial size."""
    out, _ = depthwise_conv2d_fwd(input, weight, bias, padding)
    return out


def depthwise_conv2d_fwd(input: Array, weight: Array, bias: Array, padding: int):
    input = as_f64(input)
    weight = as_f64(weight)
    bias = as_f64(bias)
    _check_ndim("depthwise input", input, 3)
    _check_ndim("depthwise weight", weight, 3)
    c, h, w = input.shape
    cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(
            f"depthwise channel mismatch: input {input.shape} vs weight {weight.shape}")
    if bias.shape != (c,):
        raise ShapeError(f"depthwise bias must be ({c},), got {bias.shape}")
    if kh != kw or kh % 2 == 0 or padding != (kh - 1) // 2:
        raise ShapeError(
            f"depthwise kernel must be odd square with padding (k-1)/2, got "
            f"kernel {kh}x{kw} padding {padding}")
    padded = np.pad(input, ((0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(padded, (kh, kw), axis=(1, 2))  # [C,H,W,kH,kW]
    out = np.einsum("chwij,cij->chw", win, weight) + bias[:, None, None]
    cache = (win, weight, input.shape, padding)
    return np.ascontiguousarray(out), cache


def depthwise_conv2d_bwd(cache, grad_out: Array):
    win, weight, in_shape, padding = cache
    c, h, w = in_shape
    kh = weight.shape[1]
    grad_weight = np.einsum("chwij,chw->cij", win, grad_out)
    grad_bias = grad_out.sum(axis=(1, 2))
    gpad = np.zeros((c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kh):
            gpad[:, i:i + h, j:j + w] += grad_out * weight[:, i, j][:, None, None]
    if padding:
        gpad = gpad[:, padding:-padding, padding:-padding]
    return np.ascontiguousarray(gpad), grad_weight, grad_bias


# ---------------------------------------------------------------------------
# linear / layer norm
# ---------------------------------------------------------------------------

def linear(input: Array, weight: Array, bias: Array) -> Array:
    """Affine map along the last axis: out[..., j] = sum_i x[..., i] W[i, j] + b[j]."""
    out, _ = linear_fwd(input, weight, bias)
    return out


def linear_fwd(input: Array, weight: Array, bias: Array):
    input = as_f64(input)
    weight = as_f64(weight)
    bias = as_f64(bias)
    _check_ndim("linear weight", weight, 2)
    d_in, d_out = weight.shape
    if input.shape[-1] != d_in:
        raise ShapeError(
            f"linear dim mismatch: input {input.shape} vs weight {weight.shape}")
    if bias.shape != (d_out,):
        raise ShapeError(f"linear bias must be ({d_out},), got {bias.shape}")
    out = input @ weight + bias
    return out, (input, weight)


def linear_bwd(cache, grad_out: Array):
    input, weight = cache
    x2 = input.reshape(-1, weight.shape[0])
    g2 = grad_out.reshape(-1, weight.shape[1])
    grad_input = (g2 @ weight.T).reshape(input.shape)
    grad_weight = x2.T @ g2
    grad_bias = g2.sum(axis=0)
    return grad_input, grad_weight, grad_bias


def layer_norm(input: Array, gamma: Array, beta: Array, eps: float = 1e-5) -> Array:
    """Normalize each trailing-axis vector to zero mean / unit population
    variance, then apply the gamma/beta affine."""
    out, _ = layer_norm_fwd(input, gamma, beta, eps)
    return out


def layer_norm_fwd(input: Array, gamma: Array, beta: Array, eps: float = 1e-5):
    input = as_f64(input)
    gamma = as_f64(gamma)
    beta = as_f64(beta)
    d = input.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine must be ({d},), got gamma {gamma.shape} beta {beta.shape}")
    if eps <= 0:
        raise ShapeError("layer_norm eps must be > 0")
    mu = input.mean(axis=-1, keepdims=True)
    var = input.var(axis=-1, keepdims=True)  # population variance
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (input - mu) * inv_std
    out = xhat * gamma + beta
    return out, (xhat, inv_std, gamma)


def layer_norm_bwd(cache, grad_out: Array):
    xhat, inv_std, gamma = cache
    d = xhat.shape[-1]
    gxhat = grad_out * gamma
    grad_gamma = (grad_out * xhat).reshape(-1, d).sum(axis=0)
    grad_beta = grad_out.reshape(-1, d).sum(axis=0)
    m1 = gxhat.mean(axis=-1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
    grad_input = inv_std * (gxhat - m1 - xhat * m2)
    return grad_input, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def sigmoid(x: Array) -> Array:
    return expit(as_f64(x))


def silu(x: Array) -> Array:
    x = as_f64(x)
    return x * expit(x)


def gelu(x: Array) -> Array:
    """Exact erf formulation: x * Phi(x)."""
    x = as_f64(x)
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def sigmoid_grad(x: Array) -> Array:
    s = expit(as_f64(x))
    return s * (1.0 - s)


def silu_grad(x: Array) -> Array:
    x = as_f64(x)
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def gelu_grad(x: Array) -> Array:
    x = as_f64(x)
    phi = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * phi


def softplus(x: Array) -> Array:
    return np.logaddexp(0.0, as_f64(x))


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------

def finite_diff_grad(f: Callable[[Array], float], x: Array,
                     h: float = 1e-5) -> Array:
    """Central-difference gradient of a scalar-valued function, one element at
    a time: (f(x + h e_i) - f(x - h e_i)) / (2h)."""
    x = as_f64(x)
    if h <= 0:
        raise ValueError("finite_diff_grad needs h > 0")
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        fp = float(f(xp))
        xm = x.copy()
        xm[idx] -= h
        fm = float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(
                f"non-finite function value while differencing element {idx}")
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad
