"""Selective state-space (S6) sequence transform.

Per timestep the transition is input-dependent: the token x_t produces a step
size delta_t (softplus of an affine projection), and low-dimensional mixing
vectors B_t, C_t. The diagonal continuous state matrix A is stored as the log
of its negated entries, so it is negative by construction and the discrete
transition exp(delta * A) stays in (0, 1). Discretization is zero-order hold
for the transition and an Euler step for the input path (delta * B), the
common practical simplification.

Three routes through the same math:

- ``s6_forward_sequential``: the plain O(L) loop, used as the correctness
  oracle.
- ``s6_forward_scan``: a Blelloch-style work-efficient associative scan over
  the recurrence pairs (a_t, b_t); mathematically identical, vectorized over
  the sequence axis.
- ``s6_backward``: hand-written adjoint of the recurrence (reverse sweep),
  giving exact gradients for the inputs and every parameter tensor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ShapeError, ValidationError
from .tensor import as_f64, softplus

Array = np.ndarray


@dataclass
class S6Params:
    """Input-dependent state-space parameters for one scan direction.

    ``log_A`` stores log(-A) elementwise for the [D,N] diagonal-per-channel
    state matrix, guaranteeing A < 0. ``W_delta``/``delta_bias`` produce the
    per-channel step size; ``W_B``/``b_B`` and ``W_C``/``b_C`` produce the
    state input and readout vectors from each token; ``D_skip`` is the direct
    feedthrough. The projection biases default to zero and exist so degenerate
    configurations (constant B or C) are expressible.
    """

    log_A: Array      # [D, N]
    W_delta: Array    # [D, D]
    delta_bias: Array  # [D]
    W_B: Array        # [D, N]
    b_B: Array        # [N]
    W_C: Array        # [D, N]
    b_C: Array        # [N]
    D_skip: Array     # [D]

    @property
    def d(self) -> int:
        return self.log_A.shape[0]

    @property
    def n(self) -> int:
        return self.log_A.shape[1]

    def validate(self) -> None:
        d, n = self.log_A.shape
        expected = {
            "log_A": (d, n), "W_delta": (d, d), "delta_bias": (d,),
            "W_B": (d, n), "b_B": (n,), "W_C": (d, n), "b_C": (n,),
            "D_skip": (d,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ShapeError(f"S6Params.{name} must be {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"S6Params.{name} contains non-finite values")


def init_s6(d: int, n: int, rng: np.random.Generator,
            delta_range: tuple[float, float] = (1e-3, 0.1)) -> S6Params:
    """Standard real-diagonal init: continuous A[d, i] = -(i+1), delta bias
    placed so softplus lands inside ``delta_range``, small uniform projections."""
    log_A = np.tile(np.log(np.arange(1, n + 1, dtype=np.float64)), (d, 1))
    lo, hi = (np.log(np.expm1(delta_range[0])), np.log(np.expm1(delta_range[1])))
    scale = 1.0 / np.sqrt(d)
    return S6Params(
        log_A=log_A,
        W_delta=rng.uniform(-0.1 * scale, 0.1 * scale, size=(d, d)),
        delta_bias=rng.uniform(lo, hi, size=d),
        W_B=rng.uniform(-scale, scale, size=(d, n)),
        b_B=np.zeros(n),
        W_C=rng.uniform(-scale, scale, size=(d, n)),
        b_C=np.zeros(n),
        D_skip=np.ones(d),
    )


def zero_readout(params: S6Params) -> S6Params:
    """Copy of ``params`` whose output is identically zero (C_t == 0 and no
    feedthrough); used by the bidirectional-scanning ablation equivalence."""
    return S6Params(
        log_A=params.log_A.copy(), W_delta=params.W_delta.copy(),
        delta_bias=params.delta_bias.copy(), W_B=params.W_B.copy(),
        b_B=params.b_B.copy(), W_C=np.zeros_like(params.W_C),
        b_C=np.zeros_like(params.b_C), D_skip=np.zeros_like(params.D_skip),
    )


def _check_input(x: Array, params: S6Params) -> Array:
    x = as_f64(x)
    if x.ndim != 2:
        raise ShapeError(f"s6 input must be [L,D], got shape {x.shape}")
    if x.shape[0] < 1:
        raise ShapeError("s6 input must have at least one timestep")
    if x.shape[1] != params.d:
        raise ShapeError(
            f"s6 token dim mismatch: input {x.shape} vs params D={params.d}")
    params.validate()
    if not np.all(np.isfinite(x)):
        raise ValidationError("s6 input contains non-finite values")
    return x


def _discretize(x: Array, params: S6Params):
    """Per-timestep transition/input terms for the diagonal recurrence
    h_t = dA_t * h_{t-1} + dBx_t (all [L,D,N])."""
    u = x @ params.W_delta + params.delta_bias          # [L,D] pre-softplus
    delta = softplus(u)
    b_seq = x @ params.W_B + params.b_B                 # [L,N]
    c_seq = x @ params.W_C + params.b_C                 # [L,N]
    a_cont = -np.exp(params.log_A)                      # [D,N]
    da = np.exp(delta[:, :, None] * a_cont[None, :, :])
    dbx = delta[:, :, None] * b_seq[:, None, :] * x[:, :, None]
    return u, delta, b_seq, c_seq, a_cont, da, dbx


def s6_forward_sequential(x: Array, params: S6Params,
                          return_hidden: bool = False):
    """Reference recurrence, one timestep at a time."""
    x = _check_input(x, params)
    _, _, _, c_seq, _, da, dbx = _discretize(x, params)
    length, d = x.shape
    h = np.zeros((d, params.n))
    y = np.empty((length, d))
    hs = np.empty((length, d, params.n)) if return_hidden else None
    for t in range(length):
        h = da[t] * h + dbx[t]
        y[t] = h @ c_seq[t] + params.D_skip * x[t]
        if return_hidden:
            hs[t] = h
    if return_hidden:
        return y, hs
    return y


def s6_forward_scan(x: Array, params: S6Params) -> Array:
    """Same transform via a work-efficient associative scan (O(L) work,
    O(log L) vectorized passes)."""
    x = _check_input(x, params)
    _, _, _, c_seq, _, da, dbx = _discretize(x, params)
    h = associative_scan(da, dbx)
    return np.einsum("ldn,ln->ld", h, c_seq) + params.D_skip * x


def associative_scan(a: Array, b: Array) -> Array:
    """Inclusive scan of the linear recurrence h_t = a_t * h_{t-1} + b_t with
    h_{-1} = 0, using the Blelloch upsweep/downsweep over the associative
    composition (a1,b1) . (a2,b2) = (a2*a1, a2*b1 + b2).

    ``a`` and ``b`` share a shape whose first axis is the sequence; the
    remaining axes ride along elementwise.
    """
    if a.shape != b.shape:
        raise ShapeError(f"scan operand mismatch: {a.shape} vs {b.shape}")
    length = a.shape[0]
    size = 1
    while size < length:
        size *= 2
    pad = [(0, size - length)] + [(0, 0)] * (a.ndim - 1)
    acc_a = np.pad(a, pad, constant_values=1.0)
    acc_b = np.pad(b, pad, constant_values=0.0)

    # upsweep: each node at index i*2s + 2s-1 absorbs its left sibling
    step = 1
    while step < size:
        left_a = acc_a[step - 1::2 * step]
        left_b = acc_b[step - 1::2 * step]
        right_a = acc_a[2 * step - 1::2 * step]
        right_b = acc_b[2 * step - 1::2 * step]
        right_b += right_a * left_b
        right_a *= left_a
        step *= 2

    # downsweep: root holds the identity, children split prefix/aggregate
    acc_a[size - 1] = 1.0
    acc_b[size - 1] = 0.0
    step = size // 2
    while step >= 1:
        left_a = acc_a[step - 1::2 * step].copy()
        left_b = acc_b[step - 1::2 * step].copy()
        parent_a = acc_a[2 * step - 1::2 * step]
        parent_b = acc_b[2 * step - 1::2 * step]
        acc_a[step - 1::2 * step] = parent_a
        acc_b[step - 1::2 * step] = parent_b
        # right child = parent-prefix composed with left-subtree aggregate
        parent_b *= left_a
        parent_b += left_b
        parent_a *= left_a
        step //= 2

    # acc now holds exclusive prefixes; fold in each element for inclusive
    return (a * acc_b[:length] + b)


def s6_backward(x: Array, params: S6Params, grad_out: Array):
    """Adjoint reverse sweep. Returns (grad_x, grads) where grads maps each
    S6Params field name to the gradient of sum(grad_out * y)."""
    x = _check_input(x, params)
    grad_out = as_f64(grad_out)
    if grad_out.shape != x.shape:
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match input {x.shape}")
    u, delta, b_seq, c_seq, a_cont, da, dbx = _discretize(x, params)
    h = associative_scan(da, dbx)                       # [L,D,N]
    length, d = x.shape

    grad_x = params.D_skip * grad_out                   # feedthrough term
    g_dskip = (grad_out * x).sum(axis=0)
    g_a = np.zeros_like(a_cont)
    g_delta = np.empty_like(delta)
    g_b_seq = np.empty_like(b_seq)
    g_c_seq = np.empty_like(c_seq)

    lam = np.zeros((d, params.n))                       # dLoss/dh_t carrier
    for t in range(length - 1, -1, -1):
        gt = grad_out[t]
        g_c_seq[t] = h[t].T @ gt
        lam += gt[:, None] * c_seq[t][None, :]
        h_prev = h[t - 1] if t > 0 else 0.0
        pre = lam * h_prev * da[t]                      # grad wrt delta*A
        g_a += pre * delta[t][:, None]
        gd = (pre * a_cont).sum(axis=1)
        gd += (lam * b_seq[t][None, :]).sum(axis=1) * x[t]
        g_delta[t] = gd
        g_b_seq[t] = lam.T @ (delta[t] * x[t])
        grad_x[t] += (lam @ b_seq[t]) * delta[t]
        lam *= da[t]

    g_u = g_delta * expit(u)                            # softplus adjoint
    grads = {
        "log_A": g_a * a_cont,                          # dA/dlog_A = A
        "W_delta": x.T @ g_u,
        "delta_bias": g_u.sum(axis=0),
        "W_B": x.T @ g_b_seq,
        "b_B": g_b_seq.sum(axis=0),
        "W_C": x.T @ g_c_seq,
        "b_C": g_c_seq.sum(axis=0),
        "D_skip": g_dskip,
    }
    grad_x += g_u @ params.W_delta.T
    grad_x += g_b_seq @ params.W_B.T
    grad_x += g_c_seq @ params.W_C.T
    return grad_x, grads
