"""Cross-modal fusion block.

Two same-shape feature maps (one per modality) are normalized and expanded
per modality, mixed spatially by a depthwise conv + SiLU, fused token-wise by
addition along each of the four scan directions, passed through a per-direction
selective-scan kernel, recombined, projected back to the input width, and
returned to both modalities through residual + FFN tails. Both outputs share
the same fused intermediate; only the residual/FFN tails are per-modality.

The block is exactly identity-on-inputs when every weight is zero, and
reduces to plain addition fusion at init time because the output projection
and the FFN's second layer start at zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import scan2d
from .errors import ShapeError
from .params import flatten_params
from .s6 import S6Params, init_s6, s6_backward, s6_forward_scan
from .scan2d import ALL_DIRECTIONS, ScanDirection
from .tensor import (depthwise_conv2d_bwd, depthwise_conv2d_fwd, gelu,
                     gelu_grad, layer_norm_bwd, layer_norm_fwd, linear_bwd,
                     linear_fwd, silu, silu_grad)

Array = np.ndarray

MODALITIES = (0, 1)  # 0 = visible-light branch, 1 = thermal branch


@dataclass
class CfmConfig:
    channels: int
    expand: int = 2
    dw_kernel: int = 3
    ffn_hidden: int | None = None  # defaults to 4x channels
    state_size: int = 8

    def __post_init__(self):
        if min(self.channels, self.expand, self.dw_kernel, self.state_size) < 1:
            raise ShapeError("CfmConfig fields must be positive")
        if self.dw_kernel % 2 == 0:
            raise ShapeError("depthwise kernel must be odd")
        if self.ffn_hidden is None:
            self.ffn_hidden = 4 * self.channels
        elif self.ffn_hidden < 1:
            raise ShapeError("ffn_hidden must be positive")

    @property
    def inner(self) -> int:
        return self.channels * self.expand


@dataclass
class LayerNormWeights:
    gamma: Array
    beta: Array


@dataclass
class LinearWeights:
    weight: Array
    bias: Array


@dataclass
class DepthwiseWeights:
    weight: Array
    bias: Array


@dataclass
class FfnWeights:
    w1: Array
    b1: Array
    w2: Array
    b2: Array


@dataclass
class CfmWeights:
    config: CfmConfig
    ln_in: list[LayerNormWeights]    # per modality
    proj_in: list[LinearWeights]     # per modality, channels -> inner
    dw: list[DepthwiseWeights]       # per modality
    s6: list[S6Params]               # per scan direction
    proj_out: LinearWeights          # inner -> channels
    ln_out: list[LayerNormWeights]   # per modality
    ffn: list[FfnWeights]            # per modality


def init_cfm(config: CfmConfig, rng: np.random.Generator) -> CfmWeights:
    """Fresh weights. The output projection and second FFN layer start at
    zero, so a freshly initialized block is an exact pass-through and fused
    pyramids start out identical to plain addition fusion."""
    c, e, k = config.channels, config.inner, config.dw_kernel
    sc_c = 1.0 / np.sqrt(c)
    sc_k = 1.0 / k
    hidden = config.ffn_hidden

    def ln():
        return LayerNormWeights(gamma=np.ones(c), beta=np.zeros(c))

    return CfmWeights(
        config=config,
        ln_in=[ln() for _ in MODALITIES],
        proj_in=[LinearWeights(rng.uniform(-sc_c, sc_c, size=(c, e)), np.zeros(e))
                 for _ in MODALITIES],
        dw=[DepthwiseWeights(rng.uniform(-sc_k, sc_k, size=(e, k, k)), np.zeros(e))
            for _ in MODALITIES],
        s6=[init_s6(e, config.state_size, rng) for _ in ALL_DIRECTIONS],
        proj_out=LinearWeights(np.zeros((e, c)), np.zeros(c)),
        ln_out=[ln() for _ in MODALITIES],
        ffn=[FfnWeights(rng.uniform(-sc_c, sc_c, size=(c, hidden)), np.zeros(hidden),
                        np.zeros((hidden, c)), np.zeros(c))
             for _ in MODALITIES],
    )


def zeros_cfm(config: CfmConfig) -> CfmWeights:
    """All-zero weights (including norm scales): the block becomes the exact
    identity on both inputs."""
    w = init_cfm(config, np.random.default_rng(0))
    for _, arr in flatten_params(w).items():
        arr[...] = 0.0
    return w


def _to_tokens(fm: Array) -> Array:
    return scan2d.flatten(fm, ScanDirection.ROW_MAJOR)


def _from_tokens(tokens: Array, h: int, w: int) -> Array:
    return scan2d.unflatten(tokens, ScanDirection.ROW_MAJOR, h, w)


def _resolve_directions(directions) -> tuple[ScanDirection, ...]:
    if directions is None:
        return ALL_DIRECTIONS
    dirs = tuple(directions)
    if not dirs or any(d not in ALL_DIRECTIONS for d in dirs):
        raise ShapeError(f"invalid scan direction subset: {dirs}")
    return dirs


def cfm_forward(f1: Array, f2: Array, weights: CfmWeights,
                directions=None) -> tuple[Array, Array]:
    """Fuse two [C,H,W] maps; returns the enhanced per-modality pair.

    ``directions`` restricts the scan set (the bidirectional ablation passes
    ``scan2d.BIDIRECTIONAL``); parameters of skipped directions are unused.
    """
    (o1, o2), _ = cfm_forward_cached(f1, f2, weights, directions)
    return o1, o2


def cfm_forward_cached(f1: Array, f2: Array, weights: CfmWeights,
                       directions=None):
    cfg = weights.config
    if f1.shape != f2.shape:
        raise ShapeError(f"modality shape mismatch: {f1.shape} vs {f2.shape}")
    if f1.ndim != 3 or f1.shape[0] != cfg.channels:
        raise ShapeError(
            f"expected [{cfg.channels},H,W] inputs, got {f1.shape}")
    dirs = _resolve_directions(directions)
    _, h, w = f1.shape
    inputs = (f1, f2)

    cache = {"dirs": dirs, "hw": (h, w), "inputs": inputs,
             "pre": [], "scan": [], "tail": []}

    # per-modality projection: LN -> linear expand -> depthwise -> SiLU
    mixed = []
    for m in MODALITIES:
        tokens = _to_tokens(inputs[m])
        normed, ln_cache = layer_norm_fwd(tokens, weights.ln_in[m].gamma,
                                          weights.ln_in[m].beta)
        proj, lin_cache = linear_fwd(normed, weights.proj_in[m].weight,
                                     weights.proj_in[m].bias)
        fmap = _from_tokens(proj, h, w)
        dw_out, dw_cache = depthwise_conv2d_fwd(
            fmap, weights.dw[m].weight, weights.dw[m].bias,
            (cfg.dw_kernel - 1) // 2)
        mixed.append(silu(dw_out))
        cache["pre"].append((ln_cache, lin_cache, dw_cache, dw_out))

    # per-direction fusion + selective scan, recombined by summation
    acc = np.zeros((cfg.inner, h, w))
    for d in dirs:
        s1 = scan2d.flatten(mixed[0], d)
        s2 = scan2d.flatten(mixed[1], d)
        fused = scan2d.fuse_sequences(s1, s2)
        y = s6_forward_scan(fused, weights.s6[d.value])
        acc += scan2d.unflatten(y, d, h, w)
        cache["scan"].append((d, fused))

    y_tokens, out_cache = linear_fwd(_to_tokens(acc), weights.proj_out.weight,
                                     weights.proj_out.bias)
    fused_map = _from_tokens(y_tokens, h, w)
    cache["proj_out"] = out_cache
    cache["fused_map"] = fused_map  # the one shared cross-modal intermediate

    # per-modality residual + FFN tail on the shared fused map
    outs = []
    for m in MODALITIES:
        resid = inputs[m] + fused_map
        tokens = _to_tokens(resid)
        normed, ln_cache = layer_norm_fwd(tokens, weights.ln_out[m].gamma,
                                          weights.ln_out[m].beta)
        pre_act, lin1_cache = linear_fwd(normed, weights.ffn[m].w1,
                                         weights.ffn[m].b1)
        hidden = gelu(pre_act)
        ffn_out, lin2_cache = linear_fwd(hidden, weights.ffn[m].w2,
                                         weights.ffn[m].b2)
        outs.append(resid + _from_tokens(ffn_out, h, w))
        cache["tail"].append((ln_cache, lin1_cache, pre_act, lin2_cache))

    return (outs[0], outs[1]), cache


def cfm_backward(f1: Array, f2: Array, weights: CfmWeights,
                 grad_out1: Array, grad_out2: Array, directions=None):
    """Exact gradients of sum(grad_out1 * out1 + grad_out2 * out2) with
    respect to both inputs and every weight tensor (flat dotted names)."""
    _, cache = cfm_forward_cached(f1, f2, weights, directions)
    return cfm_backward_cached(weights, cache, grad_out1, grad_out2)


def cfm_backward_cached(weights: CfmWeights, cache, grad_out1: Array,
                        grad_out2: Array):
    cfg = weights.config
    h, w = cache["hw"]
    grads = {name: np.zeros_like(arr)
             for name, arr in flatten_params(weights).items()}

    # tails: out = resid + FFN(LN(resid)), resid = input + fused_map
    grad_resid = []
    for m, g_out in zip(MODALITIES, (grad_out1, grad_out2)):
        ln_cache, lin1_cache, pre_act, lin2_cache = cache["tail"][m]
        g_resid = g_out.copy()
        g_ffn_tokens = _to_tokens(g_out)
        g_hidden, gw2, gb2 = linear_bwd(lin2_cache, g_ffn_tokens)
        g_pre = g_hidden * gelu_grad(pre_act)
        g_normed, gw1, gb1 = linear_bwd(lin1_cache, g_pre)
        g_tokens, g_gamma, g_beta = layer_norm_bwd(ln_cache, g_normed)
        g_resid += _from_tokens(g_tokens, h, w)
        grads[f"ffn.{m}.w1"] += gw1
        grads[f"ffn.{m}.b1"] += gb1
        grads[f"ffn.{m}.w2"] += gw2
        grads[f"ffn.{m}.b2"] += gb2
        grads[f"ln_out.{m}.gamma"] += g_gamma
        grads[f"ln_out.{m}.beta"] += g_beta
        grad_resid.append(g_resid)

    grad_inputs = [grad_resid[0].copy(), grad_resid[1].copy()]
    g_fused_map = grad_resid[0] + grad_resid[1]

    g_y_tokens, gw, gb = linear_bwd(cache["proj_out"], _to_tokens(g_fused_map))
    grads["proj_out.weight"] += gw
    grads["proj_out.bias"] += gb
    g_acc = _from_tokens(g_y_tokens, h, w)

    g_mixed = [np.zeros((cfg.inner, h, w)) for _ in MODALITIES]
    for d, fused in cache["scan"]:
        g_y = scan2d.flatten(g_acc, d)
        g_fused, s6_grads = s6_backward(fused, weights.s6[d.value], g_y)
        g_map = scan2d.unflatten(g_fused, d, h, w)
        g_mixed[0] += g_map
        g_mixed[1] += g_map
        for name, g in s6_grads.items():
            grads[f"s6.{d.value}.{name}"] += g

    for m in MODALITIES:
        ln_cache, lin_cache, dw_cache, dw_out = cache["pre"][m]
        g_dw_out = g_mixed[m] * silu_grad(dw_out)
        g_fmap, g_dww, g_dwb = depthwise_conv2d_bwd(dw_cache, g_dw_out)
        g_proj = _to_tokens(g_fmap)
        g_normed, gw, gb = linear_bwd(lin_cache, g_proj)
        g_tokens, g_gamma, g_beta = layer_norm_bwd(ln_cache, g_normed)
        grad_inputs[m] += _from_tokens(g_tokens, h, w)
        grads[f"dw.{m}.weight"] += g_dww
        grads[f"dw.{m}.bias"] += g_dwb
        grads[f"proj_in.{m}.weight"] += gw
        grads[f"proj_in.{m}.bias"] += gb
        grads[f"ln_in.{m}.gamma"] += g_gamma
        grads[f"ln_in.{m}.beta"] += g_beta

    return grad_inputs[0], grad_inputs[1], grads
