"""Toy-scale Siamese detector with cross-modal fusion taps.

Backbone per modality: a stride-2 stem, four downsampling stages each built
from a strided conv plus a single-bottleneck CSP-style block, and a fast
pooling pyramid at stride 1 on top. Channel plan 16/32/64/128/256/256. The
maps from stages 2, 3 and 5 (strides 8, 16, 32) feed the fusion taps, a small
top-down neck, and a 3-anchor dense head emitting (tx, ty, tw, th, obj,
class logits) per anchor slot.

Fusion modes: ``none`` (single branch), ``add`` (elementwise sum of branch
features), ``bid`` (fusion block restricted to the forward/backward row-major
scans), ``cfm`` (all four scan directions).

Every stage has a hand-written backward; the full model gradient is assembled
from the layer caches, keyed by the flat dotted parameter names.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .boxes import Box, Detection, Modality
from .cfm import CfmConfig, CfmWeights, cfm_backward_cached, \
    cfm_forward_cached, init_cfm
from .errors import ConfigError, ShapeError
from .losses import default_anchors
from .params import flatten_params
from .scan2d import ALL_DIRECTIONS, BIDIRECTIONAL
from .tensor import conv2d_bwd, conv2d_fwd, silu, silu_grad

Array = np.ndarray

FUSION_MODES = ("none", "add", "bid", "cfm")
CHANNEL_PLAN = (16, 32, 64, 128, 256, 256)


@dataclass
class DetectorConfig:
    num_classes: int = 3
    fusion: str = "cfm"
    modality: str = "tir"            # branch used when fusion == "none"
    channels: tuple = CHANNEL_PLAN
    fuse_stages: tuple = (2, 3, 5)
    strides: tuple = (8, 16, 32)
    anchors: tuple = None
    s6_state: int = 8
    expand: int = 2
    conf_thresh: float = 0.25
    iou_thresh: float = 0.45

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.modality not in ("rgb", "tir"):
            raise ConfigError(f"modality must be rgb or tir, got {self.modality!r}")
        if self.anchors is None:
            self.anchors = default_anchors(self.strides)

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchors[0])

    @property
    def tap_channels(self) -> tuple[int, ...]:
        return tuple(self.channels[s] for s in self.fuse_stages)

    def scan_directions(self):
        return BIDIRECTIONAL if self.fusion == "bid" else ALL_DIRECTIONS


@dataclass
class FeatureMap:
    stage: int
    modality: Modality
    tensor: Array


@dataclass
class PyramidLevel:
    level: int
    tensor: Array


@dataclass
class RawPrediction:
    level: int
    stride: int
    tensor: Array  # [A*(5+K), H, W]


@dataclass
class ConvWeights:
    weight: Array
    bias: Array


@dataclass
class C3Weights:
    cv1: ConvWeights
    cv2: ConvWeights
    b1: ConvWeights
    b2: ConvWeights
    cv3: ConvWeights


@dataclass
class BackboneWeights:
    stem: ConvWeights
    downs: list[ConvWeights]
    c3s: list[C3Weights]
    sppf_cv1: ConvWeights
    sppf_cv2: ConvWeights


@dataclass
class DetectorWeights:
    config: DetectorConfig
    branches: dict[str, BackboneWeights]
    cfms: dict[int, CfmWeights]
    neck: list[ConvWeights]          # [merge level1, merge level0]
    head3: list[ConvWeights]         # 3x3 conv per level
    head1: list[ConvWeights]         # 1x1 projection per level


def _init_conv(rng, c_out, c_in, k) -> ConvWeights:
    bound = 1.0 / np.sqrt(c_in * k * k)
    return ConvWeights(rng.uniform(-bound, bound, size=(c_out, c_in, k, k)),
                       np.zeros(c_out))


def _init_backbone(cfg: DetectorConfig, rng) -> BackboneWeights:
    ch = cfg.channels
    downs, c3s = [], []
    for s in range(1, 5):
        downs.append(_init_conv(rng, ch[s], ch[s - 1], 3))
        half = ch[s] // 2
        c3s.append(C3Weights(
            cv1=_init_conv(rng, half, ch[s], 1),
            cv2=_init_conv(rng, half, ch[s], 1),
            b1=_init_conv(rng, half, half, 1),
            b2=_init_conv(rng, half, half, 3),
            cv3=_init_conv(rng, ch[s], ch[s], 1),
        ))
    return BackboneWeights(
        stem=_init_conv(rng, ch[0], 3, 3),
        downs=downs,
        c3s=c3s,
        sppf_cv1=_init_conv(rng, ch[4] // 2, ch[4], 1),
        sppf_cv2=_init_conv(rng, ch[5], ch[4] * 2, 1),
    )


def init_detector(cfg: DetectorConfig, rng: np.random.Generator) -> DetectorWeights:
    branches = {}
    if cfg.fusion == "none":
        branches[cfg.modality] = _init_backbone(cfg, rng)
    else:
        branches["rgb"] = _init_backbone(cfg, rng)
        branches["tir"] = _init_backbone(cfg, rng)
    cfms = {}
    if cfg.fusion in ("bid", "cfm"):
        for stage in cfg.fuse_stages:
            cfms[stage] = init_cfm(CfmConfig(channels=cfg.channels[stage],
                                             expand=cfg.expand,
                                             state_size=cfg.s6_state), rng)
    c0, c1, c2 = cfg.tap_channels
    neck = [_init_conv(rng, c1, c2 + c1, 1), _init_conv(rng, c0, c1 + c0, 1)]
    head3 = [_init_conv(rng, c, c, 3) for c in (c0, c1, c2)]
    out_ch = cfg.anchors_per_cell * (5 + cfg.num_classes)
    head1 = [_init_conv(rng, out_ch, c, 1) for c in (c0, c1, c2)]
    return DetectorWeights(cfg, branches, cfms, neck, head3, head1)


# ---------------------------------------------------------------------------
# primitive layers with caches
# ---------------------------------------------------------------------------

def _conv_silu_fwd(x, w: ConvWeights, stride=1, padding=0):
    pre, conv_cache = conv2d_fwd(x, w.weight, w.bias, stride, padding)
    return silu(pre), (conv_cache, pre)


def _conv_silu_bwd(cache, g):
    conv_cache, pre = cache
    return conv2d_bwd(conv_cache, g * silu_grad(pre))


def _maxpool_fwd(x, k=5):
    pad = (k - 1) // 2
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    win = sliding_window_view(xp, (k, k), axis=(1, 2)).reshape(c, h, w, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), (idx, x.shape, k, pad)


def _maxpool_bwd(cache, g):
    idx, (c, h, w), k, pad = cache
    gx = np.zeros((c, h, w))
    ci, ii, jj = np.meshgrid(np.arange(c), np.arange(h), np.arange(w),
                             indexing="ij")
    src_i = ii + idx // k - pad
    src_j = jj + idx % k - pad
    np.add.at(gx, (ci, src_i, src_j), g)
    return gx


def _upsample2_fwd(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _upsample2_bwd(g):
    c, h2, w2 = g.shape
    return g.reshape(c, h2 // 2, 2, w2 // 2, 2).sum(axis=(2, 4))


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------

def _c3_fwd(x, w: C3Weights):
    y1, c_cv1 = _conv_silu_fwd(x, w.cv1)
    y2, c_cv2 = _conv_silu_fwd(x, w.cv2)
    m1, c_b1 = _conv_silu_fwd(y1, w.b1)
    m2, c_b2 = _conv_silu_fwd(m1, w.b2, padding=1)
    m = y1 + m2                                  # bottleneck shortcut
    cat = np.concatenate([m, y2], axis=0)
    out, c_cv3 = _conv_silu_fwd(cat, w.cv3)
    return out, (c_cv1, c_cv2, c_b1, c_b2, c_cv3, y1.shape[0])


def _c3_bwd(cache, g, prefix, grads):
    c_cv1, c_cv2, c_b1, c_b2, c_cv3, half = cache
    g_cat, gw, gb = _conv_silu_bwd(c_cv3, g)
    grads[f"{prefix}.cv3.weight"] += gw
    grads[f"{prefix}.cv3.bias"] += gb
    g_m, g_y2 = g_cat[:half], g_cat[half:]
    g_m2 = g_m                                   # shortcut splits the gradient
    g_m1, gw, gb = _conv_silu_bwd(c_b2, g_m2)
    grads[f"{prefix}.b2.weight"] += gw
    grads[f"{prefix}.b2.bias"] += gb
    g_y1, gw, gb = _conv_silu_bwd(c_b1, g_m1)
    grads[f"{prefix}.b1.weight"] += gw
    grads[f"{prefix}.b1.bias"] += gb
    g_y1 = g_y1 + g_m
    g_x1, gw, gb = _conv_silu_bwd(c_cv1, g_y1)
    grads[f"{prefix}.cv1.weight"] += gw
    grads[f"{prefix}.cv1.bias"] += gb
    g_x2, gw, gb = _conv_silu_bwd(c_cv2, g_y2)
    grads[f"{prefix}.cv2.weight"] += gw
    grads[f"{prefix}.cv2.bias"] += gb
    return g_x1 + g_x2


def _sppf_fwd(x, w: BackboneWeights):
    p0, c_cv1 = _conv_silu_fwd(x, w.sppf_cv1)
    p1, c_m1 = _maxpool_fwd(p0)
    p2, c_m2 = _maxpool_fwd(p1)
    p3, c_m3 = _maxpool_fwd(p2)
    cat = np.concatenate([p0, p1, p2, p3], axis=0)
    out, c_cv2 = _conv_silu_fwd(cat, w.sppf_cv2)
    return out, (c_cv1, c_m1, c_m2, c_m3, c_cv2, p0.shape[0])


def _sppf_bwd(cache, g, prefix, grads):
    c_cv1, c_m1, c_m2, c_m3, c_cv2, ch = cache
    g_cat, gw, gb = _conv_silu_bwd(c_cv2, g)
    grads[f"{prefix}.sppf_cv2.weight"] += gw
    grads[f"{prefix}.sppf_cv2.bias"] += gb
    g_p0 = g_cat[:ch].copy()
    g_p1 = g_cat[ch:2 * ch].copy()
    g_p2 = g_cat[2 * ch:3 * ch].copy()
    g_p3 = g_cat[3 * ch:]
    g_p2 += _maxpool_bwd(c_m3, g_p3)
    g_p1 += _maxpool_bwd(c_m2, g_p2)
    g_p0 += _maxpool_bwd(c_m1, g_p1)
    g_x, gw, gb = _conv_silu_bwd(c_cv1, g_p0)
    grads[f"{prefix}.sppf_cv1.weight"] += gw
    grads[f"{prefix}.sppf_cv1.bias"] += gb
    return g_x


def backbone_forward(img: Array, weights: BackboneWeights,
                     modality: Modality) -> list[FeatureMap]:
    maps, _ = backbone_forward_cached(img, weights, modality)
    return maps


def backbone_forward_cached(img: Array, weights: BackboneWeights,
                            modality: Modality):
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"backbone expects a [3,H,W] image, got {img.shape}")
    _, h, w = img.shape
    if h % 32 or w % 32:
        raise ConfigError(
            f"input size {h}x{w} must be a multiple of 32 in each dimension")
    caches = {}
    x, caches["stem"] = _conv_silu_fwd(img, weights.stem, stride=2, padding=1)
    maps = [FeatureMap(0, modality, x)]
    for s in range(1, 5):
        x, caches[f"down{s}"] = _conv_silu_fwd(x, weights.downs[s - 1],
                                               stride=2, padding=1)
        x, caches[f"c3_{s}"] = _c3_fwd(x, weights.c3s[s - 1])
        maps.append(FeatureMap(s, modality, x))
    x, caches["sppf"] = _sppf_fwd(x, weights)
    maps.append(FeatureMap(5, modality, x))
    return maps, caches


def backbone_backward(caches, tap_grads: dict[int, Array], prefix: str,
                      grads: dict[str, Array], stage4_shape) -> None:
    """Accumulate parameter gradients from per-stage tap gradients. The
    image gradient is discarded."""
    g5 = tap_grads.get(5)
    g = _sppf_bwd(caches["sppf"], g5, prefix, grads) if g5 is not None \
        else np.zeros(stage4_shape)
    for s in range(4, 0, -1):
        if s in tap_grads:
            g = g + tap_grads[s]
        g = _c3_bwd(caches[f"c3_{s}"], g, f"{prefix}.c3s.{s - 1}", grads)
        g, gw, gb = _conv_silu_bwd(caches[f"down{s}"], g)
        grads[f"{prefix}.downs.{s - 1}.weight"] += gw
        grads[f"{prefix}.downs.{s - 1}.bias"] += gb
    if 0 in tap_grads:
        g = g + tap_grads[0]
    _, gw, gb = _conv_silu_bwd(caches["stem"], g)
    grads[f"{prefix}.stem.weight"] += gw
    grads[f"{prefix}.stem.bias"] += gb


# ---------------------------------------------------------------------------
# fusion taps
# ---------------------------------------------------------------------------

def fuse_pyramid(rgb_maps: list[FeatureMap], tir_maps: list[FeatureMap],
                 cfm2: CfmWeights, cfm3: CfmWeights, cfm5: CfmWeights,
                 mode: str = "cfm") -> list[PyramidLevel]:
    """Public tap fusion: per tapped stage run the fusion block (or plain
    addition) and sum the two enhanced modality outputs."""
    if mode not in ("add", "bid", "cfm"):
        raise ConfigError(f"fuse_pyramid mode must be add/bid/cfm, got {mode!r}")
    cfg = DetectorConfig(fusion=mode)
    weights = {2: cfm2, 3: cfm3, 5: cfm5}
    levels = []
    for lvl, stage in enumerate(cfg.fuse_stages):
        fr = rgb_maps[stage].tensor
        ft = tir_maps[stage].tensor
        if fr.shape != ft.shape:
            raise ShapeError(
                f"stage {stage} modality shape mismatch: {fr.shape} vs {ft.shape}")
        if mode == "add":
            p = fr + ft
        else:
            o1, o2 = cfm_forward_cached(fr, ft, weights[stage],
                                        cfg.scan_directions())[0]
            p = o1 + o2
        levels.append(PyramidLevel(lvl, p))
    return levels


def _fuse_cached(weights: DetectorWeights, rgb_maps, tir_maps):
    cfg = weights.config
    pyramid, caches = [], {}
    for lvl, stage in enumerate(cfg.fuse_stages):
        fr = rgb_maps[stage].tensor
        ft = tir_maps[stage].tensor
        if cfg.fusion == "add":
            pyramid.append(fr + ft)
        else:
            (o1, o2), cache = cfm_forward_cached(fr, ft, weights.cfms[stage],
                                                 cfg.scan_directions())
            pyramid.append(o1 + o2)
            caches[stage] = cache
    return pyramid, caches


# ---------------------------------------------------------------------------
# neck + head
# ---------------------------------------------------------------------------

def _neck_head_fwd(weights: DetectorWeights, pyramid: list[Array]):
    if len(pyramid) != 3:
        raise ShapeError(f"neck expects 3 pyramid levels, got {len(pyramid)}")
    p0, p1, p2 = pyramid
    caches = {}
    t2 = p2
    up1 = _upsample2_fwd(t2)
    t1, caches["merge1"] = _conv_silu_fwd(
        np.concatenate([up1, p1], axis=0), weights.neck[0])
    up0 = _upsample2_fwd(t1)
    t0, caches["merge0"] = _conv_silu_fwd(
        np.concatenate([up0, p0], axis=0), weights.neck[1])
    raw = []
    for lvl, t in enumerate((t0, t1, t2)):
        hmid, caches[f"head3_{lvl}"] = _conv_silu_fwd(t, weights.head3[lvl],
                                                      padding=1)
        out, caches[f"head1_{lvl}"] = conv2d_fwd(
            hmid, weights.head1[lvl].weight, weights.head1[lvl].bias, 1, 0)
        raw.append(out)
    caches["up_split"] = (t2.shape[0], t1.shape[0])
    return raw, caches


def _neck_head_bwd(weights: DetectorWeights, caches, grad_raw):
    grads = {}
    for name, arr in flatten_params(weights).items():
        grads[name] = np.zeros_like(arr)
    c2, c1 = caches["up_split"]
    g_t = []
    for lvl in range(3):
        g_mid, gw, gb = conv2d_bwd(caches[f"head1_{lvl}"], grad_raw[lvl])
        grads[f"head1.{lvl}.weight"] += gw
        grads[f"head1.{lvl}.bias"] += gb
        g, gw, gb = _conv_silu_bwd(caches[f"head3_{lvl}"], g_mid)
        grads[f"head3.{lvl}.weight"] += gw
        grads[f"head3.{lvl}.bias"] += gb
        g_t.append(g)
    g_cat0, gw, gb = _conv_silu_bwd(caches["merge0"], g_t[0])
    grads["neck.1.weight"] += gw
    grads["neck.1.bias"] += gb
    g_t[1] = g_t[1] + _upsample2_bwd(g_cat0[:c1])
    g_p0 = g_cat0[c1:]
    g_cat1, gw, gb = _conv_silu_bwd(caches["merge1"], g_t[1])
    grads["neck.0.weight"] += gw
    grads["neck.0.bias"] += gb
    g_t[2] = g_t[2] + _upsample2_bwd(g_cat1[:c2])
    g_p1 = g_cat1[c2:]
    return [g_p0, g_p1, g_t[2]], grads


def neck_head_forward(weights: DetectorWeights,
                      pyramid: list[PyramidLevel]) -> list[RawPrediction]:
    raw, _ = _neck_head_fwd(weights, [p.tensor for p in pyramid])
    return [RawPrediction(lvl, weights.config.strides[lvl], r)
            for lvl, r in enumerate(raw)]


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

def detector_forward(weights: DetectorWeights, rgb: Array | None,
                     tir: Array | None) -> list[Array]:
    raw, _ = detector_forward_cached(weights, rgb, tir)
    return raw


def detector_forward_cached(weights: DetectorWeights, rgb, tir):
    cfg = weights.config
    cache = {}
    if cfg.fusion == "none":
        img = rgb if cfg.modality == "rgb" else tir
        if img is None:
            raise ConfigError(f"fusion 'none' requires the {cfg.modality} image")
        maps, bc = backbone_forward_cached(img, weights.branches[cfg.modality],
                                           Modality(cfg.modality))
        cache["backbone"] = {cfg.modality: bc}
        pyramid = [maps[s].tensor for s in cfg.fuse_stages]
    else:
        if rgb is None or tir is None:
            raise ConfigError(f"fusion {cfg.fusion!r} requires both modalities")
        if rgb.shape != tir.shape:
            raise ShapeError(f"modality shape mismatch: {rgb.shape} vs {tir.shape}")
        rgb_maps, bc_r = backbone_forward_cached(rgb, weights.branches["rgb"],
                                                 Modality.RGB)
        tir_maps, bc_t = backbone_forward_cached(tir, weights.branches["tir"],
                                                 Modality.TIR)
        cache["backbone"] = {"rgb": bc_r, "tir": bc_t}
        pyramid, cache["cfm"] = _fuse_cached(weights, rgb_maps, tir_maps)
        cache["stage4_shape"] = rgb_maps[4].tensor.shape
    if cfg.fusion == "none":
        cache["stage4_shape"] = maps[4].tensor.shape
    raw, cache["neck"] = _neck_head_fwd(weights, pyramid)
    return raw, cache


def detector_backward(weights: DetectorWeights, cache,
                      grad_raw: list[Array]) -> dict[str, Array]:
    cfg = weights.config
    g_pyramid, grads = _neck_head_bwd(weights, cache["neck"], grad_raw)
    stage4_shape = cache["stage4_shape"]
    if cfg.fusion == "none":
        taps = {stage: g for stage, g in zip(cfg.fuse_stages, g_pyramid)}
        backbone_backward(cache["backbone"][cfg.modality], taps,
                          f"branches.{cfg.modality}", grads, stage4_shape)
        return grads
    taps_r, taps_t = {}, {}
    for lvl, stage in enumerate(cfg.fuse_stages):
        g = g_pyramid[lvl]
        if cfg.fusion == "add":
            taps_r[stage], taps_t[stage] = g, g
        else:
            gr, gt, cfm_grads = cfm_backward_cached(
                weights.cfms[stage], cache["cfm"][stage], g, g)
            taps_r[stage], taps_t[stage] = gr, gt
            for name, cg in cfm_grads.items():
                grads[f"cfms.{stage}.{name}"] += cg
    backbone_backward(cache["backbone"]["rgb"], taps_r, "branches.rgb",
                      grads, stage4_shape)
    backbone_backward(cache["backbone"]["tir"], taps_t, "branches.tir",
                      grads, stage4_shape)
    return grads


# ---------------------------------------------------------------------------
# decode + NMS
# ---------------------------------------------------------------------------

def decode_predictions(raw: list[Array], cfg: DetectorConfig,
                       conf_thresh: float | None = None,
                       iou_thresh: float | None = None,
                       max_det: int = 100) -> list[Detection]:
    """Grid decode + per-class greedy NMS, deterministic under ties."""
    conf = cfg.conf_thresh if conf_thresh is None else conf_thresh
    iou_t = cfg.iou_thresh if iou_thresh is None else iou_thresh
    k = cfg.num_classes
    candidates = []
    for level, r in enumerate(raw):
        stride = cfg.strides[level]
        a_per = cfg.anchors_per_cell
        gh, gw = r.shape[1], r.shape[2]
        r = r.reshape(a_per, 5 + k, gh, gw)
        sig = expit(r)
        ys, xs = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
        for ai in range(a_per):
            aw, ah = cfg.anchors[level][ai]
            bx = (2.0 * sig[ai, 0] - 0.5 + xs) * stride
            by = (2.0 * sig[ai, 1] - 0.5 + ys) * stride
            bw = (2.0 * sig[ai, 2]) ** 2 * aw
            bh = (2.0 * sig[ai, 3]) ** 2 * ah
            obj = sig[ai, 4]
            cls_p = sig[ai, 5:]
            best_c = cls_p.argmax(axis=0)
            best_p = np.take_along_axis(cls_p, best_c[None], axis=0)[0]
            score = obj * best_p
            for i, j in np.argwhere(score >= conf):
                candidates.append(Detection(
                    Box(bx[i, j], by[i, j], bw[i, j], bh[i, j]),
                    int(best_c[i, j]), float(score[i, j])))
    kept = nms(candidates, iou_t)
    kept.sort(key=lambda d: -d.score)
    return kept[:max_det]


def nms(dets: list[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy per-class suppression; candidates ordered by score then input
    index, overlaps above the threshold removed."""
    from .boxes import iou as box_iou
    kept: list[Detection] = []
    for cls in sorted({d.class_id for d in dets}):
        pool = [(i, d) for i, d in enumerate(dets) if d.class_id == cls]
        pool.sort(key=lambda p: (-p[1].score, p[0]))
        while pool:
            _, best = pool.pop(0)
            kept.append(best)
            pool = [(i, d) for i, d in pool
                    if box_iou(best.box, d.box) <= iou_thresh]
    return kept
