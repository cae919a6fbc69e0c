"""Training losses: CIoU box regression, label-smoothed BCE for objectness
and classification, and the anchor assignment that ties dense head outputs to
ground-truth boxes.

The composite loss is box + objectness + classification with YOLO-lineage
weights (0.05 / 1.0 / 0.5, configurable). Objectness targets for matched
anchors are the (detached) plain IoU produced inside the CIoU computation;
everything else is a hard 0/1 target before label smoothing. Gradients with
respect to the raw head logits are computed analytically alongside the loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .boxes import Box, GroundTruth
from .errors import ShapeError, ValidationError

Array = np.ndarray

_V_COEF = 4.0 / math.pi ** 2


def default_anchors(strides=(8, 16, 32)) -> tuple:
    """Square anchors at 0.5x / 1x / 2x of each level's stride."""
    return tuple(tuple((m * s, m * s) for m in (0.5, 1.0, 2.0)) for s in strides)


@dataclass
class LossConfig:
    num_classes: int
    strides: tuple[int, ...] = (8, 16, 32)
    anchors: tuple = field(default_factory=default_anchors)
    box_weight: float = 0.05
    obj_weight: float = 1.0
    cls_weight: float = 0.5
    smooth_eps: float = 0.0
    wh_ratio_max: float = 4.0

    def __post_init__(self):
        if not 0.0 <= self.smooth_eps < 0.5:
            raise ValidationError(f"smooth_eps must be in [0, 0.5), got {self.smooth_eps}")
        if len(self.anchors) != len(self.strides):
            raise ShapeError("anchors and strides must align per level")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchors[0])


@dataclass
class LossBreakdown:
    total: float
    box: float
    obj: float
    cls: float


# ---------------------------------------------------------------------------
# CIoU
# ---------------------------------------------------------------------------

def ciou_loss(pred: Box, target: Box, aspect_alpha: float | None = None) -> float:
    """1 - IoU + center-distance penalty + aspect-ratio penalty, in [0, 3).

    ``aspect_alpha`` overrides the aspect-penalty weight; gradient
    verification passes the primal-point value since the weight is a
    detached constant by construction.
    """
    loss, _, _ = ciou_loss_grad(pred, target, aspect_alpha)
    return loss


def ciou_loss_grad(pred: Box, target: Box, aspect_alpha: float | None = None):
    """Returns (loss, iou, grad) with grad = dloss/d(cx, cy, w, h) of the
    prediction. The aspect-ratio weight alpha is treated as a constant."""
    if target.w <= 0.0 or target.h <= 0.0:
        raise ValidationError(f"degenerate target box {target.w}x{target.h}")
    px1, py1, px2, py2 = pred.corners()
    tx1, ty1, tx2, ty2 = target.corners()

    iw = min(px2, tx2) - max(px1, tx1)
    ih = min(py2, ty2) - max(py1, ty1)
    parea, tarea = pred.area, target.area
    # corner partials of the intersection, zero outside the overlap regime
    if iw > 0.0 and ih > 0.0:
        inter = iw * ih
        di_dpx1 = -ih if px1 > tx1 else 0.0
        di_dpx2 = ih if px2 < tx2 else 0.0
        di_dpy1 = -iw if py1 > ty1 else 0.0
        di_dpy2 = iw if py2 < ty2 else 0.0
    else:
        inter = di_dpx1 = di_dpx2 = di_dpy1 = di_dpy2 = 0.0
    union = parea + tarea - inter
    iou = inter / union

    di = np.array([di_dpx1 + di_dpx2,                      # d/dcx
                   di_dpy1 + di_dpy2,                      # d/dcy
                   0.5 * (di_dpx2 - di_dpx1),              # d/dw
                   0.5 * (di_dpy2 - di_dpy1)])             # d/dh
    dparea = np.array([0.0, 0.0, pred.h, pred.w])
    dunion = dparea - di
    diou = (di * union - inter * dunion) / union ** 2

    dx, dy = pred.cx - target.cx, pred.cy - target.cy
    rho2 = dx * dx + dy * dy
    drho2 = np.array([2.0 * dx, 2.0 * dy, 0.0, 0.0])

    ex1 = min(px1, tx1)
    ey1 = min(py1, ty1)
    ex2 = max(px2, tx2)
    ey2 = max(py2, ty2)
    cw, ch = ex2 - ex1, ey2 - ey1
    c2 = cw * cw + ch * ch
    dex1 = np.array([1.0, 0.0, -0.5, 0.0]) if px1 < tx1 else np.zeros(4)
    dex2 = np.array([1.0, 0.0, 0.5, 0.0]) if px2 > tx2 else np.zeros(4)
    dey1 = np.array([0.0, 1.0, 0.0, -0.5]) if py1 < ty1 else np.zeros(4)
    dey2 = np.array([0.0, 1.0, 0.0, 0.5]) if py2 > ty2 else np.zeros(4)
    dc2 = 2.0 * cw * (dex2 - dex1) + 2.0 * ch * (dey2 - dey1)
    dcenter = (drho2 * c2 - rho2 * dc2) / c2 ** 2

    angle = math.atan(target.w / target.h) - math.atan(pred.w / pred.h)
    v = _V_COEF * angle * angle
    denom = pred.w ** 2 + pred.h ** 2
    dv = np.array([0.0, 0.0,
                   -2.0 * _V_COEF * angle * pred.h / denom,
                   2.0 * _V_COEF * angle * pred.w / denom])
    if aspect_alpha is None:
        alpha = v / ((1.0 - iou) + v) if v > 0.0 else 0.0
    else:
        alpha = aspect_alpha

    loss = 1.0 - iou + rho2 / c2 + alpha * v
    grad = -diou + dcenter + alpha * dv
    return loss, iou, grad


# ---------------------------------------------------------------------------
# smooth BCE
# ---------------------------------------------------------------------------

def smooth_bce(logit, target, eps: float = 0.0):
    """Numerically stable BCE-with-logits after label smoothing.

    Targets map through t -> t*(1-eps) + eps/2, sending hard 0/1 labels to
    eps/2 and 1 - eps/2. Stable for |logit| up to at least 1e4.
    """
    if not 0.0 <= eps < 0.5:
        raise ValidationError(f"eps must be in [0, 0.5), got {eps}")
    z = np.asarray(logit, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64) * (1.0 - eps) + eps / 2.0
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return float(loss) if loss.ndim == 0 else loss


def smooth_bce_grad(logit, target, eps: float = 0.0):
    z = np.asarray(logit, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64) * (1.0 - eps) + eps / 2.0
    return expit(z) - t


# ---------------------------------------------------------------------------
# anchor assignment and the composite loss
# ---------------------------------------------------------------------------

@dataclass
class _Match:
    level: int
    anchor: int
    gi: int  # grid row
    gj: int  # grid column
    gt: GroundTruth


def assign_targets(gts: list[GroundTruth], cfg: LossConfig,
                   grid_shapes: list[tuple[int, int]]) -> list[_Match]:
    """YOLO-style assignment: a box matches anchors within a 4x wh ratio, in
    its own grid cell plus the two nearest neighbor cells."""
    matches = []
    for gt in gts:
        for level, (stride, anchors) in enumerate(zip(cfg.strides, cfg.anchors)):
            gh, gw = grid_shapes[level]
            gx, gy = gt.box.cx / stride, gt.box.cy / stride
            if not (0.0 <= gx < gw and 0.0 <= gy < gh):
                continue
            gj, gi = int(gx), int(gy)
            dj = -1 if gx - gj < 0.5 else 1
            di = -1 if gy - gi < 0.5 else 1
            cells = [(gi, gj), (gi, gj + dj), (gi + di, gj)]
            for ai, (aw, ah) in enumerate(anchors):
                rw, rh = gt.box.w / aw, gt.box.h / ah
                if rw <= 0.0 or rh <= 0.0:
                    continue
                if max(rw, 1.0 / rw, rh, 1.0 / rh) >= cfg.wh_ratio_max:
                    continue
                for ci, cj in cells:
                    if 0 <= ci < gh and 0 <= cj < gw:
                        matches.append(_Match(level, ai, ci, cj, gt))
    return matches


def decode_single(raw_level: Array, cfg: LossConfig, level: int, anchor: int,
                  gi: int, gj: int) -> tuple[Box, Array]:
    """Decode one anchor slot into a pixel box; also returns the 4 raw logits."""
    k = cfg.num_classes
    base = anchor * (5 + k)
    t = raw_level[base:base + 4, gi, gj]
    stride = cfg.strides[level]
    aw, ah = cfg.anchors[level][anchor]
    sig = expit(t)
    bx = ((2.0 * sig[0] - 0.5) + gj) * stride
    by = ((2.0 * sig[1] - 0.5) + gi) * stride
    bw = (2.0 * sig[2]) ** 2 * aw
    bh = (2.0 * sig[3]) ** 2 * ah
    return Box(bx, by, bw, bh), t


def encode_single(box: Box, cfg: LossConfig, level: int, anchor: int,
                  gi: int, gj: int) -> Array:
    """Inverse of :func:`decode_single` (where representable); test helper and
    oracle for 'perfect prediction' construction."""
    stride = cfg.strides[level]
    aw, ah = cfg.anchors[level][anchor]

    def logit(p):
        p = min(max(p, 1e-15), 1.0 - 1e-15)
        return math.log(p / (1.0 - p))

    sx = ((box.cx / stride - gj) + 0.5) / 2.0
    sy = ((box.cy / stride - gi) + 0.5) / 2.0
    sw = math.sqrt(box.w / aw) / 2.0
    sh = math.sqrt(box.h / ah) / 2.0
    return np.array([logit(sx), logit(sy), logit(sw), logit(sh)])


@dataclass
class DetachedTargets:
    """Loss terms that are constants w.r.t. gradients: the per-match aspect
    weights and the IoU-derived objectness target grids. Passing the primal
    values back in lets a finite-difference oracle probe exactly the function
    the analytic gradient differentiates."""
    aspect_alphas: list[float]
    obj_targets: list[Array]


def total_loss(raw: list[Array], gts: list[GroundTruth], cfg: LossConfig,
               detached: DetachedTargets | None = None) -> LossBreakdown:
    breakdown, _, _ = total_loss_with_grad(raw, gts, cfg, detached)
    return breakdown


def total_loss_with_grad(raw: list[Array], gts: list[GroundTruth],
                         cfg: LossConfig,
                         detached: DetachedTargets | None = None):
    """Composite loss, its gradient w.r.t. every raw head tensor, and the
    detached targets that were used."""
    k = cfg.num_classes
    a_per = cfg.anchors_per_cell
    eps = cfg.smooth_eps
    grid_shapes = []
    for level, r in enumerate(raw):
        if r.ndim != 3 or r.shape[0] != a_per * (5 + k):
            raise ShapeError(
                f"raw level {level} must be [{a_per * (5 + k)},H,W], got {r.shape}")
        grid_shapes.append((r.shape[1], r.shape[2]))

    grads = [np.zeros_like(r) for r in raw]
    matches = assign_targets(gts, cfg, grid_shapes)
    if detached is None:
        obj_targets = [np.zeros((a_per, gh, gw)) for (gh, gw) in grid_shapes]
        alphas: list[float | None] = [None] * len(matches)
        fresh_targets = True
    else:
        obj_targets = detached.obj_targets
        alphas = list(detached.aspect_alphas)
        fresh_targets = False
    used_alphas = []

    # box + class terms over matched anchors
    box_sum = 0.0
    cls_sum = 0.0
    n_cls_elems = max(1, len(matches) * k)
    for idx, m in enumerate(matches):
        stride = cfg.strides[m.level]
        aw, ah = cfg.anchors[m.level][m.anchor]
        base = m.anchor * (5 + k)
        pred_box, t_logits = decode_single(raw[m.level], cfg, m.level,
                                           m.anchor, m.gi, m.gj)
        loss_m, iou_m, dbox = ciou_loss_grad(pred_box, m.gt.box, alphas[idx])
        box_sum += loss_m
        used_alphas.append(alphas[idx] if alphas[idx] is not None else
                           _aspect_alpha(pred_box, m.gt.box, iou_m))
        sig = expit(t_logits)
        dsig = sig * (1.0 - sig)
        scale = cfg.box_weight / len(matches)
        grads[m.level][base + 0, m.gi, m.gj] += scale * dbox[0] * 2.0 * dsig[0] * stride
        grads[m.level][base + 1, m.gi, m.gj] += scale * dbox[1] * 2.0 * dsig[1] * stride
        grads[m.level][base + 2, m.gi, m.gj] += scale * dbox[2] * 8.0 * sig[2] * dsig[2] * aw
        grads[m.level][base + 3, m.gi, m.gj] += scale * dbox[3] * 8.0 * sig[3] * dsig[3] * ah

        if fresh_targets:
            prev = obj_targets[m.level][m.anchor, m.gi, m.gj]
            obj_targets[m.level][m.anchor, m.gi, m.gj] = \
                max(prev, min(max(iou_m, 0.0), 1.0))

        cls_logits = raw[m.level][base + 5:base + 5 + k, m.gi, m.gj]
        cls_t = np.zeros(k)
        cls_t[m.gt.class_id] = 1.0
        cls_sum += smooth_bce(cls_logits, cls_t, eps).sum()
        grads[m.level][base + 5:base + 5 + k, m.gi, m.gj] += \
            cfg.cls_weight * smooth_bce_grad(cls_logits, cls_t, eps) / n_cls_elems

    # objectness over every anchor slot
    obj_sum = 0.0
    n_obj = sum(a_per * gh * gw for gh, gw in grid_shapes)
    for level, r in enumerate(raw):
        gh, gw = grid_shapes[level]
        for ai in range(a_per):
            z = r[ai * (5 + k) + 4]
            t = obj_targets[level][ai]
            obj_sum += smooth_bce(z, t, eps).sum()
            grads[level][ai * (5 + k) + 4] += \
                cfg.obj_weight * smooth_bce_grad(z, t, eps) / n_obj

    l_box = box_sum / len(matches) if matches else 0.0
    l_cls = cls_sum / n_cls_elems if matches else 0.0
    l_obj = obj_sum / n_obj
    total = cfg.box_weight * l_box + cfg.obj_weight * l_obj + cfg.cls_weight * l_cls
    return (LossBreakdown(total, l_box, l_obj, l_cls), grads,
            DetachedTargets(used_alphas, obj_targets))


def _aspect_alpha(pred: Box, target: Box, iou: float) -> float:
    angle = math.atan(target.w / target.h) - math.atan(pred.w / pred.h)
    v = _V_COEF * angle * angle
    return v / ((1.0 - iou) + v) if v > 0.0 else 0.0
