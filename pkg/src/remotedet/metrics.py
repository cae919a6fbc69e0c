"""Detection metrics and ground-truth form preparation.

AP uses greedy matching in descending score order (each ground-truth box
consumed at most once, ties broken by input order) and all-points
interpolation of the precision envelope. mAP averages per-class AP over the
classes that have ground truth; the 0.5:0.95 variant additionally averages
over ten IoU thresholds.

Fused ground truth pairs same-class boxes across the two modalities by IoU
and keeps the larger-area box of each pair; unpaired boxes pass through.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import Box, Detection, GroundTruth, Modality, iou_matrix

FULL_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

GT_FORMS = ("rgb", "tir", "fusion")


def _match_flags(dets: list[Detection], gts: list[GroundTruth],
                 iou_thresh: float):
    """Greedy matching in descending score order (input order breaks ties);
    returns (scores, tp_flags) aligned with the sorted detections."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    ious = iou_matrix([dets[i].box for i in order], [g.box for g in gts])
    taken = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(order))
    for rank in range(len(order)):
        best_gt, best_iou = -1, 0.0
        for g in range(len(gts)):
            v = ious[rank, g]
            if not taken[g] and v >= iou_thresh and v > best_iou:
                best_gt, best_iou = g, v
        if best_gt >= 0:
            taken[best_gt] = True
            tp[rank] = 1.0
    scores = np.array([dets[i].score for i in order])
    return scores, tp


def average_precision(dets: list[Detection], gts: list[GroundTruth],
                      iou_thresh: float) -> float | None:
    """Single-class AP; ``None`` when there is no ground truth (undefined,
    excluded from the mean)."""
    return dataset_average_precision([(dets, gts)], iou_thresh)


def dataset_average_precision(per_image, iou_thresh: float) -> float | None:
    """Single-class AP over many images: matching happens within each image,
    ranking and the precision-recall curve are global."""
    n_gt = sum(len(gts) for _, gts in per_image)
    if n_gt == 0:
        return None
    scored = []
    for img_idx, (dets, gts) in enumerate(per_image):
        if not dets:
            continue
        scores, tp = _match_flags(dets, gts, iou_thresh)
        scored.extend(zip(scores, (img_idx,) * len(scores),
                          range(len(scores)), tp))
    if not scored:
        return 0.0
    scored.sort(key=lambda s: (-s[0], s[1], s[2]))
    tp = np.array([s[3] for s in scored])
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    return _area_under_envelope(recall, precision)


def _area_under_envelope(recall, precision) -> float:
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([1.0], precision, [0.0]))
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class MapReport:
    map50: float
    map50_95: float
    per_class_ap50: dict[int, float | None] = field(default_factory=dict)
    per_threshold: dict[float, float] = field(default_factory=dict)


def mean_ap(dets: list[Detection], gts: list[GroundTruth],
            thresholds=FULL_THRESHOLDS) -> MapReport:
    """Class-mean AP at 0.5 plus the mean over the given threshold ladder."""
    return dataset_mean_ap([(dets, gts)], thresholds)


def dataset_mean_ap(per_image, thresholds=FULL_THRESHOLDS) -> MapReport:
    classes = sorted({g.class_id for _, gts in per_image for g in gts})
    by_class = {
        c: [([d for d in dets if d.class_id == c],
             [g for g in gts if g.class_id == c]) for dets, gts in per_image]
        for c in classes
    }
    per_threshold = {}
    per_class_ap50 = {}
    for thr in thresholds:
        aps = []
        for c in classes:
            ap = dataset_average_precision(by_class[c], thr)
            if thr == 0.5:
                per_class_ap50[c] = ap
            if ap is not None:
                aps.append(ap)
        per_threshold[thr] = float(np.mean(aps)) if aps else 0.0
    map50 = per_threshold.get(0.5, 0.0)
    map50_95 = float(np.mean([per_threshold[t] for t in thresholds]))
    return MapReport(map50, map50_95, per_class_ap50, per_threshold)


def prepare_gt(rgb_gts: list[GroundTruth], tir_gts: list[GroundTruth],
               form: str) -> list[GroundTruth]:
    """Select the ground-truth form for a run.

    ``rgb``/``tir`` pass the corresponding list through. ``fusion`` pairs
    same-class boxes across modalities greedily by IoU (>= 0.5, highest
    first) and keeps the larger-area box of each pair, thermal winning ties;
    unpaired boxes pass through unchanged.
    """
    if form not in GT_FORMS:
        raise ValueError(f"unknown gt form {form!r}, expected one of {GT_FORMS}")
    if form == "rgb":
        return list(rgb_gts)
    if form == "tir":
        return list(tir_gts)

    pairs = []
    ious = iou_matrix([g.box for g in rgb_gts], [g.box for g in tir_gts])
    for i, r in enumerate(rgb_gts):
        for j, t in enumerate(tir_gts):
            if r.class_id == t.class_id and ious[i, j] >= 0.5:
                pairs.append((ious[i, j], i, j))
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))

    taken_rgb = set()
    taken_tir = set()
    winner_by_rgb = {}
    for quality, i, j in pairs:
        if i in taken_rgb or j in taken_tir:
            continue
        taken_rgb.add(i)
        taken_tir.add(j)
        r, t = rgb_gts[i], tir_gts[j]
        winner_by_rgb[i] = t if t.box.area >= r.box.area else r

    fused = [winner_by_rgb.get(i, g) for i, g in enumerate(rgb_gts)
             if i in winner_by_rgb or i not in taken_rgb]
    fused.extend(t for j, t in enumerate(tir_gts) if j not in taken_tir)
    return fused
