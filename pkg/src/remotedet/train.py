"""SGD training loop, dataset evaluation, and checkpoint plumbing.

Training is single-threaded and fully deterministic given (seed, config):
weight init, the per-epoch sample order, and the augmentation draws all come
from generators derived from the run seed. The learning rate decays linearly
from ``lr_init`` to ``lr_final`` across epochs. The best-by-validation-mAP
weight snapshot is kept alongside the final weights.
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box, GroundTruth
from .data import SamplePair
from .detector import (DetectorConfig, decode_predictions, detector_backward,
                       detector_forward, detector_forward_cached,
                       init_detector, DetectorWeights)
from .errors import CheckpointVersionError, ConfigError, DivergenceError
from .fileio import read_checkpoint, write_checkpoint
from .losses import LossConfig, total_loss_with_grad
from .metrics import GT_FORMS, MapReport, dataset_mean_ap
from .params import SgdMomentum, accumulate, flatten_params, scale, \
    zero_grads_like

Array = np.ndarray


@dataclass
class TrainConfig:
    epochs: int = 6
    lr_init: float = 1e-2
    lr_final: float = 2e-3
    batch: int = 8
    seed: int = 0
    gt_form: str = "fusion"
    fusion: str = "cfm"
    modality: str = "auto"   # branch for fusion == "none"; auto follows gt_form
    momentum: float = 0.9
    num_classes: int = 3
    image_size: int = 64
    s6_state: int = 8
    smooth_eps: float = 0.0
    augment: bool = True
    eval_conf: float = 0.01
    eval_iou: float = 0.45

    def __post_init__(self):
        if not (self.lr_init >= self.lr_final > 0.0):
            raise ConfigError(
                f"need lr_init >= lr_final > 0, got {self.lr_init} / {self.lr_final}")
        if self.epochs < 1 or self.batch < 1:
            raise ConfigError("epochs and batch must be >= 1")
        if self.gt_form not in GT_FORMS:
            raise ConfigError(f"gt_form must be one of {GT_FORMS}")
        if self.modality == "auto":
            self.modality = self.gt_form if self.gt_form in ("rgb", "tir") else "tir"

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(num_classes=self.num_classes, fusion=self.fusion,
                              modality=self.modality, s6_state=self.s6_state)

    def loss_config(self, det_cfg: DetectorConfig) -> LossConfig:
        return LossConfig(num_classes=self.num_classes, strides=det_cfg.strides,
                          anchors=det_cfg.anchors, smooth_eps=self.smooth_eps)

    def learning_rate(self, epoch: int) -> float:
        if self.epochs == 1:
            return self.lr_init
        frac = epoch / (self.epochs - 1)
        return self.lr_init + (self.lr_final - self.lr_init) * frac


@dataclass
class EpochStats:
    epoch: int
    lr: float
    total: float
    box: float
    obj: float
    cls: float
    val_map50: float
    seconds: float


@dataclass
class TrainResult:
    weights: DetectorWeights          # final-epoch weights
    best_state: dict[str, Array]      # best-by-val-mAP tensor snapshot
    best_map50: float
    best_epoch: int
    history: list[EpochStats]

    def best_weights(self) -> DetectorWeights:
        w = clone_weights(self.weights)
        params = flatten_params(w)
        for name, arr in self.best_state.items():
            params[name][...] = arr
        return w


def clone_weights(weights: DetectorWeights) -> DetectorWeights:
    import copy
    return copy.deepcopy(weights)


def _augment(sample: SamplePair, gts: list[GroundTruth], rng, image_size: int,
             enabled: bool):
    rgb, tir = sample.rgb, sample.tir
    if not enabled:
        return rgb, tir, gts
    if rng.uniform() < 0.5:  # horizontal flip, both modalities + boxes
        rgb = np.ascontiguousarray(rgb[:, :, ::-1])
        tir = np.ascontiguousarray(tir[:, :, ::-1])
        gts = [dataclasses.replace(
            g, box=Box(image_size - g.box.cx, g.box.cy, g.box.w, g.box.h),
            polygon=None) for g in gts]
    # color jitter on the visible-light image only
    factors = rng.uniform(0.9, 1.1, size=3)
    rgb = np.clip(rgb * factors[:, None, None], 0.0, 1.0)
    return rgb, tir, gts


def train(cfg: TrainConfig, train_data: list[SamplePair],
          val_data: list[SamplePair], log=None) -> TrainResult:
    if not train_data:
        raise ConfigError("training dataset is empty")
    det_cfg = cfg.detector_config()
    loss_cfg = cfg.loss_config(det_cfg)
    weights = init_detector(det_cfg, np.random.default_rng(cfg.seed))
    params = flatten_params(weights)
    opt = SgdMomentum(params, momentum=cfg.momentum)

    history = []
    best_state = {name: arr.copy() for name, arr in params.items()}
    best_map50, best_epoch = -1.0, -1

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.learning_rate(epoch)
        rng = np.random.default_rng([cfg.seed, 7919, epoch])
        order = rng.permutation(len(train_data))
        sums = np.zeros(4)
        for start in range(0, len(order), cfg.batch):
            batch = order[start:start + cfg.batch]
            acc = zero_grads_like(params)
            for idx in batch:
                sample = train_data[idx]
                gts = sample.gts(cfg.gt_form)
                rgb, tir, gts = _augment(sample, gts, rng, cfg.image_size,
                                         cfg.augment)
                raw, cache = detector_forward_cached(weights, rgb, tir)
                breakdown, grad_raw, _ = total_loss_with_grad(raw, gts, loss_cfg)
                if not np.isfinite(breakdown.total):
                    raise DivergenceError("non-finite training loss",
                                          epoch, start)
                accumulate(acc, detector_backward(weights, cache, grad_raw))
                sums += (breakdown.total, breakdown.box, breakdown.obj,
                         breakdown.cls)
            scale(acc, 1.0 / len(batch))
            opt.step(acc, lr)

        report = evaluate(weights, val_data, cfg.gt_form,
                          conf_thresh=cfg.eval_conf, iou_thresh=cfg.eval_iou) \
            if val_data else MapReport(0.0, 0.0)
        means = sums / len(order)
        stats = EpochStats(epoch, lr, *means, report.map50,
                           time.perf_counter() - t0)
        history.append(stats)
        if report.map50 > best_map50:
            best_map50, best_epoch = report.map50, epoch
            best_state = {name: arr.copy() for name, arr in params.items()}
        if log:
            log(f"epoch {epoch:3d}  lr {lr:.5f}  loss {stats.total:.5f} "
                f"(box {stats.box:.4f} obj {stats.obj:.4f} cls {stats.cls:.4f})"
                f"  val mAP@0.5 {stats.val_map50:.4f}  [{stats.seconds:.1f}s]")

    return TrainResult(weights, best_state, best_map50, best_epoch, history)


def evaluate(weights: DetectorWeights, data: list[SamplePair], gt_form: str,
             conf_thresh: float = 0.01, iou_thresh: float = 0.45) -> MapReport:
    """Decode every sample and compute dataset mAP against the chosen
    ground-truth form."""
    cfg = weights.config
    per_image = []
    for sample in data:
        raw = detector_forward(weights, sample.rgb, sample.tir)
        dets = decode_predictions(raw, cfg, conf_thresh, iou_thresh)
        per_image.append((dets, sample.gts(gt_form)))
    return dataset_mean_ap(per_image)


# ---------------------------------------------------------------------------
# checkpoint plumbing
# ---------------------------------------------------------------------------

def checkpoint_meta(det_cfg: DetectorConfig, extra: dict | None = None) -> dict:
    meta = {
        "kind": "detector",
        "num_classes": det_cfg.num_classes,
        "fusion": det_cfg.fusion,
        "modality": det_cfg.modality,
        "channels": list(det_cfg.channels),
        "strides": list(det_cfg.strides),
        "s6_state": det_cfg.s6_state,
        "expand": det_cfg.expand,
    }
    if extra:
        meta.update(extra)
    return meta


def save_weights(path, weights: DetectorWeights, extra: dict | None = None,
                 state: dict[str, Array] | None = None) -> None:
    tensors = state if state is not None else flatten_params(weights)
    write_checkpoint(path, tensors, checkpoint_meta(weights.config, extra))


def load_weights(path) -> tuple[DetectorWeights, dict]:
    tensors, meta = read_checkpoint(path)
    if meta.get("kind") != "detector":
        raise CheckpointVersionError(f"{path}: not a detector checkpoint")
    det_cfg = DetectorConfig(
        num_classes=int(meta["num_classes"]), fusion=meta["fusion"],
        modality=meta["modality"], channels=tuple(meta["channels"]),
        strides=tuple(meta["strides"]), s6_state=int(meta["s6_state"]),
        expand=int(meta["expand"]))
    weights = init_detector(det_cfg, np.random.default_rng(0))
    params = flatten_params(weights)
    if set(params) != set(tensors):
        missing = set(params) ^ set(tensors)
        raise CheckpointVersionError(
            f"{path}: tensor table does not match model config "
            f"({len(missing)} mismatched names)")
    for name, arr in tensors.items():
        if params[name].shape != arr.shape:
            raise CheckpointVersionError(
                f"{path}: {name} has shape {arr.shape}, model expects "
                f"{params[name].shape}")
        params[name][...] = arr
    return weights, meta
