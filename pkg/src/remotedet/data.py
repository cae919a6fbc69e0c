"""Synthetic paired-modality dataset.

Each sample is a 64x64 visible-light / thermal image pair containing 1-6
rectangular objects from three classes. Class identity is split across the
modalities: hue separates the cool class from the two warm ones in the
visible image, and thermal brightness separates the dim class from the two
bright ones, so neither modality alone can resolve all three classes.

A configurable fraction of objects is rendered in exactly one modality
(dark/cold objects), which is what gives fusion models their structural
advantage over unimodal ones. Shared objects get up to ~2 px of independent
jitter between the two modalities' boxes, exercising the fused ground-truth
pairing. Generation is fully deterministic given the seed; per-sample seeds
are spawned up front so the worker count never changes the output.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box, GroundTruth, Modality
from .errors import DataError

Array = np.ndarray

CLASS_NAMES = ("car", "truck", "van")

# (rgb hue family, tir brightness): warm+dim / warm+bright / cool+bright
_CLASS_STYLE = (
    ((0.75, 0.30, 0.18), 0.55),
    ((0.80, 0.42, 0.12), 0.92),
    ((0.20, 0.35, 0.85), 0.90),
)


@dataclass
class DatasetSpec:
    image_size: int = 64
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 6
    exclusive_fraction: float = 0.5
    jitter_px: int = 1
    noise: float = 0.02
    min_side: int = 8
    max_side: int = 22

    def __post_init__(self):
        if self.num_classes != len(CLASS_NAMES):
            raise DataError(f"synthetic data defines {len(CLASS_NAMES)} classes")
        if not 0.0 <= self.exclusive_fraction <= 1.0:
            raise DataError("exclusive_fraction must lie in [0,1]")
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise DataError("object count range is invalid")


@dataclass
class SamplePair:
    rgb: Array
    tir: Array
    rgb_gts: list[GroundTruth]
    tir_gts: list[GroundTruth]
    id: str

    def gts(self, form: str) -> list[GroundTruth]:
        from .metrics import prepare_gt
        return prepare_gt(self.rgb_gts, self.tir_gts, form)


def worker_count(default: int = 1) -> int:
    """Worker cap from the REMOTEDET_THREADS environment variable."""
    raw = os.environ.get("REMOTEDET_THREADS", "")
    if not raw:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise DataError(f"REMOTEDET_THREADS must be an integer, got {raw!r}")
    return max(1, n)


def generate_dataset(n: int, seed: int,
                     spec: DatasetSpec | None = None) -> list[SamplePair]:
    """Deterministic list of sample pairs; ids are zero-padded indices."""
    if n < 1:
        raise DataError(f"dataset size must be >= 1, got {n}")
    spec = spec or DatasetSpec()
    seeds = np.random.SeedSequence(seed).spawn(n)
    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(
                lambda i: generate_sample(np.random.default_rng(seeds[i]),
                                          spec, f"{i:05d}"), range(n)))
    return [generate_sample(np.random.default_rng(seeds[i]), spec, f"{i:05d}")
            for i in range(n)]


def generate_sample(rng: np.random.Generator, spec: DatasetSpec,
                    sample_id: str) -> SamplePair:
    size = spec.image_size
    base_light = rng.uniform(0.06, 0.14)
    rgb = np.full((3, size, size), base_light) \
        + rng.normal(0.0, spec.noise, size=(3, size, size))
    tir = np.full((3, size, size), rng.uniform(0.25, 0.35)) \
        + rng.normal(0.0, spec.noise, size=(3, size, size))

    n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    rgb_gts: list[GroundTruth] = []
    tir_gts: list[GroundTruth] = []
    placed: list[tuple[int, int, int, int]] = []

    for _ in range(n_objects):
        rect = _place_rect(rng, spec, placed)
        if rect is None:
            continue
        placed.append(rect)
        class_id = int(rng.integers(spec.num_classes))
        exclusive = rng.uniform() < spec.exclusive_fraction
        if exclusive:
            target = Modality.RGB if rng.uniform() < 0.5 else Modality.TIR
            modalities = (target,)
        else:
            modalities = (Modality.RGB, Modality.TIR)
        for modality in modalities:
            r = _jitter_rect(rng, rect, spec) if len(modalities) == 2 else rect
            if modality is Modality.RGB:
                _render_rgb(rng, rgb, r, class_id)
                rgb_gts.append(_gt_from_rect(r, class_id, modality))
            else:
                _render_tir(rng, tir, r, class_id)
                tir_gts.append(_gt_from_rect(r, class_id, modality))

    np.clip(rgb, 0.0, 1.0, out=rgb)
    np.clip(tir, 0.0, 1.0, out=tir)
    return SamplePair(rgb, tir, rgb_gts, tir_gts, sample_id)


def _place_rect(rng, spec, placed, attempts: int = 25):
    size = spec.image_size
    for _ in range(attempts):
        w = int(rng.integers(spec.min_side, spec.max_side + 1))
        h = int(rng.integers(spec.min_side, spec.max_side + 1))
        x0 = int(rng.integers(1, size - w - 1))
        y0 = int(rng.integers(1, size - h - 1))
        rect = (x0, y0, w, h)
        if all(_rect_iou(rect, other) < 0.25 for other in placed):
            return rect
    return None


def _rect_iou(a, b) -> float:
    ax0, ay0, aw, ah = a
    bx0, by0, bw, bh = b
    iw = min(ax0 + aw, bx0 + bw) - max(ax0, bx0)
    ih = min(ay0 + ah, by0 + bh) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def _jitter_rect(rng, rect, spec):
    x0, y0, w, h = rect
    j = spec.jitter_px
    size = spec.image_size
    x0 = int(np.clip(x0 + rng.integers(-j, j + 1), 0, size - 5))
    y0 = int(np.clip(y0 + rng.integers(-j, j + 1), 0, size - 5))
    w = int(np.clip(w + rng.integers(-j, j + 1), 4, size - x0))
    h = int(np.clip(h + rng.integers(-j, j + 1), 4, size - y0))
    return (x0, y0, w, h)


def _gt_from_rect(rect, class_id, modality) -> GroundTruth:
    x0, y0, w, h = rect
    polygon = (float(x0), float(y0), float(x0 + w), float(y0),
               float(x0 + w), float(y0 + h), float(x0), float(y0 + h))
    return GroundTruth(Box(x0 + w / 2.0, y0 + h / 2.0, float(w), float(h)),
                       class_id, modality, polygon)


def _render_rgb(rng, img, rect, class_id):
    x0, y0, w, h = rect
    color, _ = _CLASS_STYLE[class_id]
    jitter = rng.uniform(-0.05, 0.05, size=3)
    patch = np.clip(np.asarray(color) + jitter, 0.05, 1.0)
    img[:, y0:y0 + h, x0:x0 + w] = patch[:, None, None] \
        + rng.normal(0.0, 0.015, size=(3, h, w))


def _render_tir(rng, img, rect, class_id):
    x0, y0, w, h = rect
    _, heat = _CLASS_STYLE[class_id]
    level = float(np.clip(heat + rng.uniform(-0.04, 0.04), 0.05, 1.0))
    img[:, y0:y0 + h, x0:x0 + w] = level \
        + rng.normal(0.0, 0.015, size=(1, h, w))
