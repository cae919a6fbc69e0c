"""Annotation, image, and checkpoint I/O.

Annotations use one object per line in oriented-corner form::

    x1 y1 x2 y2 x3 y3 x4 y4 class_name difficulty

Ingestion converts the corner polygon to its axis-aligned envelope (the loss
is horizontal-box only); writing emits the stored polygon when present, else
the box corners.

Checkpoints are a single little-endian binary file: magic, format version,
a JSON metadata blob, then a named tensor table (name, dtype code, shape,
raw float64/int64 data). Round trips are bit-exact.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .boxes import Box, Detection, GroundTruth, Modality, envelope_from_polygon
from .errors import CheckpointVersionError, DataError, ParseError, \
    VocabularyError

Array = np.ndarray

CKPT_MAGIC = b"RDMCKPT\x00"
CKPT_VERSION = 1
_DTYPES = {0: np.float64, 1: np.int64}
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.int64): 1}


# ---------------------------------------------------------------------------
# annotations
# ---------------------------------------------------------------------------

def read_annotations(path, class_names, modality: Modality) -> list[GroundTruth]:
    gts = []
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 10:
            raise ParseError(f"expected 10 fields, got {len(parts)}", lineno)
        try:
            coords = [float(v) for v in parts[:8]]
            difficulty = int(parts[9])
        except ValueError as exc:
            raise ParseError(str(exc), lineno)
        name = parts[8]
        if name not in class_names:
            raise VocabularyError(
                f"line {lineno}: unknown class {name!r}; vocabulary is {class_names}")
        gts.append(GroundTruth(envelope_from_polygon(coords),
                               class_names.index(name), modality,
                               tuple(coords)))
        del difficulty
    return gts


def write_annotations(path, gts: list[GroundTruth], class_names) -> None:
    lines = []
    for gt in gts:
        poly = gt.polygon
        if poly is None:
            x1, y1, x2, y2 = gt.box.corners()
            poly = (x1, y1, x2, y1, x2, y2, x1, y2)
        coords = " ".join(f"{v:g}" for v in poly)
        lines.append(f"{coords} {class_names[gt.class_id]} 0")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def load_image(path) -> Array:
    """PNG (or anything PIL reads) to a [3,H,W] float array in [0,1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(path, img: Array) -> None:
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataError(f"expected a [3,H,W] image, got shape {img.shape}")
    arr = np.clip(img, 0.0, 1.0).transpose(1, 2, 0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8)).save(path)


_PALETTE = ((255, 64, 64), (64, 255, 64), (96, 128, 255), (255, 224, 0),
            (255, 0, 255))


def save_annotated(path, img: Array, dets: list[Detection], class_names) -> None:
    """Write the image with detection rectangles and class/score labels."""
    arr = (np.clip(img, 0.0, 1.0).transpose(1, 2, 0) * 255.0).round()
    im = Image.fromarray(arr.astype(np.uint8))
    draw = ImageDraw.Draw(im)
    for det in dets:
        x1, y1, x2, y2 = det.box.corners()
        color = _PALETTE[det.class_id % len(_PALETTE)]
        draw.rectangle([x1, y1, x2, y2], outline=color)
        draw.text((x1 + 1, max(0.0, y1 - 9)),
                  f"{class_names[det.class_id]} {det.score:.2f}", fill=color)
    im.save(path)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def write_checkpoint(path, tensors: dict[str, Array], meta: dict) -> None:
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            if arr.dtype not in _DTYPE_CODES:
                arr = arr.astype(np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            data = arr.tobytes()
            fh.write(struct.pack("<Q", len(data)))
            fh.write(data)


def read_checkpoint(path) -> tuple[dict[str, Array], dict]:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint file")
    off = 8

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(raw):
            raise CheckpointVersionError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    (version,) = take("<I")
    if version != CKPT_VERSION:
        raise CheckpointVersionError(
            f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = take("<I")
    meta = json.loads(bytes(view[off:off + meta_len]).decode("utf-8"))
    off += meta_len
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = bytes(view[off:off + name_len]).decode("utf-8")
        off += name_len
        code, ndim = take("<BB")
        shape = take(f"<{ndim}I")
        (nbytes,) = take("<Q")
        if off + nbytes > len(raw):
            raise CheckpointVersionError(f"{path}: truncated tensor {name!r}")
        arr = np.frombuffer(view[off:off + nbytes],
                            dtype=_DTYPES[code]).reshape(shape).copy()
        off += nbytes
        tensors[name] = arr
    return tensors, meta
