import numpy as np
import pytest

from remotedet.boxes import Modality
from remotedet.data import (CLASS_NAMES, DatasetSpec, generate_dataset,
                            worker_count)
from remotedet.errors import DataError


def test_deterministic_regeneration():
    a = generate_dataset(6, seed=42)
    b = generate_dataset(6, seed=42)
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.rgb, sb.rgb)
        assert np.array_equal(sa.tir, sb.tir)
        assert sa.rgb_gts == sb.rgb_gts
        assert sa.tir_gts == sb.tir_gts


def test_different_seed_differs():
    a = generate_dataset(2, seed=1)
    b = generate_dataset(2, seed=2)
    assert not np.array_equal(a[0].rgb, b[0].rgb)


def test_zero_exclusivity_balanced_gts():
    data = generate_dataset(12, seed=3, spec=DatasetSpec(exclusive_fraction=0.0))
    for s in data:
        assert len(s.rgb_gts) == len(s.tir_gts)
        assert len(s.rgb_gts) >= 1


def test_exclusive_fraction_concentrates():
    data = generate_dataset(1000, seed=4, spec=DatasetSpec(exclusive_fraction=0.5))
    single = total = 0
    for s in data:
        # shared objects appear in both lists and collapse to one fused box,
        # so fused count = object count and the shared count falls out
        n_fused = len(s.gts("fusion"))
        n_shared = len(s.rgb_gts) + len(s.tir_gts) - n_fused
        total += n_fused
        single += n_fused - n_shared
    frac = single / total
    assert abs(frac - 0.5) < 0.05


def test_images_in_unit_range_and_shape():
    for s in generate_dataset(4, seed=5):
        for img in (s.rgb, s.tir):
            assert img.shape == (3, 64, 64)
            assert img.min() >= 0.0 and img.max() <= 1.0


def test_boxes_inside_image():
    for s in generate_dataset(8, seed=6):
        for gt in s.rgb_gts + s.tir_gts:
            x1, y1, x2, y2 = gt.box.corners()
            assert 0 <= x1 < x2 <= 64
            assert 0 <= y1 < y2 <= 64
            assert 0 <= gt.class_id < len(CLASS_NAMES)


def test_modality_tags():
    s = generate_dataset(1, seed=7)[0]
    assert all(g.modality is Modality.RGB for g in s.rgb_gts)
    assert all(g.modality is Modality.TIR for g in s.tir_gts)


def test_object_visible_in_its_modality():
    # rendered rectangles must be brighter/darker than background enough to learn
    s = generate_dataset(1, seed=8, spec=DatasetSpec(exclusive_fraction=0.0))[0]
    for gt in s.tir_gts:
        x1, y1, x2, y2 = (int(v) for v in gt.box.corners())
        inside = s.tir[0, y1:y2, x1:x2].mean()
        assert inside > 0.45  # object heat well above the ~0.3 background


def test_worker_count_env(monkeypatch):
    monkeypatch.delenv("REMOTEDET_THREADS", raising=False)
    assert worker_count() == 1
    monkeypatch.setenv("REMOTEDET_THREADS", "4")
    assert worker_count() == 4
    monkeypatch.setenv("REMOTEDET_THREADS", "zero")
    with pytest.raises(DataError):
        worker_count()


def test_threaded_generation_identical(monkeypatch):
    monkeypatch.delenv("REMOTEDET_THREADS", raising=False)
    serial = generate_dataset(8, seed=9)
    monkeypatch.setenv("REMOTEDET_THREADS", "4")
    threaded = generate_dataset(8, seed=9)
    for a, b in zip(serial, threaded):
        assert np.array_equal(a.rgb, b.rgb)
        assert a.tir_gts == b.tir_gts


def test_invalid_sizes_rejected():
    with pytest.raises(DataError):
        generate_dataset(0, seed=0)
    with pytest.raises(DataError):
        DatasetSpec(exclusive_fraction=1.5)
