"""Breast crop, bilinear resize, aspect-ratio bookkeeping and the batch stage."""

from __future__ import annotations

import numpy as np
import pytest

from mammo.config import IngestConfig, PreprocessConfig
from mammo.errors import EmptyManifest
from mammo.ingest import ImageTensor, ingest_dataset, load_image
from mammo.preprocess import (CropBox, compute_mean_aspect_ratio, crop_breast_region,
                              find_breast_box, mean_aspect_ratio, preprocess_dataset,
                              preprocess_image, resize)


def _canvas(rows=40, cols=30):
    return np.zeros((rows, cols), dtype=np.float32)


def test_crop_keeps_largest_region():
    px = _canvas()
    px[5:25, 0:12] = 0.7        # breast
    px[30:33, 25:28] = 1.0      # label marker, smaller
    cropped, box = crop_breast_region(ImageTensor(px))
    assert box == CropBox(5, 24, 0, 11)
    assert cropped.shape == (20, 12)
    assert np.all(cropped.pixels == np.float32(0.7))


def test_crop_is_eight_connected():
    px = _canvas(10, 10)
    px[2, 2] = px[3, 3] = px[4, 4] = 0.5  # diagonal chain
    px[8, 0] = 0.5
    assert find_breast_box(px) == CropBox(2, 4, 2, 4)


def test_crop_tie_goes_to_first_region_in_row_major_order():
    px = _canvas(10, 10)
    px[6:8, 6:8] = 0.5
    px[1:3, 1:3] = 0.5
    assert find_breast_box(px) == CropBox(1, 2, 1, 2)


def test_crop_of_empty_image_is_identity():
    px = _canvas(7, 5)
    cropped, box = crop_breast_region(ImageTensor(px))
    assert box == CropBox.full(7, 5)
    assert cropped.shape == (7, 5)


@pytest.mark.parametrize("seed", range(25))
def test_crop_is_idempotent(seed):
    rng = np.random.default_rng(seed)
    px = np.where(rng.random((30, 20)) < 0.35, rng.random((30, 20)), 0.0).astype(np.float32)
    once, _ = crop_breast_region(ImageTensor(px), threshold=0.2)
    twice, box = crop_breast_region(once, threshold=0.2)
    assert box == CropBox.full(*once.shape)
    assert np.array_equal(twice.pixels, once.pixels)


def test_threshold_is_exclusive():
    px = _canvas(6, 6)
    px[1:3, 1:3] = 0.1
    px[4, 4] = 0.05
    assert find_breast_box(px, threshold=0.05) == CropBox(1, 2, 1, 2)


def test_resize_hits_exact_target():
    img = ImageTensor(np.linspace(0, 1, 37 * 23, dtype=np.float32).reshape(37, 23))
    out = resize(img, 64, 32)
    assert out.shape == (64, 32)
    assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0


def test_resize_interpolates_columns_linearly():
    out = resize(ImageTensor(np.array([[0.0, 1.0], [0.0, 1.0]], np.float32)), 2, 4)
    assert out.shape == (2, 4)
    for row in out.pixels:
        assert np.allclose(row, [0.0, 0.25, 0.75, 1.0], atol=1e-6)


def test_resize_of_constant_image_is_constant():
    out = resize(ImageTensor(np.full((10, 7), 0.25, np.float32)), 33, 19)
    assert np.allclose(out.pixels, 0.25, atol=1e-5)


def test_resize_same_shape_is_a_copy():
    px = np.random.default_rng(0).random((8, 4)).astype(np.float32)
    out = resize(ImageTensor(px), 8, 4)
    assert np.array_equal(out.pixels, px)
    assert out.pixels is not px


def test_preprocess_image_crops_then_resizes():
    px = _canvas(50, 40)
    px[10:30, 0:10] = 0.6
    out = preprocess_image(ImageTensor(px), PreprocessConfig(rows=16, cols=8))
    assert out.shape == (16, 8)
    # the crop removed all background
    assert np.allclose(out.pixels, 0.6, atol=1e-5)


def test_mean_aspect_ratio():
    assert mean_aspect_ratio([CropBox(0, 9, 0, 4), CropBox(0, 3, 0, 3)]) == pytest.approx(1.5)
    with pytest.raises(EmptyManifest):
        mean_aspect_ratio([])


def test_preprocess_dataset(tmp_path, dicom_cohort):
    clinical, root = dicom_cohort
    ingested = ingest_dataset(clinical, root, tmp_path / "ingest", IngestConfig(workers=1))
    ratio = compute_mean_aspect_ratio(ingested)
    assert ratio > 1.0  # the phantom is taller than wide

    config = PreprocessConfig(rows=40, cols=16, workers=2)
    out = preprocess_dataset(ingested, config, tmp_path / "pre")
    assert [r.image_id for r in out] == [r.image_id for r in ingested]
    assert (tmp_path / "pre" / "manifest.csv").exists()
    for record in out.records[:4]:
        assert load_image(record.image_path).shape == (40, 16)


def test_preprocess_dataset_derives_rows_from_aspect(tmp_path, dicom_cohort):
    clinical, root = dicom_cohort
    ingested = ingest_dataset(clinical, root, tmp_path / "ingest", IngestConfig(workers=1))
    expected_rows = int(round(16 * compute_mean_aspect_ratio(ingested)))
    out = preprocess_dataset(ingested, PreprocessConfig(cols=16, derive_rows_from_aspect=True,
                                                        workers=1), tmp_path / "pre")
    assert load_image(out.records[0].image_path).shape == (expected_rows, 16)


def test_preprocess_dataset_skips_missing_files(tmp_path, record_factory, png_cohort):
    manifest = png_cohort([record_factory("a", "P1"), record_factory("b", "P2")])
    broken = manifest.with_records([manifest.records[0],
                                    manifest.records[1].with_path(tmp_path / "gone.png")])
    out = preprocess_dataset(broken, PreprocessConfig(rows=8, cols=4, workers=1), tmp_path / "o")
    assert [r.image_id for r in out] == ["a"]
