"""Training augmentations: gating, AugMix mixing, equalization and erasing geometry."""

from __future__ import annotations

import numpy as np
import pytest

from mammo.augment import (AUGMIX_OPERATIONS, _erase_box, augmix, augmix_chain,
                           compose_train_transforms, equalize_histogram,
                           random_erasing, random_hist_equalization,
                           random_horizontal_flip)
from mammo.config import AUGMIX_OPS, AugmentConfig
from mammo.errors import ConfigInvalid


def _image(rows=64, cols=32, seed=0):
    return np.random.default_rng(seed).random((rows, cols)).astype(np.float32)


def test_flip_forced_and_disabled():
    rng = np.random.default_rng(0)
    img = np.array([[0.0, 1.0]], np.float32)
    assert random_horizontal_flip(img, 1.0, rng).tolist() == [[1.0, 0.0]]
    assert random_horizontal_flip(img, 0.0, rng) is img


def test_flip_frequency():
    rng = np.random.default_rng(1)
    img = np.array([[0.0, 1.0]], np.float32)
    flips = sum(random_horizontal_flip(img, 0.5, rng)[0, 0] == 1.0 for _ in range(10_000))
    assert abs(flips / 10_000 - 0.5) <= 0.02


def test_every_op_keeps_shape_and_range():
    img = _image()
    rng = np.random.default_rng(2)
    for name, op in AUGMIX_OPERATIONS.items():
        out = op(img, 3.0, rng)
        assert out.shape == img.shape, name
        assert out.min() >= 0.0 and out.max() <= 1.0, name


def test_augmix_gate_closed_is_identity():
    img = _image()
    config = AugmentConfig(p_augmix=0.0)
    assert augmix(img, config, np.random.default_rng(0)) is img


def test_augmix_with_identity_ops_returns_input():
    img = _image()
    config = AugmentConfig(p_augmix=1.0, augmix_ops=("identity",))
    out = augmix(img, config, np.random.default_rng(3))
    assert np.allclose(out, img, atol=1e-6)


def test_augmix_degenerate_weights_give_first_chain():
    img = _image()
    config = AugmentConfig(p_augmix=1.0)
    out = augmix(img, config, np.random.default_rng(4), weights=(1.0, 0.0, 0.0), mix=0.0)

    # replay the same stream: gate, Dirichlet, Beta, then the first chain
    rng = np.random.default_rng(4)
    rng.random()
    rng.dirichlet([1.0] * 3)
    rng.beta(1.0, 1.0)
    first = augmix_chain(img, config, rng)
    assert np.allclose(out, np.clip(first, 0, 1), atol=1e-6)


def test_augmix_output_in_range():
    config = AugmentConfig(p_augmix=1.0)
    rng = np.random.default_rng(5)
    for seed in range(20):
        out = augmix(_image(seed=seed), config, rng)
        assert out.shape == (64, 32)
        assert 0.0 <= out.min() and out.max() <= 1.0


def test_equalize_two_levels():
    img = np.full((4, 4), 0.25, np.float32)
    img[2:] = 0.75
    out = equalize_histogram(img)
    assert np.allclose(out[:2], 128 / 255) and np.allclose(out[2:], 1.0)


def test_equalize_constant_image_is_unchanged():
    img = np.full((5, 5), 0.4, np.float32)
    assert np.array_equal(equalize_histogram(img), img)


def test_hist_equalization_gate():
    img = _image()
    assert random_hist_equalization(img, 0.0, np.random.default_rng(0)) is img


def test_forced_erase_box():
    img = np.ones((32, 32), np.float32)
    out = random_erasing(img, 1.0, AugmentConfig(), np.random.default_rng(0), box=(0, 0, 10, 10))
    assert int((out == 0).sum()) == 100
    assert np.all(out[:10, :10] == 0) and img.min() == 1.0


def test_erase_area_stays_in_range():
    config = AugmentConfig()
    rng = np.random.default_rng(6)
    rows, cols = 64, 32
    lo, hi = config.erase_area_range[0] * rows * cols, config.erase_area_range[1] * rows * cols
    for _ in range(10_000):
        top, left, h, w = _erase_box(rows, cols, config, rng)
        assert lo <= h * w <= hi
        assert 0 <= top and top + h <= rows
        assert 0 <= left and left + w <= cols


def test_all_probabilities_zero_is_bit_exact_identity():
    transform = compose_train_transforms(AugmentConfig.disabled())
    for seed in range(5):
        img = _image(seed=seed)
        assert np.array_equal(transform(img), img)


def test_transform_is_seed_deterministic():
    config = AugmentConfig(p_hflip=0.5, p_augmix=0.5, p_histeq=0.5, p_erase=0.5, rng_seed=9)
    a, b = compose_train_transforms(config), compose_train_transforms(config)
    for seed in range(10):
        img = _image(seed=seed)
        assert np.array_equal(a(img), b(img))


def test_reseed_gives_independent_worker_streams():
    config = AugmentConfig(p_hflip=0.5, p_erase=1.0, rng_seed=1)
    a, b = compose_train_transforms(config), compose_train_transforms(config)
    a.reseed(epoch=0, worker_id=0)
    b.reseed(epoch=0, worker_id=1)
    img = _image()
    outs_a = [a(img) for _ in range(5)]
    outs_b = [b(img) for _ in range(5)]
    assert any(not np.array_equal(x, y) for x, y in zip(outs_a, outs_b))

    c = compose_train_transforms(config)
    c.reseed(epoch=0, worker_id=0)
    assert all(np.array_equal(x, c(img)) for x in outs_a)


def test_transform_frequencies_match_probabilities():
    n = 10_000
    img = np.zeros((4, 8), np.float32)
    img[:, 0] = 1.0
    flip = compose_train_transforms(AugmentConfig.disabled(p_hflip=0.5, rng_seed=3))
    flips = sum(flip(img)[0, -1] == 1.0 for _ in range(n))

    ones = np.ones((16, 16), np.float32)
    erase = compose_train_transforms(AugmentConfig.disabled(p_erase=0.1, rng_seed=4))
    erases = sum(erase(ones).min() == 0.0 for _ in range(n))
    # 3-sigma binomial bounds
    assert abs(flips / n - 0.5) <= 3 * np.sqrt(0.25 / n)
    assert abs(erases / n - 0.1) <= 3 * np.sqrt(0.09 / n)


def test_config_rejects_bad_values():
    with pytest.raises(ConfigInvalid):
        AugmentConfig(p_hflip=1.5)
    with pytest.raises(ConfigInvalid):
        AugmentConfig(erase_area_range=(0.5, 0.1))
    with pytest.raises(ConfigInvalid):
        AugmentConfig(augmix_ops=("solarize",))
    assert set(AUGMIX_OPS) <= set(AUGMIX_OPERATIONS)
