"""Training-time augmentations on [0, 1] grayscale arrays.

Each transform takes the pixel array of an :class:`~mammo.ingest.ImageTensor` and a
``numpy.random.Generator`` and returns an array of the same shape, still in [0, 1].
Every transform draws its Bernoulli gate (``rng.random() < p``) exactly once per call,
including when ``p`` is 0 or 1, so the random stream advances identically whatever the
probabilities are.

The composite order is flip, AugMix, histogram equalization, erasing.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageOps

from .config import AugmentConfig
from .ingest import to_uint8
from .logging import get_logger

log = get_logger(__name__)

# AugMix magnitudes are expressed on a 0..10 scale.
_PARAMETER_MAX = 10


def _gate(p: float, rng: np.random.Generator) -> bool:
    return bool(rng.random() < p)


def random_horizontal_flip(img: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    if not _gate(p, rng):
        return img
    return np.ascontiguousarray(img[:, ::-1])


# --------------------------------------------------------------------------- #
# AugMix operations
# --------------------------------------------------------------------------- #
def _sample_level(severity: int, rng: np.random.Generator) -> float:
    return float(rng.uniform(0.1, severity))


def _float_parameter(level: float, maxval: float) -> float:
    return level * maxval / _PARAMETER_MAX


def _int_parameter(level: float, maxval: float) -> int:
    return int(level * maxval / _PARAMETER_MAX)


def _signed(value: float, rng: np.random.Generator) -> float:
    return -value if rng.random() < 0.5 else value


def _affine(img: np.ndarray, coeffs: Tuple[float, ...]) -> np.ndarray:
    pil = Image.fromarray(img.astype(np.float32))
    out = pil.transform(pil.size, Image.AFFINE, coeffs, resample=Image.BILINEAR)
    return np.clip(np.asarray(out, dtype=np.float32), 0.0, 1.0)


def _quantized(img: np.ndarray, fn: Callable[[Image.Image], Image.Image]) -> np.ndarray:
    out = fn(Image.fromarray(to_uint8(img)))
    return np.asarray(out, dtype=np.float32) / 255.0


def _shear_x(img, level, rng):
    s = _signed(_float_parameter(level, 0.3), rng)
    return _affine(img, (1, s, 0, 0, 1, 0))


def _shear_y(img, level, rng):
    s = _signed(_float_parameter(level, 0.3), rng)
    return _affine(img, (1, 0, 0, s, 1, 0))


def _translate_x(img, level, rng):
    t = _signed(_int_parameter(level, img.shape[1] / 3), rng)
    return _affine(img, (1, 0, t, 0, 1, 0))


def _translate_y(img, level, rng):
    t = _signed(_int_parameter(level, img.shape[0] / 3), rng)
    return _affine(img, (1, 0, 0, 0, 1, t))


def _rotate(img, level, rng):
    degrees = _signed(_int_parameter(level, 30), rng)
    out = Image.fromarray(img.astype(np.float32)).rotate(degrees, resample=Image.BILINEAR)
    return np.clip(np.asarray(out, dtype=np.float32), 0.0, 1.0)


def _posterize(img, level, rng):
    bits = max(1, 4 - _int_parameter(level, 4))
    return _quantized(img, lambda pil: ImageOps.posterize(pil, bits))


def _autocontrast(img, level, rng):
    return _quantized(img, ImageOps.autocontrast)


def _equalize(img, level, rng):
    return _quantized(img, ImageOps.equalize)


def _identity(img, level, rng):
    return img


AUGMIX_OPERATIONS: Dict[str, Callable[[np.ndarray, float, np.random.Generator], np.ndarray]] = {
    "shear_x": _shear_x,
    "shear_y": _shear_y,
    "translate_x": _translate_x,
    "translate_y": _translate_y,
    "rotate": _rotate,
    "posterize": _posterize,
    "autocontrast": _autocontrast,
    "equalize": _equalize,
    "identity": _identity,
}


def augmix_chain(img: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """One chain: depth ~ U{depth_range}, each step a random op at a random level."""
    lo, hi = config.augmix_depth_range
    depth = int(rng.integers(lo, hi + 1))
    out = img
    for _ in range(depth):
        name = config.augmix_ops[int(rng.integers(len(config.augmix_ops)))]
        out = AUGMIX_OPERATIONS[name](out, _sample_level(config.augmix_severity, rng), rng)
    return out


def augmix(img: np.ndarray, config: AugmentConfig, rng: np.random.Generator, *,
           weights: Optional[Sequence[float]] = None, mix: Optional[float] = None) -> np.ndarray:
    """AugMix gated by ``config.p_augmix``.

    Draw order after the gate: chain weights ~ Dirichlet(1, ..., 1), blend coefficient
    m ~ Beta(1, 1), then the chains in order. The result is ``m * img + (1 - m) * sum_i
    w_i * chain_i``. ``weights`` / ``mix`` override the drawn values (the draws still
    happen, so the stream is unchanged).
    """
    if not _gate(config.p_augmix, rng):
        return img
    drawn_w = rng.dirichlet([1.0] * config.augmix_width)
    drawn_m = float(rng.beta(1.0, 1.0))
    w = np.asarray(drawn_w if weights is None else weights, dtype=np.float64)
    m = drawn_m if mix is None else float(mix)
    if w.shape != (config.augmix_width,):
        raise ValueError(f"expected {config.augmix_width} chain weights, got {w.shape}")

    mixed = np.zeros(img.shape, dtype=np.float64)
    for weight in w:
        mixed += weight * augmix_chain(img, config, rng)
    out = m * img.astype(np.float64) + (1.0 - m) * mixed
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------- #
# Histogram equalization and erasing
# --------------------------------------------------------------------------- #
def equalize_histogram(img: np.ndarray) -> np.ndarray:
    """256-bin equalization: level ``v`` maps to ``round(255 * cdf(v) / N) / 255``.

    A histogram with a single occupied level is returned unchanged.
    """
    q = to_uint8(img)
    hist = np.bincount(q.ravel(), minlength=256)
    if np.count_nonzero(hist) <= 1:
        return img
    cdf = np.cumsum(hist)
    lut = np.floor(255.0 * cdf / q.size + 0.5) / 255.0
    return lut[q].astype(np.float32)


def random_hist_equalization(img: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    if not _gate(p, rng):
        return img
    return equalize_histogram(img)


def _erase_box(rows: int, cols: int, config: AugmentConfig,
               rng: np.random.Generator) -> Tuple[int, int, int, int]:
    area = rows * cols
    lo, hi = config.erase_area_range
    lo_px, hi_px = lo * area, hi * area
    frac = rng.uniform(lo, hi)
    log_a0, log_a1 = (math.log(a) for a in config.erase_aspect_range)
    ratio = math.exp(rng.uniform(log_a0, log_a1))
    target = frac * area

    h = int(np.clip(round(math.sqrt(target * ratio)), 1, rows))
    w = int(np.clip(round(target / h), 1, cols))
    # Rounding can leave the rectangle just outside the area range; pull it back in.
    if h * w < lo_px:
        w = min(cols, math.ceil(lo_px / h))
        if h * w < lo_px:
            h = min(rows, math.ceil(lo_px / w))
    if h * w > hi_px:
        w = max(1, math.floor(hi_px / h))
        if h * w > hi_px:
            h = max(1, math.floor(hi_px / w))

    top = int(rng.integers(0, rows - h + 1))
    left = int(rng.integers(0, cols - w + 1))
    return top, left, h, w


def random_erasing(img: np.ndarray, p: float, config: AugmentConfig, rng: np.random.Generator,
                   *, box: Optional[Tuple[int, int, int, int]] = None) -> np.ndarray:
    """Fill a rectangle ``(top, left, height, width)`` with ``config.erase_value``.

    The rectangle's area fraction lies in ``erase_area_range`` and its aspect is drawn
    log-uniformly from ``erase_aspect_range``; ``box`` forces the geometry.
    """
    if not _gate(p, rng):
        return img
    rows, cols = img.shape
    top, left, h, w = box if box is not None else _erase_box(rows, cols, config, rng)
    out = img.copy()
    out[top:top + h, left:left + w] = config.erase_value
    return out


class TrainTransform:
    """Flip, AugMix, histogram equalization and erasing over one seeded stream."""

    def __init__(self, config: AugmentConfig):
        self.config = config
        self.rng = np.random.default_rng(config.rng_seed)

    def reseed(self, epoch: int = 0, worker_id: int = 0) -> None:
        """Independent stream per (epoch, data-loader worker)."""
        seq = np.random.SeedSequence([self.config.rng_seed, epoch, worker_id])
        self.rng = np.random.default_rng(seq)

    def __call__(self, img: np.ndarray) -> np.ndarray:
        c, rng = self.config, self.rng
        img = random_horizontal_flip(img, c.p_hflip, rng)
        img = augmix(img, c, rng)
        img = random_hist_equalization(img, c.p_histeq, rng)
        img = random_erasing(img, c.p_erase, c, rng)
        return img


def compose_train_transforms(config: AugmentConfig) -> TrainTransform:
    return TrainTransform(config)
