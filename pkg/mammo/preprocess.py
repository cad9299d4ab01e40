"""Crop the background away from each windowed mammogram and resize to training size."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .config import PreprocessConfig
from .const import DEFAULT_CROP_THRESHOLD, TARGET_COLS, TARGET_ROWS, ImageFormat
from .errors import EmptyManifest, MammoError
from .ingest import ImageTensor, export_image, load_image
from .logging import get_logger
from .manifest import DatasetManifest, MammogramRecord, write_manifest
from .util import PathLike, sanitize_filename

log = get_logger(__name__)

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class CropBox:
    """Inclusive pixel bounds of the kept region."""

    row_min: int
    row_max: int
    col_min: int
    col_max: int

    def __post_init__(self):
        if self.row_min > self.row_max or self.col_min > self.col_max:
            raise ValueError(f"empty crop box {self}")

    @classmethod
    def full(cls, rows: int, cols: int) -> "CropBox":
        return cls(0, rows - 1, 0, cols - 1)

    @property
    def rows(self) -> int:
        return self.row_max - self.row_min + 1

    @property
    def cols(self) -> int:
        return self.col_max - self.col_min + 1

    @property
    def aspect_ratio(self) -> float:
        return self.rows / self.cols


def find_breast_box(pixels: np.ndarray, threshold: float = DEFAULT_CROP_THRESHOLD) -> CropBox:
    """Bounding box of the largest 8-connected region brighter than ``threshold``.

    Returns the full frame when nothing is brighter than the threshold. Ties between
    equally large regions go to the one reached first in row-major order.
    """
    rows, cols = pixels.shape
    labels, count = ndimage.label(pixels > threshold, structure=_EIGHT_CONNECTED)
    if count == 0:
        return CropBox.full(rows, cols)
    sizes = np.bincount(labels.ravel())[1:]
    largest = int(np.argmax(sizes)) + 1
    r_idx, c_idx = np.nonzero(labels == largest)
    return CropBox(int(r_idx.min()), int(r_idx.max()), int(c_idx.min()), int(c_idx.max()))


def crop_breast_region(img: ImageTensor, threshold: float = DEFAULT_CROP_THRESHOLD):
    """Return ``(cropped image, CropBox)``; degenerate inputs come back unchanged."""
    box = find_breast_box(img.pixels, threshold)
    cropped = img.pixels[box.row_min:box.row_max + 1, box.col_min:box.col_max + 1]
    return ImageTensor(np.ascontiguousarray(cropped)), box


def resize(img: ImageTensor, target_rows: int = TARGET_ROWS,
           target_cols: int = TARGET_COLS) -> ImageTensor:
    """Bilinear resample to exactly ``(target_rows, target_cols)``.

    Aspect ratio is not preserved: the target is already the dataset's mean aspect.
    """
    if img.shape == (target_rows, target_cols):
        return ImageTensor(img.pixels.astype(np.float32, copy=True))
    pil = Image.fromarray(img.pixels.astype(np.float32))
    out = np.asarray(pil.resize((target_cols, target_rows), Image.BILINEAR), dtype=np.float32)
    return ImageTensor(np.clip(out, 0.0, 1.0))


def mean_aspect_ratio(boxes: Iterable[CropBox]) -> float:
    ratios = [b.aspect_ratio for b in boxes]
    if not ratios:
        raise EmptyManifest("no crop boxes to average")
    return float(np.mean(ratios))


def compute_mean_aspect_ratio(manifest: DatasetManifest,
                              threshold: float = DEFAULT_CROP_THRESHOLD) -> float:
    """Mean of (cropped rows / cropped cols) over every readable image in ``manifest``."""
    boxes = []
    for record in manifest:
        try:
            boxes.append(find_breast_box(load_image(record.image_path).pixels, threshold))
        except MammoError as exc:
            log.warning("Aspect ratio: skipping %s: %s", record.image_id, exc)
    if not boxes:
        raise EmptyManifest("no readable image in manifest")
    return mean_aspect_ratio(boxes)


def preprocess_image(img: ImageTensor, config: PreprocessConfig,
                     rows: Optional[int] = None) -> ImageTensor:
    cropped, _ = crop_breast_region(img, config.threshold)
    return resize(cropped, rows or config.rows, config.cols)


def preprocess_dataset(manifest: DatasetManifest, config: PreprocessConfig,
                       out_dir: PathLike) -> DatasetManifest:
    """Crop + resize every record into ``out_dir/images`` and write ``out_dir/manifest.csv``.

    A record that fails is logged and dropped; the batch continues.
    """
    out_dir = Path(out_dir)
    rows = config.rows
    if config.derive_rows_from_aspect:
        ratio = compute_mean_aspect_ratio(manifest, config.threshold)
        rows = int(round(config.cols * ratio))
        log.info("Mean cropped aspect ratio %.4f -> target %dx%d", ratio, rows, config.cols)

    def _one(record: MammogramRecord) -> Optional[MammogramRecord]:
        target = out_dir / "images" / f"{sanitize_filename(record.image_id)}.png"
        try:
            out = preprocess_image(load_image(record.image_path), config, rows)
            export_image(out, target, ImageFormat.PNG)
        except MammoError as exc:
            log.warning("[SKIP] %s: %s", record.image_id, exc)
            return None
        return record.with_path(target)

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        done = [r for r in pool.map(_one, manifest.records) if r is not None]
    if not done:
        raise EmptyManifest("no record survived preprocessing")
    result = manifest.with_records(done)
    write_manifest(result, out_dir / "manifest.csv")
    log.info("Preprocessed %d/%d images to %dx%d", len(done), len(manifest), rows, config.cols)
    return result
