"""DICOM decoding, window-level scaling, clinical-table join and standardized export.

Flow for one image::

    parse_dicom(path) -> RawImage -> apply_window -> ImageTensor -> export_image(png)

:func:`build_manifest` joins the clinical spreadsheet (one row per patient breast) to the
DICOM files found under the image root using the patient id and laterality stored in
each file header; :func:`ingest_dataset` runs the whole thing over a directory tree.
"""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import pydicom
from pydicom.multival import MultiValue
from PIL import Image

from .config import IngestConfig
from .const import ImageFormat, Laterality, Pathology, Subtype, View
from .errors import (EmptyJoin, IoFailure, MammoError, MissingPixelData, NonPositiveWidth,
                     SchemaMismatch, UnreadableFile)
from .logging import get_logger
from .manifest import DatasetManifest, MammogramRecord, write_manifest
from .util import PathLike, sanitize_filename, sha256_file

log = get_logger(__name__)


@dataclass(frozen=True)
class WindowSpec:
    window_center: float
    window_width: float

    @property
    def lower(self) -> float:
        return self.window_center - self.window_width / 2


@dataclass(frozen=True, eq=False)
class RawImage:
    """Stored pixel values plus everything needed to map them to display intensities."""

    pixels: np.ndarray
    window: WindowSpec
    rescale_slope: float = 1.0
    rescale_intercept: float = 0.0
    invert: bool = False  # MONOCHROME1: low values are bright

    def __post_init__(self):
        if self.pixels.ndim != 2 or min(self.pixels.shape) < 1:
            raise MissingPixelData(f"expected a non-empty 2-D pixel array, got {self.pixels.shape}")

    @property
    def rows(self) -> int:
        return self.pixels.shape[0]

    @property
    def cols(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """Normalized working image: a finite 2-D float array with every value in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 2 or min(px.shape) < 1:
            raise ValueError(f"ImageTensor must be a non-empty 2-D array, got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("ImageTensor values must be finite and within [0, 1]")

    @property
    def rows(self) -> int:
        return self.pixels.shape[0]

    @property
    def cols(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape


# --------------------------------------------------------------------------- #
# DICOM decode and windowing
# --------------------------------------------------------------------------- #
def _first(value) -> float:
    """Window tags may be multi-valued; the first pair is the primary presentation."""
    if isinstance(value, (MultiValue, list, tuple)):
        value = value[0]
    return float(value)


def parse_dicom(path: PathLike) -> RawImage:
    """Read one single-frame grayscale DICOM file.

    Missing WindowCenter/WindowWidth fall back to the full stored range:
    center ``2**(bits-1)``, width ``2**bits``.
    """
    try:
        ds = pydicom.dcmread(str(path))
    except FileNotFoundError as exc:
        raise UnreadableFile(f"{path}: file not found") from exc
    except Exception as exc:
        raise UnreadableFile(f"{path}: not a readable DICOM file ({exc})") from exc
    if "PixelData" not in ds:
        raise MissingPixelData(f"{path}: no pixel data element")
    try:
        pixels = ds.pixel_array
    except Exception as exc:
        raise UnreadableFile(f"{path}: cannot decode pixel data ({exc})") from exc
    if pixels.ndim != 2:
        raise UnreadableFile(f"{path}: only single-frame grayscale images are supported, "
                             f"got pixel array of shape {pixels.shape}")

    bits = int(ds.get("BitsStored", ds.get("BitsAllocated", 16)))
    center = ds.get("WindowCenter")
    width = ds.get("WindowWidth")
    if center is None or width is None:
        window = WindowSpec(float(2 ** (bits - 1)), float(2 ** bits))
        log.debug("%s: no window tags, using full %d-bit range", path, bits)
    else:
        window = WindowSpec(_first(center), _first(width))
    return RawImage(
        pixels=pixels,
        window=window,
        rescale_slope=float(ds.get("RescaleSlope", 1.0)),
        rescale_intercept=float(ds.get("RescaleIntercept", 0.0)),
        invert=str(ds.get("PhotometricInterpretation", "MONOCHROME2")) == "MONOCHROME1",
    )


def apply_window(raw: RawImage) -> ImageTensor:
    """Linear VOI mapping: ``clamp((p - (center - width/2)) / width, 0, 1)``."""
    width = raw.window.window_width
    if not width > 0:
        raise NonPositiveWidth(f"window width must be > 0, got {width}")
    values = raw.pixels.astype(np.float64)
    if raw.rescale_slope != 1.0 or raw.rescale_intercept != 0.0:
        values = values * raw.rescale_slope + raw.rescale_intercept
    out = np.clip((values - raw.window.lower) / width, 0.0, 1.0)
    if raw.invert:
        out = 1.0 - out
    return ImageTensor(out.astype(np.float32))


# --------------------------------------------------------------------------- #
# 8-bit export / decode
# --------------------------------------------------------------------------- #
def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] values to 8 bits, rounding half up (0.5 -> 128)."""
    return np.floor(np.asarray(pixels, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


def export_image(img: ImageTensor, path: PathLike, format: ImageFormat = ImageFormat.PNG,
                 jpeg_quality: int = 95) -> Path:
    """Write ``img`` as an 8-bit grayscale PNG (lossless) or JPEG."""
    path = Path(path)
    fmt = ImageFormat(format)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        pil = Image.fromarray(to_uint8(img.pixels))
        if fmt is ImageFormat.JPEG:
            pil.save(path, format="JPEG", quality=jpeg_quality)
        else:
            pil.save(path, format="PNG")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path


def load_image(path: PathLike) -> ImageTensor:
    """Decode an exported 8-bit image back to a [0, 1] :class:`ImageTensor`."""
    try:
        with Image.open(path) as pil:
            arr = np.asarray(pil.convert("L"), dtype=np.float32)
    except OSError as exc:
        raise IoFailure(f"cannot read image {path}: {exc}") from exc
    return ImageTensor(arr / np.float32(255.0))


# --------------------------------------------------------------------------- #
# Clinical table join
# --------------------------------------------------------------------------- #
# Canonical column -> accepted spellings (case-insensitive). The CMMD spreadsheet uses
# ID1 / LeftRight / classification; the rest match directly.
CLINICAL_COLUMNS: Dict[str, Tuple[str, ...]] = {
    "patient_id": ("patient_id", "id1", "patientid", "id"),
    "laterality": ("laterality", "leftright"),
    "age": ("age",),
    "abnormality": ("abnormality",),
    "pathology": ("pathology", "classification"),
    "subtype": ("subtype",),
}

_LATERALITY = {"l": Laterality.LEFT, "left": Laterality.LEFT,
               "r": Laterality.RIGHT, "right": Laterality.RIGHT}
_SUBTYPES = {
    "luminala": Subtype.LUMINAL_A,
    "luminalb": Subtype.LUMINAL_B,
    "her2": Subtype.HER2,
    "her2enriched": Subtype.HER2,
    "triplenegative": Subtype.TRIPLE_NEGATIVE,
    "tn": Subtype.TRIPLE_NEGATIVE,
}
_ABNORMALITY = {"calcification": (True, False), "mass": (False, True), "both": (True, True)}


@dataclass
class ClinicalRow:
    patient_id: str
    laterality: Laterality
    age: Optional[int]
    has_calcification: bool
    has_mass: bool
    pathology: Pathology
    subtype: Subtype


@dataclass
class ImageHeader:
    path: Path
    image_id: str
    patient_id: str
    laterality: Optional[Laterality]
    view: Optional[View]


@dataclass
class JoinReport:
    """What the clinical join could not place."""

    unmatched_images: List[str] = field(default_factory=list)
    unmatched_rows: List[Tuple[str, str]] = field(default_factory=list)
    conflicts: List[str] = field(default_factory=list)
    unreadable: List[str] = field(default_factory=list)


def _norm(text) -> str:
    return re.sub(r"[^a-z0-9]", "", str(text).strip().lower())


def _is_missing(value) -> bool:
    return value is None or (isinstance(value, float) and np.isnan(value)) or str(value).strip() == ""


def read_clinical_table(path: PathLike) -> pd.DataFrame:
    """Load the clinical spreadsheet (xlsx/xls/csv) with canonical column names."""
    path = Path(path)
    try:
        if path.suffix.lower() in (".xlsx", ".xls"):
            frame = pd.read_excel(path, dtype=str)
        else:
            frame = pd.read_csv(path, dtype=str)
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot read clinical table {path}: {exc}") from exc
    lookup = {_norm(c): c for c in frame.columns}
    rename = {}
    for canonical, aliases in CLINICAL_COLUMNS.items():
        found = next((lookup[_norm(a)] for a in aliases if _norm(a) in lookup), None)
        if found is None:
            raise SchemaMismatch(f"{path}: missing required column '{canonical}' "
                                 f"(accepted: {', '.join(aliases)})")
        rename[found] = canonical
    return frame.rename(columns=rename)[list(CLINICAL_COLUMNS)]


def _parse_clinical_row(row: Dict) -> ClinicalRow:
    laterality = _LATERALITY.get(str(row["laterality"]).strip().lower())
    if laterality is None:
        raise SchemaMismatch(f"unknown laterality {row['laterality']!r}")
    finding = _ABNORMALITY.get(_norm(row["abnormality"]))
    if finding is None:
        raise SchemaMismatch(f"unknown abnormality {row['abnormality']!r}")
    try:
        pathology = Pathology(str(row["pathology"]).strip().capitalize())
    except ValueError as exc:
        raise SchemaMismatch(f"unknown pathology {row['pathology']!r}") from exc
    if _is_missing(row["subtype"]):
        subtype = Subtype.UNLABELED
    else:
        subtype = _SUBTYPES.get(_norm(row["subtype"]))
        if subtype is None:
            raise SchemaMismatch(f"unknown subtype {row['subtype']!r}")
    age = None if _is_missing(row["age"]) else int(float(row["age"]))
    return ClinicalRow(str(row["patient_id"]).strip(), laterality, age,
                       finding[0], finding[1], pathology, subtype)


def _view_from_header(ds, path: Path) -> Optional[View]:
    position = str(ds.get("ViewPosition", "")).strip().upper()
    if position in ("CC", "MLO"):
        return View(position)
    seq = ds.get("ViewCodeSequence")
    if seq:
        meaning = str(seq[0].get("CodeMeaning", "")).lower()
        if "cranio" in meaning:
            return View.CC
        if "medio" in meaning:
            return View.MLO
    tokens = set(re.split(r"[^A-Z]+", path.stem.upper()))
    if "CC" in tokens:
        return View.CC
    if "MLO" in tokens:
        return View.MLO
    return None


def read_image_header(path: Path, image_root: Path) -> ImageHeader:
    try:
        ds = pydicom.dcmread(str(path), stop_before_pixels=True)
    except Exception as exc:
        raise UnreadableFile(f"{path}: {exc}") from exc
    rel = path.relative_to(image_root)
    patient_id = str(ds.get("PatientID", "")).strip() or rel.parts[0]
    lat_text = str(ds.get("ImageLaterality", "") or ds.get("Laterality", "")).strip().lower()
    image_id = str(ds.get("SOPInstanceUID", "")).strip() or rel.with_suffix("").as_posix().replace("/", "_")
    return ImageHeader(path, image_id, patient_id, _LATERALITY.get(lat_text),
                       _view_from_header(ds, path))


def join_clinical(clinical_table: PathLike, image_root: PathLike,
                  workers: int = 1) -> Tuple[DatasetManifest, JoinReport]:
    """Join clinical rows to DICOM files; return the manifest and what did not match."""
    clinical_table, image_root = Path(clinical_table), Path(image_root)
    frame = read_clinical_table(clinical_table)
    report = JoinReport()

    rows: Dict[Tuple[str, Laterality], ClinicalRow] = {}
    patients = set()
    for raw in frame.to_dict("records"):
        try:
            row = _parse_clinical_row(raw)
        except (SchemaMismatch, ValueError) as exc:
            report.conflicts.append(f"row {raw.get('patient_id')}: {exc}")
            log.warning("Skipping clinical row %s: %s", raw.get("patient_id"), exc)
            continue
        key = (row.patient_id, row.laterality)
        if key in rows:
            report.conflicts.append(f"duplicate clinical row {key[0]}/{key[1].value}")
            log.warning("Duplicate clinical row for %s %s; keeping the first",
                        key[0], key[1].value)
            continue
        rows[key] = row
        patients.add(row.patient_id)

    paths = sorted(p for p in image_root.rglob("*.dcm") if p.is_file()) if image_root.is_dir() else []

    def _header(path):
        try:
            return read_image_header(path, image_root)
        except UnreadableFile as exc:
            log.warning("Unreadable DICOM header: %s", exc)
            report.unreadable.append(str(path))
            return None

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        headers = [h for h in pool.map(_header, paths) if h is not None]

    records: List[MammogramRecord] = []
    used = set()
    for header in headers:
        row = rows.get((header.patient_id, header.laterality)) if header.laterality else None
        if row is None:
            if header.patient_id in patients:
                report.conflicts.append(header.image_id)
                log.warning("Excluding %s: laterality %s has no clinical row for patient %s",
                            header.path.name, header.laterality, header.patient_id)
            else:
                report.unmatched_images.append(header.image_id)
            continue
        if header.view is None:
            report.conflicts.append(header.image_id)
            log.warning("Excluding %s: cannot determine CC/MLO view", header.path)
            continue
        try:
            records.append(MammogramRecord(
                patient_id=row.patient_id, image_id=header.image_id,
                laterality=row.laterality, view=header.view, age=row.age,
                has_calcification=row.has_calcification, has_mass=row.has_mass,
                pathology=row.pathology, subtype=row.subtype, image_path=header.path,
            ))
        except SchemaMismatch as exc:
            report.conflicts.append(header.image_id)
            log.warning("Excluding %s: %s", header.image_id, exc)
            continue
        used.add((row.patient_id, row.laterality))

    report.unmatched_rows = sorted((p, lat.value) for (p, lat) in rows if (p, lat) not in used)
    if not records:
        raise EmptyJoin(f"no DICOM file under {image_root} matched a row of {clinical_table}")
    try:
        manifest = DatasetManifest(
            records=tuple(sorted(records, key=lambda r: r.image_id)),
            source_fingerprint=sha256_file(clinical_table),
        )
    except SchemaMismatch as exc:
        raise SchemaMismatch(f"{image_root}: {exc}") from exc
    return manifest, report


def build_manifest(clinical_table: PathLike, image_root: PathLike,
                   workers: int = 1) -> DatasetManifest:
    """One record per DICOM file matched to a clinical row; unmatched items are logged."""
    manifest, report = join_clinical(clinical_table, image_root, workers=workers)
    if report.unmatched_images:
        log.warning("%d image(s) had no clinical row", len(report.unmatched_images))
    if report.unmatched_rows:
        log.warning("%d clinical row(s) had no image", len(report.unmatched_rows))
    if report.conflicts:
        log.warning("%d item(s) excluded for conflicting labels", len(report.conflicts))
    log.info("Manifest: %d records, %d patients, %d subtype-labeled",
             len(manifest), len(manifest.patients()), len(manifest.subtype_labeled()))
    return manifest


# --------------------------------------------------------------------------- #
# Batch
# --------------------------------------------------------------------------- #
def standardize_record(record: MammogramRecord, out_dir: Path,
                       config: IngestConfig) -> MammogramRecord:
    """Decode, window and export one record; return it pointing at the exported file."""
    fmt = ImageFormat(config.format)
    suffix = ".png" if fmt is ImageFormat.PNG else ".jpg"
    target = out_dir / f"{sanitize_filename(record.image_id)}{suffix}"
    image = apply_window(parse_dicom(record.image_path))
    export_image(image, target, fmt, jpeg_quality=config.jpeg_quality)
    return record.with_path(target)


def ingest_dataset(clinical_table: PathLike, image_root: PathLike, out_dir: PathLike,
                   config: IngestConfig = IngestConfig()) -> DatasetManifest:
    """Build the manifest, export every image and write ``out_dir/manifest.csv``.

    Records that fail to decode are dropped with a warning; the batch continues. Output
    order is by ``image_id`` regardless of ``config.workers``.
    """
    out_dir = Path(out_dir)
    manifest = build_manifest(clinical_table, image_root, workers=config.workers)
    image_dir = out_dir / "images"

    def _one(record: MammogramRecord) -> Optional[MammogramRecord]:
        try:
            return standardize_record(record, image_dir, config)
        except MammoError as exc:
            log.warning("[SKIP] %s: %s", record.image_id, exc)
            return None

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        done = [r for r in pool.map(_one, manifest.records) if r is not None]
    if not done:
        raise EmptyJoin("every matched image failed to decode")
    result = manifest.with_records(done)
    write_manifest(result, out_dir / "manifest.csv")
    log.info("Ingested %d/%d images into %s", len(done), len(manifest), image_dir)
    return result


def eligible_counts(records: Sequence[MammogramRecord]) -> Dict[str, int]:
    """Per-label image counts."""
    counts = {"total": len(records), "subtype_labeled": 0, "luminal": 0, "non_luminal": 0,
              "benign": 0, "malignant": 0, "calcification": 0, "mass": 0, "both": 0}
    for r in records:
        counts["malignant" if r.is_malignant else "benign"] += 1
        counts[r.finding] += 1
        if r.is_subtype_labeled:
            counts["subtype_labeled"] += 1
            counts["luminal" if r.is_luminal else "non_luminal"] += 1
    return counts
