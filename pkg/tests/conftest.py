"""Shared synthetic data: DICOM files, clinical tables and PNG cohorts.

Nothing here touches real patient data; every image is a few dozen pixels of noise and
a bright ellipse standing in for the breast.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest
from pydicom.dataset import Dataset, FileMetaDataset
from pydicom.uid import ExplicitVRLittleEndian, generate_uid

from mammo.const import Laterality, Pathology, Subtype, View
from mammo.ingest import ImageTensor, export_image
from mammo.manifest import DatasetManifest, MammogramRecord

# Digital mammography image storage.
_MG_SOP_CLASS = "1.2.840.10008.5.1.4.1.1.1.2"


def breast_phantom(rows: int, cols: int, level: float, side: str = "L",
                   seed: int = 0) -> np.ndarray:
    """[0, 1] image: dark background and one bright half-ellipse against a chest wall."""
    rng = np.random.default_rng(seed)
    r, c = np.mgrid[0:rows, 0:cols]
    centre_c = 0 if side == "L" else cols - 1
    inside = ((r - rows / 2) / (0.4 * rows)) ** 2 + ((c - centre_c) / (0.7 * cols)) ** 2 <= 1
    img = np.zeros((rows, cols), dtype=np.float32)
    img[inside] = np.clip(level + rng.normal(0, 0.02, inside.sum()), 0.05, 1.0)
    return img


def write_dicom(path: Path, pixels: np.ndarray, *, patient_id: str = "P1",
                laterality: str = "L", view: str = "CC", uid: str = None,
                window=(2048.0, 4096.0), bits: int = 12,
                photometric: str = "MONOCHROME2", with_pixels: bool = True) -> Path:
    """Single-frame 16-bit grayscale DICOM holding ``pixels`` (stored values)."""
    meta = FileMetaDataset()
    meta.TransferSyntaxUID = ExplicitVRLittleEndian
    meta.MediaStorageSOPClassUID = _MG_SOP_CLASS
    uid = uid or generate_uid()
    meta.MediaStorageSOPInstanceUID = uid

    ds = Dataset()
    ds.file_meta = meta
    ds.SOPClassUID = _MG_SOP_CLASS
    ds.SOPInstanceUID = uid
    ds.PatientID = patient_id
    ds.ImageLaterality = laterality
    if view:
        ds.ViewPosition = view
    ds.Modality = "MG"
    if window is not None:
        ds.WindowCenter = window[0]
        ds.WindowWidth = window[1]
    if with_pixels:
        stored = np.asarray(pixels, dtype=np.uint16)
        ds.Rows, ds.Columns = stored.shape
        ds.SamplesPerPixel = 1
        ds.PhotometricInterpretation = photometric
        ds.BitsAllocated = 16
        ds.BitsStored = bits
        ds.HighBit = bits - 1
        ds.PixelRepresentation = 0
        ds.PixelData = stored.tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    ds.save_as(str(path), enforce_file_format=True)
    return path


def make_record(image_id: str = "img", patient_id: str = "P1", *,
                subtype: Subtype = Subtype.UNLABELED, pathology: Pathology = None,
                calcification: bool = False, mass: bool = True,
                laterality: Laterality = Laterality.LEFT, view: View = View.CC,
                age: int = 50, path: Path = Path("missing.png")) -> MammogramRecord:
    if pathology is None:
        pathology = Pathology.MALIGNANT if subtype is not Subtype.UNLABELED else Pathology.BENIGN
    return MammogramRecord(
        patient_id=patient_id, image_id=image_id, laterality=laterality, view=view,
        age=age, has_calcification=calcification, has_mass=mass, pathology=pathology,
        subtype=subtype, image_path=Path(path),
    )


# Patient groups of the end-to-end cohort: (prefix, abnormality, pathology, subtype, level).
COHORT_GROUPS = (
    ("LUM", "mass", "Malignant", "Luminal A", 0.8),
    ("HER", "calcification", "Malignant", "HER2-enriched", 0.3),
    ("BEN", "mass", "Benign", "", 0.55),
)


@pytest.fixture
def dicom_cohort(tmp_path):
    """Clinical CSV plus a DICOM tree: 6 patients per group, CC + MLO of one breast.

    Column names follow the public spreadsheet (ID1, LeftRight, classification).
    """
    root = tmp_path / "dicom"
    clinical = tmp_path / "clinical.csv"
    rows = []
    for prefix, abnormality, pathology, subtype, level in COHORT_GROUPS:
        for i in range(6):
            pid = f"{prefix}{i:02d}"
            side = "L" if i % 2 == 0 else "R"
            rows.append({"ID1": pid, "LeftRight": side, "Age": str(40 + i),
                         "abnormality": abnormality, "classification": pathology,
                         "subtype": subtype})
            for j, view in enumerate(("CC", "MLO")):
                phantom = breast_phantom(48, 32, level, side, seed=2 * len(rows) + j)
                write_dicom(root / pid / f"{pid}_{view}.dcm", phantom * 4095,
                            patient_id=pid, laterality=side, view=view,
                            uid=f"1.2.826.0.1.3680043.9.{len(rows)}.{j}")
    with open(clinical, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return clinical, root


@pytest.fixture
def png_cohort(tmp_path):
    """Factory: write one PNG per record (brightness by class) and return the manifest."""

    def _build(records, rows: int = 64, cols: int = 32, levels=None) -> DatasetManifest:
        out = []
        for k, record in enumerate(records):
            if levels is not None:
                level = levels[record.image_id]
            else:
                level = 0.8 if record.is_luminal or record.has_calcification else 0.2
            rng = np.random.default_rng(k)
            pixels = np.clip(level + rng.normal(0, 0.03, (rows, cols)), 0, 1).astype(np.float32)
            path = export_image(ImageTensor(pixels), tmp_path / "png" / f"{record.image_id}.png")
            out.append(record.with_path(path))
        return DatasetManifest(records=tuple(sorted(out, key=lambda r: r.image_id)))

    return _build


def _luminal_records(n_patients: int, images_per_patient: int = 2, luminal_every: int = 2):
    """Subtype-labeled malignant mass records; every ``luminal_every``-th patient is luminal."""
    records = []
    for p in range(n_patients):
        subtype = Subtype.LUMINAL_A if p % luminal_every == 0 else Subtype.TRIPLE_NEGATIVE
        for v in range(images_per_patient):
            records.append(make_record(f"p{p:03d}_{v}", f"p{p:03d}", subtype=subtype,
                                       view=View.CC if v % 2 == 0 else View.MLO))
    return records


@pytest.fixture
def record_factory():
    return make_record


@pytest.fixture
def luminal_records():
    """Factory: ``(n_patients, images_per_patient=2, luminal_every=2)`` -> records."""
    return _luminal_records


@pytest.fixture
def dicom_writer():
    return write_dicom


@pytest.fixture
def phantom():
    return breast_phantom
