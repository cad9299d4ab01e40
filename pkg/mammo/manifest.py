"""Mammogram records and the dataset manifest (CSV + JSON sidecar).

The manifest CSV has a fixed header (:data:`mammo.const.MANIFEST_COLUMNS`), one row per
image, sorted by ``image_id``. Next to it ``<name>.meta.json`` records the schema
version, the SHA-256 of the clinical table the manifest was built from, and the SHA-256
of the CSV itself. Uses the stdlib ``csv`` module (no pandas) so the files stay diffable.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

from .const import (MANIFEST_COLUMNS, MANIFEST_SCHEMA_VERSION, Laterality, Pathology,
                    Subtype, View)
from .errors import EmptyManifest, IoFailure, SchemaMismatch
from .logging import get_logger
from .util import PathLike, sha256_file

log = get_logger(__name__)


@dataclass(frozen=True)
class MammogramRecord:
    """One image with every image-level label the clinical table provides."""

    patient_id: str
    image_id: str
    laterality: Laterality
    view: View
    age: Optional[int]
    has_calcification: bool
    has_mass: bool
    pathology: Pathology
    subtype: Subtype
    image_path: Path

    def __post_init__(self):
        if self.subtype is not Subtype.UNLABELED and self.pathology is not Pathology.MALIGNANT:
            raise SchemaMismatch(
                f"{self.image_id}: subtype {self.subtype.value} on a "
                f"{self.pathology.value} finding (subtypes exist only for malignant lesions)"
            )
        if not (self.has_calcification or self.has_mass):
            raise SchemaMismatch(f"{self.image_id}: record has neither calcification nor mass")

    @property
    def is_subtype_labeled(self) -> bool:
        return self.subtype is not Subtype.UNLABELED

    @property
    def is_luminal(self) -> bool:
        return self.subtype.is_luminal

    @property
    def is_malignant(self) -> bool:
        return self.pathology is Pathology.MALIGNANT

    @property
    def finding(self) -> str:
        if self.has_calcification and self.has_mass:
            return "both"
        return "calcification" if self.has_calcification else "mass"

    def with_path(self, path: PathLike) -> "MammogramRecord":
        return dataclasses.replace(self, image_path=Path(path))


@dataclass(frozen=True)
class DatasetManifest:
    records: Tuple[MammogramRecord, ...]
    source_fingerprint: str = ""
    schema_version: int = MANIFEST_SCHEMA_VERSION

    def __post_init__(self):
        seen = set()
        for record in self.records:
            if record.image_id in seen:
                raise SchemaMismatch(f"duplicate image_id in manifest: {record.image_id}")
            seen.add(record.image_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[MammogramRecord]:
        return iter(self.records)

    @property
    def by_id(self) -> Dict[str, MammogramRecord]:
        return {r.image_id: r for r in self.records}

    def patients(self) -> List[str]:
        return sorted({r.patient_id for r in self.records})

    def subtype_labeled(self) -> "DatasetManifest":
        """The luminal-task eligible subset (subtype != Unlabeled)."""
        return self.with_records(r for r in self.records if r.is_subtype_labeled)

    def select(self, image_ids) -> "DatasetManifest":
        wanted = set(image_ids)
        return self.with_records(r for r in self.records if r.image_id in wanted)

    def with_records(self, records) -> "DatasetManifest":
        return DatasetManifest(
            records=tuple(sorted(records, key=lambda r: r.image_id)),
            source_fingerprint=self.source_fingerprint,
            schema_version=self.schema_version,
        )

    def validate(self) -> None:
        """Raise if the manifest is empty or any image file is missing on disk."""
        if not self.records:
            raise EmptyManifest("manifest has no records")
        missing = [r.image_id for r in self.records if not Path(r.image_path).exists()]
        if missing:
            raise IoFailure(f"{len(missing)} image file(s) missing, e.g. {missing[:3]}")


def _bool(text: str) -> bool:
    return text.strip().lower() in ("1", "true", "yes")


def _row_from_record(record: MammogramRecord, base: Path) -> Dict[str, str]:
    path = Path(record.image_path)
    try:
        rel = Path(os.path.relpath(path, base))
        shown = rel.as_posix() if not rel.as_posix().startswith("..") else path.as_posix()
    except ValueError:  # different drive on Windows
        shown = path.as_posix()
    return {
        "image_id": record.image_id,
        "patient_id": record.patient_id,
        "laterality": record.laterality.value,
        "view": record.view.value,
        "age": "" if record.age is None else str(record.age),
        "calcification": "1" if record.has_calcification else "0",
        "mass": "1" if record.has_mass else "0",
        "pathology": record.pathology.value,
        "subtype": record.subtype.value,
        "path": shown,
    }


def _record_from_row(row: Dict[str, str], base: Path) -> MammogramRecord:
    path = Path(row["path"])
    return MammogramRecord(
        patient_id=row["patient_id"],
        image_id=row["image_id"],
        laterality=Laterality(row["laterality"]),
        view=View(row["view"]),
        age=int(row["age"]) if row["age"].strip() else None,
        has_calcification=_bool(row["calcification"]),
        has_mass=_bool(row["mass"]),
        pathology=Pathology(row["pathology"]),
        subtype=Subtype(row["subtype"]),
        image_path=path if path.is_absolute() else base / path,
    )


def sidecar_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def write_manifest(manifest: DatasetManifest, path: PathLike) -> Path:
    """Write the manifest CSV and its JSON sidecar; return the CSV path."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        base = path.parent.resolve()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(MANIFEST_COLUMNS))
            writer.writeheader()
            for record in sorted(manifest.records, key=lambda r: r.image_id):
                writer.writerow(_row_from_record(record, base))
        meta = {
            "schema_version": manifest.schema_version,
            "source_fingerprint": manifest.source_fingerprint,
            "manifest_sha256": sha256_file(path),
            "records": len(manifest),
        }
        sidecar_path(path).write_text(json.dumps(meta, indent=2), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write manifest {path}: {exc}") from exc
    log.info("Wrote manifest: %s (%d records)", path, len(manifest))
    return path


def read_manifest(path: PathLike) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise IoFailure(f"manifest not found: {path}")
    base = path.parent.resolve()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = tuple(reader.fieldnames or ())
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise SchemaMismatch(f"{path}: missing manifest column(s) {missing}")
        records = [_record_from_row(row, base) for row in reader]
    meta: Dict = {}
    if sidecar_path(path).exists():
        meta = json.loads(sidecar_path(path).read_text("utf-8"))
    return DatasetManifest(
        records=tuple(sorted(records, key=lambda r: r.image_id)),
        source_fingerprint=meta.get("source_fingerprint", ""),
        schema_version=int(meta.get("schema_version", MANIFEST_SCHEMA_VERSION)),
    )


def manifest_digest(path: PathLike) -> str:
    """SHA-256 of a manifest CSV and its sidecar; empty when the CSV does not exist yet."""
    path = Path(path)
    if not path.exists():
        return ""
    sidecar = sidecar_path(path)
    return sha256_file(path) + (sha256_file(sidecar) if sidecar.exists() else "")


def records_for(manifest: DatasetManifest, image_ids: Sequence[str]) -> List[MammogramRecord]:
    by_id = manifest.by_id
    return [by_id[i] for i in image_ids if i in by_id]
