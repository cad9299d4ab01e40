"""Patient-disjoint hold-out and stratified k-fold assignment.

Every image of a patient always shares one role, so neither the test set nor any fold's
validation set leaks a patient into training. Stratification is by image counts per
class, assigned a whole patient at a time, so class proportions are matched to within
one patient's images. Folds are built with scikit-learn's grouped stratified splitter.

Randomness comes from ``numpy.random.default_rng(seed)`` (PCG64), so a seed reproduces
the same assignment on any platform.
"""

from __future__ import annotations

import csv
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Tuple

import numpy as np
from sklearn.model_selection import StratifiedGroupKFold

from .const import SPLIT_COLUMNS, SplitTask
from .errors import EmptyManifest, InsufficientClassMembers, IoFailure, SchemaMismatch
from .logging import get_logger
from .manifest import DatasetManifest, MammogramRecord
from .util import PathLike

log = get_logger(__name__)

ROLE_TEST = "test"
ROLE_POOL = "pool"


def fold_role(k: int) -> str:
    return f"fold{k}"


def stratum(record: MammogramRecord, task: SplitTask) -> str:
    """Class key a record is stratified on for ``task``."""
    if SplitTask(task) is SplitTask.SUBTYPE:
        return "luminal" if record.is_luminal else "non_luminal"
    return f"{record.finding}/{record.pathology.value.lower()}"


def task_records(manifest: DatasetManifest, task: SplitTask) -> List[MammogramRecord]:
    """Records eligible for ``task`` (the subtype task needs a subtype label)."""
    if SplitTask(task) is SplitTask.SUBTYPE:
        return [r for r in manifest if r.is_subtype_labeled]
    return list(manifest)


@dataclass(frozen=True)
class SplitAssignment:
    """Role (``test``, ``pool`` or ``fold<k>``) per image id."""

    roles: Mapping[str, str]
    seed: int
    task: SplitTask
    folds: int = 0
    meta: Mapping[str, object] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.roles)

    def ids_with_role(self, role: str) -> List[str]:
        return sorted(i for i, r in self.roles.items() if r == role)

    @property
    def test_ids(self) -> List[str]:
        return self.ids_with_role(ROLE_TEST)

    @property
    def pool_ids(self) -> List[str]:
        return sorted(i for i, r in self.roles.items() if r != ROLE_TEST)

    def fold_members(self, k: int) -> Tuple[List[str], List[str]]:
        """``(train ids, validation ids)`` for fold ``k``: validation is fold k, train the rest of the pool."""
        if not 0 <= k < self.folds:
            raise ValueError(f"fold {k} out of range for a {self.folds}-fold assignment")
        val = self.ids_with_role(fold_role(k))
        train = sorted(i for i, r in self.roles.items() if r.startswith("fold") and r != fold_role(k))
        return train, val


def _patient_counts(records: Iterable[MammogramRecord],
                    task: SplitTask) -> Dict[str, Counter]:
    counts: Dict[str, Counter] = defaultdict(Counter)
    for r in records:
        counts[r.patient_id][stratum(r, task)] += 1
    return counts


def _require_patients(per_patient: Mapping[str, Counter], minimum: int, what: str) -> None:
    patients_per_class: Counter = Counter()
    for counts in per_patient.values():
        for cls in counts:
            patients_per_class[cls] += 1
    short = {c: n for c, n in patients_per_class.items() if n < minimum}
    if short:
        raise InsufficientClassMembers(
            f"{what}: class(es) with fewer than {minimum} patients: {dict(sorted(short.items()))}")


def make_holdout_split(manifest: DatasetManifest, task: SplitTask = SplitTask.SUBTYPE,
                       test_frac: float = 0.10, seed: int = 0,
                       reserved_test_patients: Iterable[str] = ()) -> SplitAssignment:
    """Greedy stratified hold-out of whole patients; everything else becomes the CV pool.

    Patients are visited in seeded random order and moved to test while every class they
    carry is still below its target ``round(test_frac * class images)``.
    ``reserved_test_patients`` are placed in test first (used to keep the subtype test
    patients out of abnormality pretraining).
    """
    task = SplitTask(task)
    records = task_records(manifest, task)
    if not records:
        raise EmptyManifest(f"no records eligible for the {task.value} task")
    per_patient = _patient_counts(records, task)
    _require_patients(per_patient, 2, "hold-out split")

    totals: Counter = Counter()
    for counts in per_patient.values():
        totals.update(counts)
    targets = {c: int(round(test_frac * n)) for c, n in totals.items()}

    current: Counter = Counter()
    test_patients = set()
    for patient in sorted(set(reserved_test_patients) & set(per_patient)):
        test_patients.add(patient)
        current.update(per_patient[patient])

    patients = sorted(per_patient)
    rng = np.random.default_rng(seed)
    for idx in rng.permutation(len(patients)):
        if all(current[c] >= t for c, t in targets.items()):
            break
        patient = patients[idx]
        if patient in test_patients:
            continue
        counts = per_patient[patient]
        if all(current[c] < targets[c] for c in counts):
            test_patients.add(patient)
            current.update(counts)

    roles = {r.image_id: ROLE_TEST if r.patient_id in test_patients else ROLE_POOL
             for r in records}
    log.info("Hold-out (%s, seed %d): %d test / %d pool images; test per class %s",
             task.value, seed, sum(current.values()), len(records) - sum(current.values()),
             dict(sorted(current.items())))
    return SplitAssignment(roles=roles, seed=seed, task=task, folds=0,
                           meta={"test_frac": test_frac, "targets": targets})


def cv_pool(manifest: DatasetManifest, holdout: SplitAssignment) -> DatasetManifest:
    return manifest.select(holdout.pool_ids)


def make_cv_folds(pool: DatasetManifest, task: SplitTask = SplitTask.SUBTYPE, k: int = 5,
                  seed: int = 0, holdout: SplitAssignment = None) -> SplitAssignment:
    """Partition the pool's patients into ``k`` class-balanced folds.

    Folds come from :class:`sklearn.model_selection.StratifiedGroupKFold` over image-level
    classes grouped by patient. Group codes follow a seeded permutation of the patients,
    which is the splitter's tie-break order. If ``holdout`` is given its test roles are
    carried over.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    task = SplitTask(task)
    test = set(holdout.test_ids) if holdout is not None else set()
    records = [r for r in task_records(pool, task) if r.image_id not in test]
    if not records:
        raise EmptyManifest("CV pool is empty")
    per_patient = _patient_counts(records, task)
    _require_patients(per_patient, k, f"{k}-fold CV")

    patients = sorted(per_patient)
    order = np.random.default_rng(seed).permutation(len(patients))
    group_code = {patients[j]: rank for rank, j in enumerate(order)}
    classes = sorted({c for counts in per_patient.values() for c in counts})
    labels = np.array([classes.index(stratum(r, task)) for r in records])
    groups = np.array([group_code[r.patient_id] for r in records])

    splitter = StratifiedGroupKFold(n_splits=k, shuffle=False)
    roles: Dict[str, str] = {}
    fold_images = np.zeros((k, len(classes)), dtype=np.int64)
    for fold, (_, val_idx) in enumerate(splitter.split(np.zeros(len(records)), labels, groups)):
        for i in val_idx:
            roles[records[i].image_id] = fold_role(fold)
        fold_images[fold] = np.bincount(labels[val_idx], minlength=len(classes))

    empty = [(fold, classes[c]) for fold, c in zip(*np.nonzero(fold_images == 0))]
    if empty:
        log.warning("%d-fold CV (%s): validation folds without a class: %s", k, task.value,
                    empty)
    if holdout is not None:
        roles.update({i: ROLE_TEST for i in test})
    log.info("%d-fold CV (%s, seed %d): validation images per fold and class %s", k,
             task.value, seed, fold_images.tolist())
    meta = dict(holdout.meta) if holdout is not None else {}
    return SplitAssignment(roles=roles, seed=seed, task=task, folds=k, meta=meta)


def make_splits(manifest: DatasetManifest, task: SplitTask, seed: int, test_frac: float = 0.10,
                k: int = 5, reserved_test_patients: Iterable[str] = ()) -> SplitAssignment:
    """Hold-out followed by k-fold CV on the remaining pool, from one seed."""
    holdout = make_holdout_split(manifest, task, test_frac, seed, reserved_test_patients)
    fold_seed = int(np.random.default_rng(seed).integers(0, 2 ** 31 - 1))
    return make_cv_folds(cv_pool(manifest, holdout), task, k, fold_seed, holdout=holdout)


def verify_no_leakage(assignment: SplitAssignment, manifest: DatasetManifest) -> List[str]:
    """Patient ids whose images do not all share one role (empty list = no leakage)."""
    roles_by_patient: Dict[str, set] = defaultdict(set)
    for record in manifest:
        role = assignment.roles.get(record.image_id)
        if role is not None:
            roles_by_patient[record.patient_id].add(role)
    return sorted(p for p, roles in roles_by_patient.items() if len(roles) > 1)


def split_summary(assignment: SplitAssignment,
                  manifest: DatasetManifest) -> Dict[str, Dict[str, int]]:
    """Image counts per role and class (the dataset-table bookkeeping)."""
    summary: Dict[str, Counter] = defaultdict(Counter)
    by_id = manifest.by_id
    for image_id, role in assignment.roles.items():
        if image_id in by_id:
            summary[role][stratum(by_id[image_id], assignment.task)] += 1
    return {role: dict(sorted(c.items())) for role, c in sorted(summary.items())}


# --------------------------------------------------------------------------- #
# CSV I/O
# --------------------------------------------------------------------------- #
def _meta_path(path: Path) -> Path:
    return path.with_name(path.stem + ".meta.json")


def write_splits(assignment: SplitAssignment, path: PathLike) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(SPLIT_COLUMNS)
            for image_id in sorted(assignment.roles):
                writer.writerow([image_id, assignment.roles[image_id]])
        _meta_path(path).write_text(json.dumps({
            "seed": assignment.seed, "task": assignment.task.value,
            "folds": assignment.folds, **{k: v for k, v in assignment.meta.items()},
        }, indent=2, sort_keys=True), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write splits {path}: {exc}") from exc
    log.info("Wrote splits: %s (%d images)", path, len(assignment))
    return path


def read_splits(path: PathLike, task: SplitTask = None, seed: int = None) -> SplitAssignment:
    """Load a split CSV; seed/task/folds come from the sidecar when present."""
    path = Path(path)
    if not path.exists():
        raise IoFailure(f"split file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SPLIT_COLUMNS:
            raise SchemaMismatch(f"{path}: expected columns {SPLIT_COLUMNS}")
        roles = {row["image_id"]: row["role"] for row in reader}
    meta: Dict = {}
    if _meta_path(path).exists():
        meta = json.loads(_meta_path(path).read_text("utf-8"))
    folds = int(meta.pop("folds", 0)) or len({r for r in roles.values() if r.startswith("fold")})
    return SplitAssignment(
        roles=roles,
        seed=int(meta.pop("seed", seed if seed is not None else 0)),
        task=SplitTask(meta.pop("task", SplitTask(task or SplitTask.SUBTYPE).value)),
        folds=folds,
        meta=meta,
    )

