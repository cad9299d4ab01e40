"""Stage orchestration: ingest -> preprocess -> split -> train -> evaluate -> gradcam -> report.

Every artifact lives under ``paths.output``::

    ingest/manifest.csv, ingest/images/
    preprocess/manifest.csv, preprocess/images/
    splits/<subtype|abnormality>.csv
    train/<task>/<task>_fold<k>.pt (+ history CSV)
    evaluate/<task>.json
    gradcam/<task>/<image>_<class>.png
    report/report.json, report/report.txt
    stamps/<stage>.json, provenance.json

A stage whose stamp records the same input hash, and whose outputs still exist, is
skipped. All seeds derive from ``RunConfig.seed``.
"""

from __future__ import annotations

import dataclasses
import json
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .config import RunConfig, TrainConfig, config_hash
from .const import STAGES, SplitTask
from .errors import (ConfigInvalid, EmptyManifest, IoFailure, MammoError, SchemaMismatch,
                     StageFailed)
from .evaluation import (EvalReport, compare_reports, evaluate_task, format_table,
                         read_report_json, write_report_json)
from .explain import gradcam, overlay_and_export
from .ingest import eligible_counts, ingest_dataset, load_image
from .logging import get_logger, log_context
from .manifest import DatasetManifest, manifest_digest, read_manifest, records_for
from .models import load_checkpoint, model_from_checkpoint
from .preprocess import preprocess_dataset
from .splits import make_splits, read_splits, split_summary, write_splits
from .tasks import TaskKind, get_task
from .training import train_task
from .util import PathLike, derive_seed, sha256_file, stable_hash, utc_now

log = get_logger(__name__)

# Training order: the transfer task starts from the MLMC checkpoints.
_TASK_ORDER = ("mlmc", "mass-calc", "benign-malignant", "baseline", "transfer")


class Workspace:
    """Artifact paths under the run's output directory."""

    def __init__(self, root: PathLike):
        self.root = Path(root)

    ingest_dir = property(lambda self: self.root / "ingest")
    preprocess_dir = property(lambda self: self.root / "preprocess")
    stamps_dir = property(lambda self: self.root / "stamps")
    report_dir = property(lambda self: self.root / "report")
    provenance = property(lambda self: self.root / "provenance.json")

    def split_file(self, task: SplitTask) -> Path:
        return self.root / "splits" / f"{SplitTask(task).value}.csv"

    def train_dir(self, task: str) -> Path:
        return self.root / "train" / task

    def checkpoint(self, task: str, fold: int) -> Path:
        return self.train_dir(task) / f"{task}_fold{fold}.pt"

    def eval_report(self, task: str) -> Path:
        return self.root / "evaluate" / f"{task}.json"

    def gradcam_dir(self, task: str) -> Path:
        return self.root / "gradcam" / task

    def stamp(self, stage: str) -> Path:
        return self.stamps_dir / f"{stage}.json"


@dataclass
class StageRecord:
    status: str
    seconds: float = 0.0
    input_hash: str = ""
    outputs: List[str] = field(default_factory=list)


@dataclass
class PipelineResult:
    status: int
    stages: Dict[str, StageRecord]
    provenance: Path
    artifacts: Dict[str, List[str]] = field(default_factory=dict)


# --------------------------------------------------------------------------- #
# Input resolution and validation
# --------------------------------------------------------------------------- #
def ordered_tasks(tasks: Iterable[str]) -> List[str]:
    tasks = set(tasks)
    return [t for t in _TASK_ORDER if t in tasks]


def split_tasks(config: RunConfig) -> List[SplitTask]:
    needed = {get_task(t).split_task for t in config.tasks}
    return [t for t in (SplitTask.SUBTYPE, SplitTask.ABNORMALITY) if t in needed]


def source_manifest(config: RunConfig, ws: Workspace) -> Path:
    """Manifest the preprocess stage reads: ``paths.manifest`` or the ingest output."""
    if config.paths.manifest_path is not None:
        return config.paths.manifest_path
    return ws.ingest_dir / "manifest.csv"


def working_manifest(config: RunConfig, ws: Workspace, stages: Sequence[str]) -> Path:
    """Manifest of training-ready images used from the split stage on."""
    processed = ws.preprocess_dir / "manifest.csv"
    if "preprocess" in stages or processed.exists() or config.paths.manifest_path is None:
        return processed
    return config.paths.manifest_path


def validate_run(config: RunConfig, stages: Sequence[str]) -> None:
    """Fail with :class:`ConfigInvalid` before any stage runs."""
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ConfigInvalid(f"unknown stage(s) {unknown}; choose from {list(STAGES)}")
    paths = config.paths
    if paths.manifest_path is not None and not paths.manifest_path.exists():
        raise ConfigInvalid(f"paths.manifest does not exist: {paths.manifest_path}")
    if "ingest" in stages:
        for name, value in (("clinical", paths.clinical_path), ("images", paths.images_path)):
            if value is None or not value.exists():
                raise ConfigInvalid(f"ingest needs an existing paths.{name}, got {value}")
    ws = Workspace(paths.output_path)
    if "preprocess" in stages and "ingest" not in stages:
        src = source_manifest(config, ws)
        if not src.exists():
            raise ConfigInvalid(f"preprocess needs a manifest; {src} does not exist")
    later = [s for s in stages if STAGES.index(s) >= STAGES.index("split")]
    if later and "preprocess" not in stages:
        wm = working_manifest(config, ws, stages)
        if not wm.exists():
            raise ConfigInvalid(f"no manifest to work from: {wm} does not exist "
                                f"(run preprocess first or set paths.manifest)")
        try:
            read_manifest(wm).validate()
        except (EmptyManifest, IoFailure, SchemaMismatch) as exc:
            raise ConfigInvalid(f"{wm}: {exc}") from exc
    if "train" in stages and "split" not in stages:
        for task in split_tasks(config):
            if not ws.split_file(task).exists():
                raise ConfigInvalid(f"train needs {ws.split_file(task)}; run the split stage")


# --------------------------------------------------------------------------- #
# Stamps
# --------------------------------------------------------------------------- #
def _digest(path: Path) -> str:
    return sha256_file(path) if path.exists() else ""


def _read_stamp(ws: Workspace, stage: str) -> Optional[Dict]:
    try:
        return json.loads(ws.stamp(stage).read_text(encoding="utf-8"))
    except (OSError, ValueError):
        return None


def _up_to_date(ws: Workspace, stage: str, input_hash: str) -> bool:
    stamp = _read_stamp(ws, stage)
    return (stamp is not None and stamp.get("input_hash") == input_hash
            and all(Path(p).exists() for p in stamp.get("outputs", ())))


def _write_stamp(ws: Workspace, stage: str, record: StageRecord) -> None:
    ws.stamps_dir.mkdir(parents=True, exist_ok=True)
    ws.stamp(stage).write_text(json.dumps({
        "stage": stage, "input_hash": record.input_hash, "outputs": record.outputs,
        "seconds": record.seconds, "finished": utc_now(),
    }, indent=2), encoding="utf-8")


# --------------------------------------------------------------------------- #
# Stages
# --------------------------------------------------------------------------- #
class Pipeline:
    """Runs the requested stages of one :class:`RunConfig`."""

    def __init__(self, config: RunConfig, stages: Optional[Sequence[str]] = None,
                 force: bool = False):
        self.config = config
        requested = list(stages) if stages else list(STAGES)
        self.stages = [s for s in STAGES if s in requested]
        unknown = [s for s in requested if s not in STAGES]
        if unknown:
            raise ConfigInvalid(f"unknown stage(s) {unknown}; choose from {list(STAGES)}")
        self.force = force
        self.ws = Workspace(config.paths.output_path)
        self.hash = config_hash(config)
        self.seeds: Dict[str, int] = {}
        self.records: Dict[str, StageRecord] = {}

    # -- per-stage input hashes ------------------------------------------------
    def _input_hash(self, stage: str) -> str:
        c, ws = self.config, self.ws
        if stage == "ingest":
            images = c.paths.images_path
            listing = sorted((p.relative_to(images).as_posix(), p.stat().st_size)
                             for p in images.rglob("*.dcm")) if images and images.is_dir() else []
            data = {"ingest": dataclasses.asdict(c.ingest),
                    "clinical": _digest(c.paths.clinical_path) if c.paths.clinical_path else "",
                    "images": listing}
        elif stage == "preprocess":
            data = {"preprocess": dataclasses.asdict(c.preprocess),
                    "manifest": manifest_digest(source_manifest(c, ws))}
        elif stage == "split":
            data = {"split": dataclasses.asdict(c.split), "seed": c.seed,
                    "tasks": [t.value for t in split_tasks(c)],
                    "manifest": manifest_digest(working_manifest(c, ws, self.stages))}
        elif stage == "train":
            data = {"train": dataclasses.asdict(self._train_config()),
                    "tasks": ordered_tasks(c.tasks),
                    "splits": [_digest(ws.split_file(t)) for t in split_tasks(c)],
                    "manifest": manifest_digest(working_manifest(c, ws, self.stages))}
        elif stage in ("evaluate", "gradcam"):
            data = {"report": dataclasses.asdict(c.report), "stage": stage,
                    "checkpoints": [_digest(ws.checkpoint(t, k)) for t in ordered_tasks(c.tasks)
                                    for k in range(c.split.folds)]}
        else:
            data = {"reports": [_digest(ws.eval_report(t)) for t in ordered_tasks(c.tasks)]}
        return stable_hash(data)

    def _train_config(self) -> TrainConfig:
        seed = derive_seed(self.config.seed, "train")
        self.seeds["train"] = seed
        train = dataclasses.replace(self.config.train, seed=seed)
        pretrained = self.config.paths.pretrained_path
        if train.pretrained_weights is None and pretrained is not None:
            train = dataclasses.replace(train, pretrained_weights=str(pretrained))
        return train

    def _manifest(self) -> DatasetManifest:
        manifest = read_manifest(working_manifest(self.config, self.ws, self.stages))
        manifest.validate()
        return manifest

    # -- stage bodies ------------------------------------------------------------
    def ingest(self) -> List[Path]:
        c = self.config
        ingest_dataset(c.paths.clinical_path, c.paths.images_path, self.ws.ingest_dir, c.ingest)
        return [self.ws.ingest_dir / "manifest.csv"]

    def preprocess(self) -> List[Path]:
        manifest = read_manifest(source_manifest(self.config, self.ws))
        preprocess_dataset(manifest, self.config.preprocess, self.ws.preprocess_dir)
        return [self.ws.preprocess_dir / "manifest.csv"]

    def split(self) -> List[Path]:
        c, manifest = self.config, self._manifest()
        outputs, reserved = [], ()
        for task in split_tasks(c):
            seed = derive_seed(c.seed, "split", task.value)
            self.seeds[f"split/{task.value}"] = seed
            nest = task is SplitTask.ABNORMALITY and c.split.nest_subtype_test
            assignment = make_splits(manifest, task, seed, c.split.test_frac, c.split.folds,
                                     reserved_test_patients=reserved if nest else ())
            assignment = dataclasses.replace(assignment, meta={
                **assignment.meta,
                "eligible": eligible_counts(records_for(manifest, list(assignment.roles)))})
            if task is SplitTask.SUBTYPE:
                by_id = manifest.by_id
                reserved = sorted({by_id[i].patient_id for i in assignment.test_ids})
            outputs.append(write_splits(assignment, self.ws.split_file(task)))
            for role, counts in split_summary(assignment, manifest).items():
                log.info("  %s %-6s %s", task.value, role, counts)
        return outputs

    def train(self) -> List[Path]:
        c, ws = self.config, self.ws
        train_config = self._train_config()
        manifest_path = working_manifest(c, ws, self.stages)
        outputs = []
        for task in ordered_tasks(c.tasks):
            spec = get_task(task)
            split_path = ws.split_file(spec.split_task)
            jobs = [_FoldJob(task, k, str(split_path), str(manifest_path), train_config,
                             str(ws.checkpoint("mlmc", k)) if spec.requires_init else None,
                             str(ws.train_dir(task)), self.hash)
                    for k in range(c.split.folds)]
            if c.parallel_folds and len(jobs) > 1:
                with ProcessPoolExecutor(max_workers=len(jobs)) as pool:
                    outputs.extend(Path(p) for p in pool.map(_train_fold, jobs))
            else:
                outputs.extend(Path(_train_fold(job)) for job in jobs)
        return outputs

    def evaluate(self) -> List[Path]:
        c, ws = self.config, self.ws
        manifest = self._manifest()
        outputs = []
        for task in ordered_tasks(c.tasks):
            spec = get_task(task)
            assignment = read_splits(ws.split_file(spec.split_task))
            test = records_for(manifest, assignment.test_ids)
            ckpts = [ws.checkpoint(task, k) for k in range(c.split.folds)]
            report = evaluate_task(ckpts, test, spec, c.train.batch_size, c.report.positive_class)
            outputs.append(write_report_json(report.to_dict(), ws.eval_report(task)))
        return outputs

    def gradcam(self) -> List[Path]:
        c, ws = self.config, self.ws
        tasks = ordered_tasks(c.tasks)
        task = "mlmc" if "mlmc" in tasks else tasks[0]
        spec = get_task(task)
        manifest = self._manifest()
        assignment = read_splits(ws.split_file(spec.split_task))
        records = records_for(manifest, assignment.test_ids)[:c.report.gradcam_images]
        model = model_from_checkpoint(load_checkpoint(ws.checkpoint(task, 0)))
        outputs = []
        for record in records:
            img = load_image(record.image_path)
            for name in spec.class_names:
                saliency = gradcam(model, img, spec.unit_index(name))
                target = ws.gradcam_dir(task) / f"{record.image_id}_{name}.png"
                outputs.append(overlay_and_export(saliency, img, target, c.report.alpha))
        log.info("Wrote %d Grad-CAM overlays to %s", len(outputs), ws.gradcam_dir(task))
        return outputs

    def report(self) -> List[Path]:
        reports = {t: read_report_json(self.ws.eval_report(t))
                   for t in ordered_tasks(self.config.tasks) if self.ws.eval_report(t).exists()}
        return make_report(reports, self.ws.report_dir)

    # -- driver -----------------------------------------------------------------
    def run(self) -> PipelineResult:
        validate_run(self.config, self.stages)
        status = 0
        try:
            for stage in self.stages:
                input_hash = self._input_hash(stage)
                if not self.force and _up_to_date(self.ws, stage, input_hash):
                    log.info("[SKIP] %s is up to date", stage)
                    self.records[stage] = StageRecord("skipped", input_hash=input_hash)
                    continue
                log.info("[RUN] %s", stage)
                started = time.perf_counter()
                try:
                    with log_context(stage=stage):
                        outputs = getattr(self, stage)()
                except (MammoError, OSError, ValueError, RuntimeError) as exc:
                    self.records[stage] = StageRecord("failed", time.perf_counter() - started)
                    raise StageFailed(stage, exc) from exc
                record = StageRecord("ran", time.perf_counter() - started, input_hash,
                                     [str(p) for p in outputs])
                self.records[stage] = record
                _write_stamp(self.ws, stage, record)
                log.info("[OK] %s (%.1fs)", stage, record.seconds)
        except StageFailed:
            status = 1
            raise
        finally:
            self.write_provenance(status)
        return PipelineResult(status, self.records, self.ws.provenance,
                              {s: r.outputs for s, r in self.records.items()})

    def write_provenance(self, status: int) -> Path:
        self.ws.root.mkdir(parents=True, exist_ok=True)
        self.ws.provenance.write_text(json.dumps({
            "finished": utc_now(),
            "status": status,
            "config_hash": self.hash,
            "config": self.config.to_dict(),
            "root_seed": self.config.seed,
            "seeds": self.seeds,
            "stages": {s: dataclasses.asdict(r) for s, r in self.records.items()},
            "versions": {"python": platform.python_version(), "numpy": np.__version__,
                         "torch": torch.__version__},
        }, indent=2, sort_keys=True, default=str), encoding="utf-8")
        return self.ws.provenance


@dataclass(frozen=True)
class _FoldJob:
    task: str
    fold: int
    split_path: str
    manifest_path: str
    config: TrainConfig
    init_path: Optional[str]
    out_dir: str
    config_hash: str


def _train_fold(job: _FoldJob) -> str:
    """One (task, fold); module level so a process pool can pickle it."""
    init = load_checkpoint(job.init_path) if job.init_path else None
    _, history = train_task(job.task, job.fold, read_splits(job.split_path),
                            read_manifest(job.manifest_path), job.config, init=init,
                            out_dir=job.out_dir, config_hash=job.config_hash)
    return history.best_checkpoint


def run_pipeline(config: RunConfig, stages: Optional[Sequence[str]] = None,
                 force: bool = False) -> PipelineResult:
    """Run ``stages`` (default: all) in dependency order; see :class:`Pipeline`."""
    return Pipeline(config, stages, force).run()


# --------------------------------------------------------------------------- #
# Report
# --------------------------------------------------------------------------- #
_ABNORMALITY_TASKS = (TaskKind.MLMC.value, TaskKind.MASS_VS_CALC.value,
                      TaskKind.BENIGN_VS_MALIGNANT.value)
_LUMINAL_TASKS = (TaskKind.BASELINE_LUMINAL.value, TaskKind.TRANSFER_LUMINAL.value)


def make_report(reports: Mapping[str, EvalReport], out_dir: PathLike) -> List[Path]:
    """Write ``report.json`` and ``report.txt``: luminal baseline vs transfer, and the
    abnormality classifiers side by side, each cell ``mean (std)`` over folds."""
    out_dir = Path(out_dir)
    luminal = {t: reports[t] for t in _LUMINAL_TASKS if t in reports}
    abnormality = {t: reports[t] for t in _ABNORMALITY_TASKS if t in reports}
    significance = {}
    if len(luminal) == 2:
        significance = compare_reports(luminal["baseline"], luminal["transfer"])

    sections = []
    if abnormality:
        sections.append("Abnormality classifiers\n\n" + format_table(abnormality))
    if luminal:
        sections.append("Baseline versus transfer learning\n\n" + format_table(luminal, significance))
    text = "\n".join(sections) if sections else "No evaluation reports found.\n"

    payload = {
        "tasks": {t: r.to_dict() for t, r in reports.items()},
        "comparison": {"a": "baseline", "b": "transfer",
                       "pairs": "per-fold test metrics",
                       "t_tests": {m: dataclasses.asdict(s) for m, s in significance.items()}},
    }
    json_path = write_report_json(payload, out_dir / "report.json")
    text_path = out_dir / "report.txt"
    text_path.write_text(text, encoding="utf-8")
    log.info("Report written to %s", text_path)
    return [json_path, text_path]
