"""Command-line interface: ``python -m mammo <command>``.

Commands:
  ingest         DICOM + clinical table -> standardized PNGs and manifest.csv
  preprocess     crop to the breast and resize every manifest image
  split          patient-disjoint hold-out + stratified k-fold assignment
  train          train one task on one fold
  evaluate       run every fold's checkpoint on the test set
  gradcam        Grad-CAM overlay for one image
  report         baseline vs transfer comparison from evaluation reports
  run            the whole pipeline from a run.toml (resumable)
  fetch-weights  download and convert the ImageNet backbone weights

Exit codes: 0 ok, 1 stage/data failure, 2 configuration error. ``MAMMO_DATA_ROOT``
overrides ``paths.data_root`` of the run configuration.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import (IngestConfig, PreprocessConfig, RunConfig, config_hash,
                     load_run_config)
from .const import DEFAULT_CROP_THRESHOLD, STAGES, TARGET_COLS, TARGET_ROWS, SplitTask
from .errors import ConfigInvalid, MammoError
from .logging import configure, get_logger

log = get_logger(__name__)


def _run_config(args) -> RunConfig:
    return load_run_config(args.config) if getattr(args, "config", None) else RunConfig()


def _cmd_ingest(args) -> int:
    from .ingest import ingest_dataset

    config = IngestConfig(format=args.format, jpeg_quality=args.jpeg_quality,
                          workers=args.workers)
    manifest = ingest_dataset(args.clinical, args.images, args.out, config)
    log.info("[OK] %d records -> %s", len(manifest), Path(args.out) / "manifest.csv")
    return 0


def _cmd_preprocess(args) -> int:
    from .manifest import read_manifest
    from .preprocess import preprocess_dataset

    config = PreprocessConfig(threshold=args.threshold, rows=args.rows, cols=args.cols,
                              derive_rows_from_aspect=args.derive_rows, workers=args.workers)
    manifest = preprocess_dataset(read_manifest(args.manifest), config, args.out)
    log.info("[OK] %d images -> %s", len(manifest), args.out)
    return 0


def _cmd_split(args) -> int:
    from .manifest import read_manifest
    from .splits import make_splits, read_splits, split_summary, write_splits

    manifest = read_manifest(args.manifest)
    manifest.validate()
    reserved = ()
    if args.reserve_from:
        by_id = manifest.by_id
        reserved = sorted({by_id[i].patient_id for i in read_splits(args.reserve_from).test_ids
                           if i in by_id})
    assignment = make_splits(manifest, SplitTask(args.task), args.seed, args.test_frac,
                             args.folds, reserved_test_patients=reserved)
    write_splits(assignment, args.out)
    for role, counts in split_summary(assignment, manifest).items():
        log.info("  %-6s %s", role, counts)
    return 0


def _cmd_train(args) -> int:
    import dataclasses

    from .manifest import read_manifest
    from .models import load_checkpoint
    from .pipeline import Workspace, working_manifest
    from .splits import read_splits
    from .tasks import get_task
    from .training import train_task

    config = _run_config(args)
    spec = get_task(args.task)
    ws = Workspace(config.paths.output_path)
    manifest = args.manifest or working_manifest(config, ws, ())
    splits = args.splits or ws.split_file(spec.split_task)
    out = args.out or ws.train_dir(spec.name)
    train_config = config.train
    if args.epochs is not None:
        train_config = dataclasses.replace(train_config, max_epochs=args.epochs)
    init = load_checkpoint(args.init) if args.init else None
    ckpt, history = train_task(spec, args.fold, read_splits(splits), read_manifest(manifest),
                               train_config, init=init, out_dir=out,
                               config_hash=config_hash(config))
    log.info("[OK] %s fold %d: best epoch %d, val loss %s -> %s", spec.name, args.fold,
             ckpt.epoch, ckpt.val_loss, history.best_checkpoint)
    return 0


def _cmd_evaluate(args) -> int:
    from .evaluation import evaluate_task, format_table, write_report_json
    from .manifest import read_manifest, records_for
    from .splits import read_splits

    ckpts = sorted(Path(args.ckpt_dir).glob(f"{args.task}_fold*.pt"))
    if not ckpts:
        raise ConfigInvalid(f"no {args.task}_fold*.pt checkpoints in {args.ckpt_dir}")
    test = records_for(read_manifest(args.manifest), read_splits(args.split).test_ids)
    report = evaluate_task(ckpts, test, args.task, args.batch_size, args.positive_class)
    write_report_json(report.to_dict(), args.out)
    sys.stdout.write(format_table({args.task: report}))
    return 0


def _cmd_gradcam(args) -> int:
    from .explain import gradcam, overlay_and_export
    from .ingest import load_image
    from .models import load_checkpoint, model_from_checkpoint

    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    img = load_image(args.image)
    saliency = gradcam(model, img, model.task.unit_index(args.class_name))
    overlay_and_export(saliency, img, args.out, args.alpha)
    log.info("[OK] %s (%s, layer %s) -> %s", args.image, args.class_name,
             saliency.source_layer, args.out)
    return 0


def _cmd_report(args) -> int:
    from .evaluation import read_report_json
    from .pipeline import make_report

    reports = {}
    for path in args.reports:
        report = read_report_json(path)
        reports[report.task] = report
    for path in make_report(reports, args.out):
        log.info("[OK] wrote %s", path)
    return 0


def _cmd_run(args) -> int:
    from .pipeline import run_pipeline

    result = run_pipeline(_run_config(args), args.stages, force=args.force)
    log.info("[OK] provenance: %s", result.provenance)
    return result.status


def _cmd_fetch_weights(args) -> int:
    from .models import fetch_pretrained

    path = fetch_pretrained(args.out, args.url) if args.url else fetch_pretrained(args.out)
    log.info("[OK] backbone weights: %s", path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    from .tasks import TASKS

    parser = argparse.ArgumentParser(prog="mammo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="verbose logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="DICOM + clinical table -> PNGs and manifest")
    p.add_argument("--clinical", required=True, help="clinical table (.xlsx or .csv)")
    p.add_argument("--images", required=True, help="directory tree of DICOM files")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["png", "jpeg"], default="png")
    p.add_argument("--jpeg-quality", type=int, default=95)
    p.add_argument("--workers", type=int, default=4)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("preprocess", help="crop + resize every manifest image")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=DEFAULT_CROP_THRESHOLD)
    p.add_argument("--rows", type=int, default=TARGET_ROWS)
    p.add_argument("--cols", type=int, default=TARGET_COLS)
    p.add_argument("--derive-rows", action="store_true",
                   help="derive the row count from the mean cropped aspect ratio")
    p.add_argument("--workers", type=int, default=4)
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("split", help="hold-out + k-fold assignment")
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", choices=[t.value for t in SplitTask], required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--test-frac", type=float, default=0.10)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--reserve-from", default=None,
                   help="split file whose test patients must also be test here")
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("train", help="train one task on one fold")
    p.add_argument("--task", choices=sorted(TASKS), required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--config", default=None, help="run.toml")
    p.add_argument("--init", default=None, help="MLMC checkpoint (transfer task)")
    p.add_argument("--manifest", default=None)
    p.add_argument("--splits", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--epochs", type=int, default=None, help="override train.max_epochs")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="evaluate every fold on the test set")
    p.add_argument("--task", choices=sorted(TASKS), required=True)
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="report.json")
    p.add_argument("--positive-class", default="luminal")
    p.add_argument("--batch-size", type=int, default=16)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("gradcam", help="Grad-CAM overlay for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="class_name", required=True,
                   help="output class, e.g. calcification, mass, malignant")
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.4)
    p.set_defaults(func=_cmd_gradcam)

    p = sub.add_parser("report", help="comparison tables from evaluation reports")
    p.add_argument("reports", nargs="+", help="evaluation report JSON files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("run", help="run the pipeline from a run.toml")
    p.add_argument("--config", required=True)
    p.add_argument("--stages", nargs="+", choices=STAGES, default=None)
    p.add_argument("--force", action="store_true", help="ignore up-to-date stamps")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("fetch-weights", help="download + convert ImageNet backbone weights")
    p.add_argument("--out", default="weights")
    p.add_argument("--url", default=None)
    p.set_defaults(func=_cmd_fetch_weights)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure(logging.DEBUG if args.verbose else logging.INFO)
    try:
        return args.func(args)
    except ConfigInvalid as exc:
        log.error("Configuration error: %s", exc)
        return 2
    except MammoError as exc:
        log.error("%s", exc)
        return 1
