"""Stage orchestration, resumption and the command-line entry point."""

from __future__ import annotations

import json

import pytest

from mammo.cli import main
from mammo.config import (AugmentConfig, IngestConfig, PathsConfig, PreprocessConfig,
                          ReportConfig, RunConfig, SplitConfig, TrainConfig)
from mammo.const import SplitTask
from mammo.errors import ConfigInvalid, StageFailed
from mammo.evaluation import read_report_json
from mammo.manifest import read_manifest, write_manifest
from mammo.pipeline import Pipeline, Workspace, run_pipeline
from mammo.splits import read_splits, verify_no_leakage

TINY = (1, 1, 1, 1)


def _smoke_config(tmp_path, clinical, images, **overrides) -> RunConfig:
    params = dict(
        seed=1,
        tasks=("mlmc", "baseline", "transfer"),
        paths=PathsConfig(data_root=str(tmp_path), clinical=str(clinical), images=str(images),
                          output=str(tmp_path / "run")),
        ingest=IngestConfig(workers=1),
        preprocess=PreprocessConfig(rows=64, cols=32, workers=1),
        split=SplitConfig(test_frac=0.2, folds=2),
        augment=AugmentConfig.disabled(),
        train=TrainConfig(batch_size=4, lr=1e-3, max_epochs=1, stage_blocks=TINY, device="cpu"),
        report=ReportConfig(gradcam_images=1),
    )
    params.update(overrides)
    return RunConfig(**params)


def _manifest_config(tmp_path, manifest_path, **overrides) -> RunConfig:
    return RunConfig(paths=PathsConfig(manifest=str(manifest_path), output=str(tmp_path / "run")),
                     **overrides)


def test_full_run_then_resume(tmp_path, dicom_cohort):
    clinical, images = dicom_cohort
    config = _smoke_config(tmp_path, clinical, images)
    result = run_pipeline(config)
    assert result.status == 0
    assert all(r.status == "ran" for r in result.stages.values())

    ws = Workspace(tmp_path / "run")
    manifest = read_manifest(ws.preprocess_dir / "manifest.csv")
    assert len(manifest) == 36
    subtype = read_splits(ws.split_file(SplitTask.SUBTYPE))
    abnormality = read_splits(ws.split_file(SplitTask.ABNORMALITY))
    assert verify_no_leakage(subtype, manifest) == []
    assert verify_no_leakage(abnormality, manifest) == []
    # subtype test patients are never used to pretrain the abnormality model
    by_id = manifest.by_id
    subtype_test = {by_id[i].patient_id for i in subtype.test_ids}
    assert subtype_test <= {by_id[i].patient_id for i in abnormality.test_ids}
    assert subtype.meta["eligible"]["total"] == 24 and subtype.meta["eligible"]["luminal"] == 12
    assert abnormality.meta["eligible"]["total"] == 36

    for task in ("mlmc", "baseline", "transfer"):
        for k in range(2):
            assert ws.checkpoint(task, k).exists()
        report = read_report_json(ws.eval_report(task))
        assert len(report.folds) == 2
    assert list(ws.gradcam_dir("mlmc").glob("*.png"))
    text = (ws.report_dir / "report.txt").read_text(encoding="utf-8")
    assert "Baseline versus transfer learning" in text and "Abnormality classifiers" in text

    provenance = json.loads(ws.provenance.read_text(encoding="utf-8"))
    assert provenance["status"] == 0 and provenance["root_seed"] == 1
    assert "split/subtype" in provenance["seeds"]

    again = run_pipeline(config)
    assert all(r.status == "skipped" for r in again.stages.values())


def test_split_only_from_existing_manifest(tmp_path, png_cohort, luminal_records):
    manifest = png_cohort(luminal_records(30))
    path = write_manifest(manifest, tmp_path / "data" / "manifest.csv")
    config = _manifest_config(tmp_path, path, tasks=("baseline",))
    result = Pipeline(config, ["split"]).run()
    assert result.status == 0
    ws = Workspace(tmp_path / "run")
    assert ws.split_file(SplitTask.SUBTYPE).exists()
    assert not ws.split_file(SplitTask.ABNORMALITY).exists()


def test_missing_manifest_is_a_config_error(tmp_path):
    config = _manifest_config(tmp_path, tmp_path / "absent.csv", tasks=("baseline",))
    with pytest.raises(ConfigInvalid):
        run_pipeline(config, ["split"])


def test_missing_image_file_is_a_config_error(tmp_path, png_cohort, luminal_records):
    manifest = png_cohort(luminal_records(10))
    path = write_manifest(manifest, tmp_path / "manifest.csv")
    manifest.records[3].image_path.unlink()
    with pytest.raises(ConfigInvalid):
        run_pipeline(_manifest_config(tmp_path, path, tasks=("baseline",)), ["split"])
    assert main(["split", "--manifest", str(path), "--task", "subtype", "--seed", "0",
                 "--out", str(tmp_path / "s.csv")]) == 1


def test_train_without_splits_is_a_config_error(tmp_path, png_cohort, luminal_records):
    path = write_manifest(png_cohort(luminal_records(10)), tmp_path / "manifest.csv")
    with pytest.raises(ConfigInvalid):
        run_pipeline(_manifest_config(tmp_path, path, tasks=("baseline",)), ["train"])


def test_unknown_stage_is_rejected():
    with pytest.raises(ConfigInvalid):
        Pipeline(RunConfig(), ["deploy"])


def test_failing_stage_is_recorded(tmp_path, png_cohort, luminal_records):
    # two patients per class cannot fill five folds
    path = write_manifest(png_cohort(luminal_records(4)), tmp_path / "manifest.csv")
    config = _manifest_config(tmp_path, path, tasks=("baseline",))
    with pytest.raises(StageFailed) as info:
        run_pipeline(config, ["split"])
    assert info.value.stage == "split"
    provenance = json.loads(Workspace(tmp_path / "run").provenance.read_text(encoding="utf-8"))
    assert provenance["status"] == 1
    assert provenance["stages"]["split"]["status"] == "failed"


def _write_toml(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_cli_exit_codes(tmp_path, png_cohort, luminal_records):
    manifest_path = write_manifest(png_cohort(luminal_records(4)), tmp_path / "manifest.csv")
    output = (tmp_path / "run").as_posix()
    missing = _write_toml(tmp_path / "missing.toml",
                          f'tasks = ["baseline"]\n[paths]\n'
                          f'manifest = "{(tmp_path / "x.csv").as_posix()}"\n')
    assert main(["run", "--config", missing]) == 2
    bad = _write_toml(tmp_path / "bad.toml", 'tasks = ["nope"]\n')
    assert main(["run", "--config", bad]) == 2

    failing = _write_toml(tmp_path / "fail.toml",
                          f'tasks = ["baseline"]\n[paths]\n'
                          f'manifest = "{manifest_path.as_posix()}"\noutput = "{output}"\n')
    assert main(["run", "--config", failing, "--stages", "split"]) == 1


def test_cli_split(tmp_path, png_cohort, luminal_records):
    manifest = png_cohort(luminal_records(30))
    path = write_manifest(manifest, tmp_path / "manifest.csv")
    out = tmp_path / "splits" / "subtype.csv"
    assert main(["split", "--manifest", str(path), "--task", "subtype", "--seed", "3",
                 "--out", str(out)]) == 0
    assignment = read_splits(out)
    assert assignment.seed == 3 and assignment.folds == 5
    assert verify_no_leakage(assignment, manifest) == []


def test_cli_gradcam_rejects_unknown_class(tmp_path, png_cohort, luminal_records):
    from mammo.models import ModelCheckpoint, attach_head, build_backbone, save_checkpoint

    manifest = png_cohort(luminal_records(1))
    model = attach_head(build_backbone(stage_blocks=TINY, seed=0), "baseline")
    ckpt = save_checkpoint(ModelCheckpoint.from_model(model, 0, 0, 0.5), tmp_path / "b.pt")
    image = str(next(iter(manifest)).image_path)
    out = tmp_path / "cam.png"
    assert main(["gradcam", "--ckpt", str(ckpt), "--image", image, "--class", "malignant",
                 "--out", str(out)]) == 1
    assert main(["gradcam", "--ckpt", str(ckpt), "--image", image, "--class", "luminal",
                 "--out", str(out)]) == 0
    assert out.exists()
