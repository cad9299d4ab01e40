"""Run configuration loading and the task table."""

from __future__ import annotations

import pytest

from mammo.config import (DATA_ROOT_ENV, AugmentConfig, RunConfig, TrainConfig, config_hash,
                          load_run_config, run_config_from_dict)
from mammo.const import Pathology, SplitTask, Subtype
from mammo.errors import ConfigInvalid, InvalidClass
from mammo.tasks import TASKS, Activation, LossKind, get_task
from mammo.util import derive_seed, stable_hash

_TOML = """
seed = 7
tasks = ["mlmc", "transfer"]

[paths]
data_root = "/data"
clinical = "clinical.xlsx"
images = "dicom"
output = "runs/x"

[train]
max_epochs = 3
stage_blocks = [1, 1, 1, 1]

[augment]
p_augmix = 0.5
augmix_depth_range = [1, 2]
"""


def test_defaults_are_valid():
    config = RunConfig()
    assert config.tasks == ("mlmc", "baseline", "transfer")
    assert config.train.augment == config.augment
    assert config.augment.p_hflip == 0.5 and config.augment.p_histeq == 0.4


def test_load_toml(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(_TOML, encoding="utf-8")
    config = load_run_config(path, env={})
    assert config.seed == 7
    assert config.tasks == ("mlmc", "transfer")
    assert config.train.max_epochs == 3
    assert config.train.stage_blocks == (1, 1, 1, 1)
    assert config.augment.augmix_depth_range == (1, 2)
    assert config.train.augment.p_augmix == 0.5
    assert str(config.paths.clinical_path).replace("\\", "/") == "/data/clinical.xlsx"


def test_data_root_env_override(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(_TOML, encoding="utf-8")
    config = load_run_config(path, env={DATA_ROOT_ENV: str(tmp_path)})
    assert config.paths.images_path == tmp_path / "dicom"


@pytest.mark.parametrize("text", [
    "unknown_key = 1\n",
    "[train]\nmax_epochs = -1\n",
    "[train]\nbogus = 1\n",
    "[augment]\np_erase = 2.0\n",
    "tasks = [\"transfer\"]\n",
    "tasks = [\"nope\"]\n",
    "this is not toml",
])
def test_invalid_configs(tmp_path, text):
    path = tmp_path / "run.toml"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(ConfigInvalid):
        load_run_config(path, env={})


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigInvalid):
        load_run_config(tmp_path / "absent.toml")


def test_config_hash_tracks_content():
    a = run_config_from_dict({"seed": 1}, env={})
    b = run_config_from_dict({"seed": 1}, env={})
    c = run_config_from_dict({"seed": 2}, env={})
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(c)
    assert stable_hash({"x": 1, "y": 2}) == stable_hash({"y": 2, "x": 1})


def test_train_augment_mirrors_top_level():
    config = RunConfig(augment=AugmentConfig(p_erase=0.0), train=TrainConfig(max_epochs=1))
    assert config.train.augment.p_erase == 0.0


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(2023, "split", "subtype") == derive_seed(2023, "split", "subtype")
    assert derive_seed(2023, "split", "subtype") != derive_seed(2023, "split", "abnormality")
    assert derive_seed(1, "train", 0) != derive_seed(1, "train", 1)


def test_task_table():
    assert sorted(TASKS) == ["baseline", "benign-malignant", "mass-calc", "mlmc", "transfer"]
    mlmc = get_task("mlmc")
    assert mlmc.out_units == 3 and mlmc.activation is Activation.SIGMOID
    assert mlmc.loss is LossKind.BINARY_CROSS_ENTROPY
    assert [r.name for r in mlmc.reported] == ["calcification", "mass", "benign", "malignant"]
    baseline = get_task("baseline")
    assert baseline.out_units == 2 and baseline.activation is Activation.SOFTMAX
    assert baseline.split_task is SplitTask.SUBTYPE and baseline.weighted_sampler
    assert get_task("transfer").requires_init
    assert get_task("mass-calc").is_multilabel


def test_targets(record_factory):
    luminal = record_factory("a", subtype=Subtype.LUMINAL_A, calcification=True)
    her2 = record_factory("b", subtype=Subtype.HER2, mass=True)
    benign = record_factory("c", pathology=Pathology.BENIGN)
    assert get_task("baseline").target(luminal) == 0
    assert get_task("baseline").target(her2) == 1
    assert get_task("mlmc").target(luminal) == (1.0, 1.0, 1.0)
    assert get_task("mlmc").target(benign) == (0.0, 1.0, 0.0)
    assert get_task("benign-malignant").target(benign) == 0
    assert get_task("mass-calc").target(benign) == (0.0, 1.0)
    assert not get_task("baseline").is_eligible(benign)
    assert get_task("mlmc").is_eligible(benign)
    assert get_task("baseline").sampler_label(her2) == "non_luminal"


def test_unit_index_and_unknown_names():
    assert get_task("mlmc").unit_index("malignant") == 2
    assert get_task("baseline").unit_index("non_luminal") == 1
    with pytest.raises(InvalidClass):
        get_task("mlmc").unit_index("luminal")
    with pytest.raises(ConfigInvalid):
        get_task("imagenet")


def test_head_rejects_bad_dropout():
    with pytest.raises(ConfigInvalid):
        get_task("baseline").head(1.0)
    assert get_task("baseline").head().dropout_p == 0.3
