"""Run configuration: immutable settings per stage plus the TOML loader.

Every knob has a default so ``RunConfig()`` is a valid (if path-less) configuration.
Override per run by writing a ``run.toml`` whose sections mirror the dataclasses below::

    seed = 2023
    tasks = ["mlmc", "baseline", "transfer"]

    [paths]
    data_root = "/data/cmmd"
    clinical = "CMMD_clinicaldata_revision.xlsx"
    images = "CMMD"
    output = "runs/cmmd"

    [train]
    max_epochs = 100

    [augment]
    p_augmix = 0.2
"""

from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from .const import DEFAULT_CROP_THRESHOLD, TARGET_COLS, TARGET_ROWS, ImageFormat
from .errors import ConfigInvalid
from .util import PathLike, stable_hash

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

DATA_ROOT_ENV = "MAMMO_DATA_ROOT"

AUGMIX_OPS: Tuple[str, ...] = (
    "shear_x", "shear_y", "translate_x", "translate_y", "rotate",
    "posterize", "autocontrast", "equalize",
)


def _check(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigInvalid(message)


def _check_range(name: str, bounds: Tuple[float, float]) -> None:
    _check(len(bounds) == 2 and 0 < bounds[0] <= bounds[1],
           f"{name} must be a non-empty positive range, got {bounds}")


@dataclass(frozen=True)
class AugmentConfig:
    """Training-time augmentation probabilities and shapes."""

    p_hflip: float = 0.5
    p_augmix: float = 0.2
    p_histeq: float = 0.4
    p_erase: float = 0.1
    augmix_severity: int = 3
    augmix_width: int = 3
    augmix_depth_range: Tuple[int, int] = (1, 3)
    augmix_ops: Tuple[str, ...] = AUGMIX_OPS
    erase_area_range: Tuple[float, float] = (0.02, 0.33)
    erase_aspect_range: Tuple[float, float] = (0.3, 3.3)
    erase_value: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("p_hflip", "p_augmix", "p_histeq", "p_erase"):
            p = getattr(self, name)
            _check(0.0 <= p <= 1.0, f"augment.{name} must be in [0, 1], got {p}")
        _check(self.augmix_severity >= 1, "augment.augmix_severity must be >= 1")
        _check(self.augmix_width >= 1, "augment.augmix_width must be >= 1")
        _check_range("augment.augmix_depth_range", self.augmix_depth_range)
        _check_range("augment.erase_area_range", self.erase_area_range)
        _check(self.erase_area_range[1] <= 1.0, "augment.erase_area_range must be <= 1")
        _check_range("augment.erase_aspect_range", self.erase_aspect_range)
        _check(len(self.augmix_ops) > 0, "augment.augmix_ops must not be empty")
        unknown = sorted(set(self.augmix_ops) - set(AUGMIX_OPS) - {"identity"})
        _check(not unknown, f"augment.augmix_ops: unknown op(s) {unknown}")

    @classmethod
    def disabled(cls, **overrides) -> "AugmentConfig":
        """All probabilities zero unless overridden; with none overridden the transform is the identity."""
        params = dict(p_hflip=0.0, p_augmix=0.0, p_histeq=0.0, p_erase=0.0)
        params.update(overrides)
        return cls(**params)


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings. ``None`` means "use the task's default" (see mammo.tasks)."""

    batch_size: int = 16
    lr: Optional[float] = None
    weight_decay: float = 5e-3
    patience: int = 10
    max_epochs: int = 100
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    use_weighted_sampler: Optional[bool] = None
    dropout_p: Optional[float] = None
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    num_workers: int = 0
    device: str = "auto"
    stage_blocks: Tuple[int, int, int, int] = (2, 2, 2, 2)
    in_channels: int = 3
    pretrained_weights: Optional[str] = None

    def __post_init__(self):
        _check(self.batch_size >= 1, "train.batch_size must be >= 1")
        _check(self.lr is None or self.lr > 0, "train.lr must be > 0")
        _check(self.weight_decay >= 0, "train.weight_decay must be >= 0")
        _check(self.patience >= 1, "train.patience must be >= 1")
        _check(self.max_epochs >= 0, "train.max_epochs must be >= 0")
        _check(self.dropout_p is None or 0 <= self.dropout_p < 1,
               "train.dropout_p must be in [0, 1)")
        _check(self.in_channels in (1, 3), "train.in_channels must be 1 or 3")
        _check(len(self.stage_blocks) == 4 and min(self.stage_blocks) >= 1,
               "train.stage_blocks must be four positive block counts")


@dataclass(frozen=True)
class IngestConfig:
    format: str = ImageFormat.PNG.value
    jpeg_quality: int = 95
    workers: int = 4

    def __post_init__(self):
        _check(self.format in {f.value for f in ImageFormat},
               f"ingest.format must be png or jpeg, got {self.format!r}")
        _check(1 <= self.jpeg_quality <= 100, "ingest.jpeg_quality must be in [1, 100]")
        _check(self.workers >= 1, "ingest.workers must be >= 1")


@dataclass(frozen=True)
class PreprocessConfig:
    threshold: float = DEFAULT_CROP_THRESHOLD
    rows: int = TARGET_ROWS
    cols: int = TARGET_COLS
    derive_rows_from_aspect: bool = False
    workers: int = 4

    def __post_init__(self):
        _check(0.0 <= self.threshold <= 1.0, "preprocess.threshold must be in [0, 1]")
        _check(self.rows >= 1 and self.cols >= 1, "preprocess.rows/cols must be >= 1")
        _check(self.workers >= 1, "preprocess.workers must be >= 1")


@dataclass(frozen=True)
class SplitConfig:
    test_frac: float = 0.10
    folds: int = 5
    nest_subtype_test: bool = True

    def __post_init__(self):
        _check(0.0 < self.test_frac < 1.0, "split.test_frac must be in (0, 1)")
        _check(self.folds >= 2, "split.folds must be >= 2")


@dataclass(frozen=True)
class ReportConfig:
    positive_class: str = "luminal"
    gradcam_images: int = 4
    alpha: float = 0.4

    def __post_init__(self):
        _check(self.positive_class in ("luminal", "non_luminal"),
               "report.positive_class must be 'luminal' or 'non_luminal'")
        _check(0.0 <= self.alpha <= 1.0, "report.alpha must be in [0, 1]")


@dataclass(frozen=True)
class PathsConfig:
    data_root: str = "."
    clinical: str = ""
    images: str = ""
    output: str = "runs"
    manifest: str = ""
    pretrained: str = ""

    def _resolve(self, value: str) -> Optional[Path]:
        if not value:
            return None
        path = Path(value)
        return path if path.is_absolute() else Path(self.data_root) / path

    @property
    def clinical_path(self) -> Optional[Path]:
        return self._resolve(self.clinical)

    @property
    def images_path(self) -> Optional[Path]:
        return self._resolve(self.images)

    @property
    def pretrained_path(self) -> Optional[Path]:
        return self._resolve(self.pretrained)

    @property
    def manifest_path(self) -> Optional[Path]:
        return Path(self.manifest) if self.manifest else None

    @property
    def output_path(self) -> Path:
        return Path(self.output)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 2023
    tasks: Tuple[str, ...] = ("mlmc", "baseline", "transfer")
    parallel_folds: bool = False
    paths: PathsConfig = field(default_factory=PathsConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    def __post_init__(self):
        from .tasks import TASKS  # local: tasks imports torch-free modules only

        unknown = [t for t in self.tasks if t not in TASKS]
        _check(not unknown, f"unknown task(s): {unknown}; choose from {sorted(TASKS)}")
        if "transfer" in self.tasks:
            _check("mlmc" in self.tasks, "task 'transfer' needs 'mlmc' in tasks")
        # The train section's augment block always mirrors the top-level one.
        if self.train.augment != self.augment:
            object.__setattr__(self, "train", dataclasses.replace(self.train, augment=self.augment))

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def config_hash(config: Any) -> str:
    """SHA-256 of the canonical JSON form; stable under key reordering."""
    data = dataclasses.asdict(config) if dataclasses.is_dataclass(config) else config
    return stable_hash(data)


_SECTIONS = {
    "paths": PathsConfig,
    "ingest": IngestConfig,
    "preprocess": PreprocessConfig,
    "split": SplitConfig,
    "augment": AugmentConfig,
    "train": TrainConfig,
    "report": ReportConfig,
}


def _build(cls, data: Mapping[str, Any], section: str):
    if not isinstance(data, Mapping):
        raise ConfigInvalid(f"[{section}] must be a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigInvalid(f"unknown key(s) in [{section}]: {unknown}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default
        if default is dataclasses.MISSING and known[name].default_factory is not dataclasses.MISSING:
            default = known[name].default_factory()
        if dataclasses.is_dataclass(default) and isinstance(value, Mapping):
            value = _build(type(default), value, f"{section}.{name}")
        elif isinstance(default, tuple) and isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigInvalid(f"[{section}]: {exc}") from exc


def run_config_from_dict(data: Mapping[str, Any],
                         env: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Build a :class:`RunConfig` from parsed TOML, applying the data-root env override."""
    env = os.environ if env is None else env
    data = dict(data)
    sections = {}
    for name, cls in _SECTIONS.items():
        sections[name] = _build(cls, data.pop(name, {}), name)
    if env.get(DATA_ROOT_ENV):
        sections["paths"] = dataclasses.replace(sections["paths"], data_root=env[DATA_ROOT_ENV])
    top = {}
    for key in ("seed", "tasks", "parallel_folds"):
        if key in data:
            value = data.pop(key)
            top[key] = tuple(value) if key == "tasks" else value
    if data:
        raise ConfigInvalid(f"unknown top-level key(s): {sorted(data)}")
    sections["train"] = dataclasses.replace(sections["train"], augment=sections["augment"])
    return RunConfig(**top, **sections)


def load_run_config(path: PathLike, env: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Parse a TOML run configuration; any problem surfaces as :class:`ConfigInvalid`."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigInvalid(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigInvalid(f"cannot parse {path}: {exc}") from exc
    return run_config_from_dict(data, env=env)
