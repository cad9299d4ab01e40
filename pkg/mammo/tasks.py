"""The five classification tasks: head geometry, loss, targets and per-task defaults.

Kept free of torch so configuration validation can import it cheaply.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional, Tuple, Union

from .const import LUMINAL_CLASSES, MLMC_UNITS, SplitTask
from .errors import ConfigInvalid, InvalidClass
from .manifest import MammogramRecord

Target = Union[int, Tuple[float, ...]]


class TaskKind(str, Enum):
    BASELINE_LUMINAL = "baseline"
    TRANSFER_LUMINAL = "transfer"
    MASS_VS_CALC = "mass-calc"
    BENIGN_VS_MALIGNANT = "benign-malignant"
    MLMC = "mlmc"


class LossKind(str, Enum):
    CROSS_ENTROPY = "cross_entropy"
    BINARY_CROSS_ENTROPY = "binary_cross_entropy"


class Activation(str, Enum):
    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"


@dataclass(frozen=True)
class ReportedClass:
    """A class row in the evaluation table.

    For softmax heads ``unit`` is the class id. For sigmoid heads it is the output unit
    and ``positive`` says whether the class is the unit firing (True) or its complement
    (False, e.g. benign on the malignancy unit).
    """

    name: str
    unit: int
    positive: bool = True


@dataclass(frozen=True)
class HeadSpec:
    task: "TaskSpec"
    out_units: int
    activation: Activation
    dropout_p: float

    def __post_init__(self):
        if self.out_units not in (2, 3):
            raise ConfigInvalid(f"head must have 2 or 3 units, got {self.out_units}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigInvalid(f"dropout_p must be in [0, 1), got {self.dropout_p}")


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind
    loss: LossKind
    class_names: Tuple[str, ...]
    reported: Tuple[ReportedClass, ...]
    split_task: SplitTask
    lr: float
    dropout_p: float = 0.0
    weighted_sampler: bool = False
    requires_init: bool = False
    auc_positive: Optional[str] = None

    @property
    def name(self) -> str:
        return self.kind.value

    @property
    def out_units(self) -> int:
        return len(self.class_names)

    @property
    def activation(self) -> Activation:
        if self.loss is LossKind.CROSS_ENTROPY:
            return Activation.SOFTMAX
        return Activation.SIGMOID

    @property
    def is_multilabel(self) -> bool:
        return self.activation is Activation.SIGMOID

    @property
    def is_luminal(self) -> bool:
        return self.split_task is SplitTask.SUBTYPE

    def head(self, dropout_p: Optional[float] = None) -> HeadSpec:
        p = self.dropout_p if dropout_p is None else dropout_p
        return HeadSpec(task=self, out_units=self.out_units, activation=self.activation,
                        dropout_p=p)

    def unit_index(self, class_name: str) -> int:
        """Output unit for ``class_name`` (Grad-CAM target selection)."""
        for reported in self.reported:
            if reported.name == class_name and reported.positive:
                return reported.unit
        raise InvalidClass(f"{class_name!r} is not an output of task {self.name}; "
                           f"choose from {list(self.class_names)}")

    def is_eligible(self, record: MammogramRecord) -> bool:
        if self.is_luminal:
            return record.is_subtype_labeled
        return record.has_calcification or record.has_mass

    def target(self, record: MammogramRecord) -> Target:
        """Training target: a class id for softmax heads, a 0/1 vector for sigmoid heads."""
        kind = self.kind
        if kind in (TaskKind.BASELINE_LUMINAL, TaskKind.TRANSFER_LUMINAL):
            return 0 if record.is_luminal else 1
        if kind is TaskKind.BENIGN_VS_MALIGNANT:
            return 1 if record.is_malignant else 0
        if kind is TaskKind.MASS_VS_CALC:
            return (float(record.has_calcification), float(record.has_mass))
        return (float(record.has_calcification), float(record.has_mass),
                float(record.is_malignant))

    def sampler_label(self, record: MammogramRecord) -> str:
        """Class key for weighted sampling: the class name, or the record's stratum."""
        target = self.target(record)
        if isinstance(target, int):
            return self.class_names[target]
        return f"{record.finding}/{record.pathology.value.lower()}"


_LUMINAL_REPORTED = (ReportedClass("luminal", 0), ReportedClass("non_luminal", 1))

TASKS: Dict[str, TaskSpec] = {
    spec.name: spec for spec in (
        TaskSpec(kind=TaskKind.BASELINE_LUMINAL, loss=LossKind.CROSS_ENTROPY,
                 class_names=LUMINAL_CLASSES, reported=_LUMINAL_REPORTED,
                 split_task=SplitTask.SUBTYPE, lr=1e-5, dropout_p=0.3,
                 weighted_sampler=True, auc_positive="luminal"),
        TaskSpec(kind=TaskKind.TRANSFER_LUMINAL, loss=LossKind.CROSS_ENTROPY,
                 class_names=LUMINAL_CLASSES, reported=_LUMINAL_REPORTED,
                 split_task=SplitTask.SUBTYPE, lr=1e-5, dropout_p=0.3,
                 weighted_sampler=True, requires_init=True, auc_positive="luminal"),
        TaskSpec(kind=TaskKind.MASS_VS_CALC, loss=LossKind.BINARY_CROSS_ENTROPY,
                 class_names=("calcification", "mass"),
                 reported=(ReportedClass("calcification", 0), ReportedClass("mass", 1)),
                 split_task=SplitTask.ABNORMALITY, lr=1e-4),
        TaskSpec(kind=TaskKind.BENIGN_VS_MALIGNANT, loss=LossKind.CROSS_ENTROPY,
                 class_names=("benign", "malignant"),
                 reported=(ReportedClass("benign", 0), ReportedClass("malignant", 1)),
                 split_task=SplitTask.ABNORMALITY, lr=1e-4, auc_positive="malignant"),
        TaskSpec(kind=TaskKind.MLMC, loss=LossKind.BINARY_CROSS_ENTROPY,
                 class_names=MLMC_UNITS,
                 reported=(ReportedClass("calcification", 0), ReportedClass("mass", 1),
                           ReportedClass("benign", 2, positive=False),
                           ReportedClass("malignant", 2)),
                 split_task=SplitTask.ABNORMALITY, lr=1e-4),
    )
}


def get_task(name: Union[str, TaskKind, TaskSpec]) -> TaskSpec:
    if isinstance(name, TaskSpec):
        return name
    key = name.value if isinstance(name, TaskKind) else str(name)
    try:
        return TASKS[key]
    except KeyError:
        raise ConfigInvalid(f"unknown task {key!r}; choose from {sorted(TASKS)}") from None
