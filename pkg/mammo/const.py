"""Fixed vocabularies and constants shared across the pipeline."""

from __future__ import annotations

from enum import Enum
from typing import Tuple


class Laterality(str, Enum):
    LEFT = "Left"
    RIGHT = "Right"


class View(str, Enum):
    CC = "CC"
    MLO = "MLO"


class Pathology(str, Enum):
    BENIGN = "Benign"
    MALIGNANT = "Malignant"


class Subtype(str, Enum):
    LUMINAL_A = "LuminalA"
    LUMINAL_B = "LuminalB"
    HER2 = "HER2"
    TRIPLE_NEGATIVE = "TripleNegative"
    UNLABELED = "Unlabeled"

    @property
    def is_luminal(self) -> bool:
        return self in (Subtype.LUMINAL_A, Subtype.LUMINAL_B)


class SplitTask(str, Enum):
    """Which label set a split is stratified on."""

    ABNORMALITY = "abnormality"
    SUBTYPE = "subtype"


class ImageFormat(str, Enum):
    PNG = "png"
    JPEG = "jpeg"


# Training resolution (rows x cols) for every task.
TARGET_ROWS = 1326
TARGET_COLS = 512

# Background cutoff on the windowed [0, 1] image.
DEFAULT_CROP_THRESHOLD = 2 / 255

MANIFEST_SCHEMA_VERSION = 1

# Manifest CSV header, in column order.
MANIFEST_COLUMNS: Tuple[str, ...] = (
    "image_id", "patient_id", "laterality", "view", "age",
    "calcification", "mass", "pathology", "subtype", "path",
)

SPLIT_COLUMNS: Tuple[str, ...] = ("image_id", "role")

LUMINAL_CLASSES: Tuple[str, ...] = ("luminal", "non_luminal")
MLMC_UNITS: Tuple[str, ...] = ("calcification", "mass", "malignant")

# torchvision's ImageNet weights for the 18-layer residual network.
RESNET18_IMAGENET_URL = "https://download.pytorch.org/models/resnet18-f37072fd.pth"

# Pipeline stages, in dependency order.
STAGES: Tuple[str, ...] = ("ingest", "preprocess", "split", "train", "evaluate", "gradcam",
                           "report")
