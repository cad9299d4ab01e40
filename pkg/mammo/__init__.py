"""mammo: luminal vs non-luminal subtype classification of full mammograms.

Pipeline: DICOM ingest, breast crop + resize, patient-disjoint splits, MLMC abnormality
pretraining, transfer to the luminal task, evaluation and Grad-CAM. Importing the
package does not import torch; the training modules do.
"""

from .config import RunConfig, load_run_config
from .errors import MammoError
from .manifest import DatasetManifest, MammogramRecord, read_manifest, write_manifest
from .tasks import TASKS, TaskSpec, get_task

__all__ = [
    "RunConfig", "load_run_config", "MammoError",
    "DatasetManifest", "MammogramRecord", "read_manifest", "write_manifest",
    "TASKS", "TaskSpec", "get_task",
]
