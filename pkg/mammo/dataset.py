"""Torch dataset over manifest records, with per-epoch, per-worker augmentation seeding."""

from __future__ import annotations

from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
from torch.utils.data import Dataset, get_worker_info

from .ingest import load_image
from .manifest import MammogramRecord
from .tasks import TaskSpec

Transform = Callable[[np.ndarray], np.ndarray]


class MammogramDataset(Dataset):
    """``(image, target)`` pairs for the records eligible for ``task``.

    Images are (rows, cols) float32 tensors in [0, 1]. Targets are a long class id for
    softmax tasks and a float 0/1 vector for sigmoid tasks. ``cache=True`` keeps decoded
    images in memory (augmentation still runs on every access).
    """

    def __init__(self, records: Sequence[MammogramRecord], task: TaskSpec,
                 transform: Optional[Transform] = None, cache: bool = False):
        self.task = task
        self.records: List[MammogramRecord] = [r for r in records if task.is_eligible(r)]
        self.transform = transform
        self.epoch = 0
        self._cache = {} if cache else None

    def __len__(self) -> int:
        return len(self.records)

    def _pixels(self, index: int) -> np.ndarray:
        if self._cache is not None and index in self._cache:
            return self._cache[index]
        pixels = load_image(self.records[index].image_path).pixels
        if self._cache is not None:
            self._cache[index] = pixels
        return pixels

    def __getitem__(self, index: int):
        pixels = self._pixels(index)
        if self.transform is not None:
            pixels = self.transform(pixels)
        x = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32))
        target = self.task.target(self.records[index])
        if isinstance(target, int):
            y = torch.tensor(target, dtype=torch.long)
        else:
            y = torch.tensor(target, dtype=torch.float32)
        return x, y

    def targets(self) -> List:
        return [self.task.target(r) for r in self.records]

    def sampler_labels(self) -> List[str]:
        return [self.task.sampler_label(r) for r in self.records]

    def set_epoch(self, epoch: int) -> None:
        """Select the augmentation stream for ``epoch``; the main process is worker 0."""
        self.epoch = epoch
        self.reseed_worker(0)

    def reseed_worker(self, worker_id: int) -> None:
        reseed = getattr(self.transform, "reseed", None)
        if reseed is not None:
            reseed(self.epoch, worker_id)


def worker_init_fn(worker_id: int) -> None:
    """DataLoader hook: each worker's copy of the dataset gets its own stream."""
    info = get_worker_info()
    if info is not None and isinstance(info.dataset, MammogramDataset):
        info.dataset.reseed_worker(worker_id)
