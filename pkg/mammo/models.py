"""Residual backbone, task heads, weight transfer and the checkpoint archive.

A checkpoint file is a ``torch.save`` archive of plain containers::

    {"format": "mammo-checkpoint", "version": 1,
     "backbone": {name: tensor}, "head": {name: tensor},
     "meta": "<json: task, fold, epoch, val_loss, config_hash, stage_blocks, ...>"}

so it loads with ``weights_only=True``. Backbone tensor names follow torchvision's
ResNet naming (``conv1.weight``, ``layer1.0.bn1.running_mean``, ...), which is what lets
the ImageNet weights load after dropping ``fc.*``.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn
from torchvision.models.resnet import BasicBlock, ResNet

from .const import RESNET18_IMAGENET_URL
from .errors import (IoFailure, MissingTensor, NonFiniteLoss, SchemaMismatch, ShapeMismatch,
                     TaskMismatch)
from .http import DownloadSession
from .ingest import ImageTensor
from .logging import get_logger
from .tasks import TaskKind, TaskSpec, get_task
from .util import PathLike, sha256_file

log = get_logger(__name__)

FEATURE_DIM = 512
CHECKPOINT_FORMAT = "mammo-checkpoint"
CHECKPOINT_VERSION = 1
RESNET18_BLOCKS: Tuple[int, int, int, int] = (2, 2, 2, 2)
# Task label of weights-only files produced by the converter.
IMAGENET_TASK = "imagenet"

_BUFFER_SUFFIXES = ("num_batches_tracked",)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


class Backbone(nn.Module):
    """ResNet trunk without its classifier; ``forward`` returns (n, 512) pooled features.

    Inputs may be (n, rows, cols), (n, 1, rows, cols) or (n, 3, rows, cols). Single
    channel input is replicated when the stem expects three channels.
    """

    def __init__(self, stage_blocks: Sequence[int] = RESNET18_BLOCKS, in_channels: int = 3):
        super().__init__()
        net = ResNet(BasicBlock, list(stage_blocks))
        self.stage_blocks = tuple(int(b) for b in stage_blocks)
        self.in_channels = in_channels
        self.conv1 = net.conv1
        if in_channels == 1:
            self.conv1 = nn.Conv2d(1, 64, kernel_size=7, stride=2, padding=3, bias=False)
            nn.init.kaiming_normal_(self.conv1.weight, mode="fan_out", nonlinearity="relu")
        self.bn1 = net.bn1
        self.relu = net.relu
        self.maxpool = net.maxpool
        self.layer1 = net.layer1
        self.layer2 = net.layer2
        self.layer3 = net.layer3
        self.layer4 = net.layer4
        self.avgpool = net.avgpool
        self.loaded_tensors = 0

    def _as_input(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        if x.dim() != 4 or x.shape[1] not in (1, 3):
            raise ShapeMismatch(f"expected (n, rows, cols) or (n, 1|3, rows, cols), got {tuple(x.shape)}")
        if x.shape[1] == 1 and self.in_channels == 3:
            x = x.expand(-1, 3, -1, -1)
        elif x.shape[1] != self.in_channels:
            raise ShapeMismatch(f"backbone takes {self.in_channels} channel(s), got {x.shape[1]}")
        return x

    def feature_maps(self, x: torch.Tensor) -> torch.Tensor:
        """Output of the final residual stage, (n, 512, h, w)."""
        x = self.maxpool(self.relu(self.bn1(self.conv1(self._as_input(x)))))
        return self.layer4(self.layer3(self.layer2(self.layer1(x))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.flatten(self.avgpool(self.feature_maps(x)), 1)


def _required_names(backbone: Backbone):
    return [n for n in backbone.state_dict() if not n.endswith(_BUFFER_SUFFIXES)]


def load_backbone_state(backbone: Backbone, state: Mapping[str, torch.Tensor]) -> int:
    """Copy ``state`` into ``backbone``; returns the number of tensors loaded.

    Every parameter and running statistic must be present with the right shape. A
    three-channel stem is summed over its input channels for a one-channel backbone.
    """
    expected = backbone.state_dict()
    state = dict(state)
    stem = state.get("conv1.weight")
    if stem is not None and backbone.in_channels == 1 and stem.dim() == 4 and stem.shape[1] == 3:
        state["conv1.weight"] = stem.sum(dim=1, keepdim=True)
    for name in _required_names(backbone):
        if name not in state:
            raise MissingTensor(f"pretrained weights lack tensor {name!r}")
        if tuple(state[name].shape) != tuple(expected[name].shape):
            raise ShapeMismatch(f"tensor {name!r}: expected {tuple(expected[name].shape)}, "
                                f"got {tuple(state[name].shape)}")
    extra = sorted(set(state) - set(expected))
    if extra:
        log.debug("Ignoring %d tensor(s) not in the backbone, e.g. %s", len(extra), extra[:3])
    backbone.load_state_dict({k: v for k, v in state.items() if k in expected}, strict=False)
    backbone.loaded_tensors = len(_required_names(backbone))
    return backbone.loaded_tensors


def build_backbone(pretrained_weights: Optional[PathLike] = None,
                   stage_blocks: Sequence[int] = RESNET18_BLOCKS, in_channels: int = 3,
                   seed: Optional[int] = None) -> Backbone:
    """Fresh backbone, optionally loaded from a converted checkpoint or a raw state dict."""
    if seed is not None:
        torch.manual_seed(seed)
    backbone = Backbone(stage_blocks, in_channels)
    if pretrained_weights is None:
        return backbone
    path = Path(pretrained_weights)
    if not path.exists():
        raise IoFailure(f"pretrained weights not found: {path}")
    archive = torch.load(path, map_location="cpu", weights_only=True)
    state = archive["backbone"] if _is_archive(archive) else _strip_classifier(archive)
    loaded = load_backbone_state(backbone, state)
    log.info("Loaded %d/%d backbone tensors from %s", loaded, len(_required_names(backbone)), path)
    return backbone


class MammoNet(nn.Module):
    """Backbone, optional dropout on the pooled features, and a linear head."""

    def __init__(self, backbone: Backbone, task: TaskSpec, dropout_p: Optional[float] = None):
        super().__init__()
        self.backbone = backbone
        self.task = task
        self.head_spec = task.head(dropout_p)
        self.dropout = nn.Dropout(self.head_spec.dropout_p)
        self.head = nn.Linear(FEATURE_DIM, self.head_spec.out_units)
        self.lineage: Dict[str, Any] = {}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.dropout(self.backbone(x)))

    def probabilities(self, logits: torch.Tensor) -> torch.Tensor:
        if self.task.is_multilabel:
            return torch.sigmoid(logits)
        return torch.softmax(logits, dim=1)


def init_head(head: nn.Linear, seed: int = 0) -> None:
    """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)), from a seeded generator."""
    gen = torch.Generator().manual_seed(int(seed))
    bound = 1.0 / math.sqrt(head.in_features)
    with torch.no_grad():
        head.weight.uniform_(-bound, bound, generator=gen)
        head.bias.uniform_(-bound, bound, generator=gen)


def attach_head(backbone: Union[Backbone, MammoNet], task: Union[str, TaskSpec],
                dropout_p: Optional[float] = None, seed: int = 0) -> MammoNet:
    """Put a fresh head for ``task`` on ``backbone``; an existing head is replaced."""
    if isinstance(backbone, MammoNet):
        backbone = backbone.backbone
    model = MammoNet(backbone, get_task(task), dropout_p)
    init_head(model.head, seed)
    return model


def forward(model: MammoNet, batch) -> torch.Tensor:
    """Logits for a batch of images: ImageTensors, arrays or a tensor shaped (n, rows, cols)."""
    if isinstance(batch, torch.Tensor):
        x = batch
    else:
        arrays = [b.pixels if isinstance(b, ImageTensor) else np.asarray(b) for b in batch]
        shapes = {a.shape for a in arrays}
        if len(shapes) != 1:
            raise ShapeMismatch(f"images in a batch must share one shape, got {sorted(shapes)}")
        x = torch.from_numpy(np.stack(arrays).astype(np.float32))
    if x.dim() != 3:
        raise ShapeMismatch(f"batch must be (n, rows, cols), got {tuple(x.shape)}")
    device = next(model.parameters()).device
    logits = model(x.to(device=device, dtype=torch.float32))
    if logits.shape != (x.shape[0], model.head_spec.out_units):
        raise ShapeMismatch(f"logits shaped {tuple(logits.shape)}")
    return logits


# --------------------------------------------------------------------------- #
# Checkpoints
# --------------------------------------------------------------------------- #
def _cpu_state(module: nn.Module) -> Dict[str, torch.Tensor]:
    return {k: v.detach().cpu().clone() for k, v in module.state_dict().items()}


@dataclass
class ModelCheckpoint:
    backbone: Dict[str, torch.Tensor]
    head: Dict[str, torch.Tensor]
    task: str
    fold: int = -1
    epoch: int = -1
    val_loss: Optional[float] = None
    config_hash: str = ""
    stage_blocks: Tuple[int, ...] = RESNET18_BLOCKS
    in_channels: int = 3
    dropout_p: Optional[float] = None
    lineage: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.val_loss is not None and not math.isfinite(self.val_loss):
            raise NonFiniteLoss(f"checkpoint val_loss must be finite, got {self.val_loss}")

    @classmethod
    def from_model(cls, model: MammoNet, fold: int, epoch: int, val_loss: Optional[float],
                   config_hash: str = "") -> "ModelCheckpoint":
        return cls(
            backbone=_cpu_state(model.backbone),
            head=_cpu_state(model.head),
            task=model.task.name,
            fold=fold,
            epoch=epoch,
            val_loss=None if val_loss is None else float(val_loss),
            config_hash=config_hash,
            stage_blocks=model.backbone.stage_blocks,
            in_channels=model.backbone.in_channels,
            dropout_p=model.head_spec.dropout_p,
            lineage=dict(model.lineage),
        )

    @property
    def meta(self) -> Dict[str, Any]:
        return {
            "task": self.task, "fold": self.fold, "epoch": self.epoch,
            "val_loss": self.val_loss, "config_hash": self.config_hash,
            "stage_blocks": list(self.stage_blocks), "in_channels": self.in_channels,
            "dropout_p": self.dropout_p, "lineage": self.lineage,
        }


def _is_archive(obj) -> bool:
    return isinstance(obj, dict) and obj.get("format") == CHECKPOINT_FORMAT


def save_checkpoint(ckpt: ModelCheckpoint, path: PathLike) -> Path:
    path = Path(path)
    archive = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "backbone": ckpt.backbone,
        "head": ckpt.head,
        "meta": json.dumps(ckpt.meta, sort_keys=True),
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(archive, path)
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path: PathLike) -> ModelCheckpoint:
    path = Path(path)
    if not path.exists():
        raise IoFailure(f"checkpoint not found: {path}")
    archive = torch.load(path, map_location="cpu", weights_only=True)
    if not _is_archive(archive):
        raise SchemaMismatch(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    if archive.get("version") != CHECKPOINT_VERSION:
        raise SchemaMismatch(f"{path}: unsupported checkpoint version {archive.get('version')}")
    meta = json.loads(archive["meta"])
    return ModelCheckpoint(
        backbone=archive["backbone"],
        head=archive["head"],
        task=meta["task"],
        fold=int(meta["fold"]),
        epoch=int(meta["epoch"]),
        val_loss=meta["val_loss"],
        config_hash=meta.get("config_hash", ""),
        stage_blocks=tuple(meta.get("stage_blocks", RESNET18_BLOCKS)),
        in_channels=int(meta.get("in_channels", 3)),
        dropout_p=meta.get("dropout_p"),
        lineage=meta.get("lineage", {}),
    )


def model_from_checkpoint(ckpt: ModelCheckpoint) -> MammoNet:
    backbone = Backbone(ckpt.stage_blocks, ckpt.in_channels)
    load_backbone_state(backbone, ckpt.backbone)
    model = MammoNet(backbone, get_task(ckpt.task), ckpt.dropout_p)
    model.head.load_state_dict(ckpt.head)
    model.lineage = dict(ckpt.lineage)
    return model


def transfer_weights(src: ModelCheckpoint, dst_task: Union[str, TaskSpec] = TaskKind.TRANSFER_LUMINAL,
                     dropout_p: Optional[float] = None, seed: int = 0) -> MammoNet:
    """Initialize a luminal model from an MLMC checkpoint: backbone copied, head fresh (512 -> 2)."""
    if src.task != TaskKind.MLMC.value:
        raise TaskMismatch(f"transfer needs an MLMC source checkpoint, got task {src.task!r}")
    backbone = Backbone(src.stage_blocks, src.in_channels)
    load_backbone_state(backbone, {k: v.clone() for k, v in src.backbone.items()})
    model = attach_head(backbone, dst_task, dropout_p, seed)
    for p in model.parameters():
        p.requires_grad_(True)
    model.lineage = {"source_task": src.task, "source_fold": src.fold,
                     "source_epoch": src.epoch, "source_config_hash": src.config_hash}
    return model


# --------------------------------------------------------------------------- #
# Pretrained weights
# --------------------------------------------------------------------------- #
def _strip_classifier(state: Mapping[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    return {k: v for k, v in state.items() if not k.startswith("fc.")}


def convert_torchvision_weights(src: PathLike, dst: PathLike) -> Path:
    """Turn a torchvision ResNet state dict into a backbone-only checkpoint archive."""
    state = torch.load(Path(src), map_location="cpu", weights_only=True)
    if not isinstance(state, dict):
        raise SchemaMismatch(f"{src}: expected a state dict")
    backbone = _strip_classifier(state)
    load_backbone_state(Backbone(), backbone)
    ckpt = ModelCheckpoint(backbone=backbone, head={}, task=IMAGENET_TASK,
                           lineage={"source": Path(src).name})
    path = save_checkpoint(ckpt, dst)
    log.info("Converted %s -> %s (%d tensors)", src, path, len(backbone))
    return path


_HASH_PREFIX = re.compile(r"-([0-9a-f]{6,})\.pth?$")


def fetch_pretrained(dest_dir: PathLike, url: str = RESNET18_IMAGENET_URL,
                     session: Optional[DownloadSession] = None) -> Path:
    """Download the ImageNet weights (unless cached), check the hash prefix, convert."""
    dest_dir = Path(dest_dir)
    raw = dest_dir / url.rsplit("/", 1)[-1]
    converted = dest_dir / (raw.stem + ".backbone.pt")
    if converted.exists():
        log.info("Pretrained backbone already present: %s", converted)
        return converted
    if not raw.exists():
        (session or DownloadSession()).download(url, raw)
    match = _HASH_PREFIX.search(raw.name)
    if match and not sha256_file(raw).startswith(match.group(1)):
        raise IoFailure(f"{raw}: SHA-256 does not start with {match.group(1)}")
    return convert_torchvision_weights(raw, converted)
