"""Training loop for one (task, fold): Adam, weighted sampling, early stopping.

The model kept is the one with the lowest validation loss. Validation runs without
augmentation and without sampler reweighting. Weight decay is Adam's built-in
(coupled) L2 term, i.e. the gradient of ``weight_decay / 2 * ||w||^2`` added to the loss
gradient.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, WeightedRandomSampler

from .augment import compose_train_transforms
from .config import TrainConfig
from .dataset import MammogramDataset, worker_init_fn
from .errors import (DivergedLoss, EmptyClass, EmptyManifest, IoFailure, NonFiniteLoss,
                     ShapeMismatch, SingleClass, TaskMismatch)
from .evaluation import fold_metrics, predict
from .logging import get_logger, log_context
from .manifest import DatasetManifest, records_for
from .models import (MammoNet, ModelCheckpoint, attach_head, build_backbone, save_checkpoint,
                     transfer_weights)
from .splits import SplitAssignment
from .tasks import LossKind, TaskSpec, get_task
from .util import PathLike, derive_seed

log = get_logger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_macro_f1", "val_auc", "seconds")


def select_device(name: str = "auto") -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


# --------------------------------------------------------------------------- #
# Sampling and losses
# --------------------------------------------------------------------------- #
def make_weighted_sampler(class_labels: Sequence, classes: Optional[Sequence] = None,
                          generator: Optional[torch.Generator] = None) -> WeightedRandomSampler:
    """Sample with replacement at weight 1 / count(class); one epoch = ``len(class_labels)`` draws.

    ``classes`` lists the classes that must be present (e.g. the task's class ids).
    """
    labels = list(class_labels)
    if not labels:
        raise EmptyClass("no samples to draw from")
    counts: Dict = {}
    for label in labels:
        counts[label] = counts.get(label, 0) + 1
    missing = [c for c in (classes or ()) if c not in counts]
    if missing:
        raise EmptyClass(f"class(es) without samples: {missing}")
    weights = torch.tensor([1.0 / counts[label] for label in labels], dtype=torch.double)
    return WeightedRandomSampler(weights, num_samples=len(labels), replacement=True,
                                 generator=generator)


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean of -log softmax(logits)[label]."""
    if logits.dim() != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= logits.shape[1]):
        raise ShapeMismatch(f"label out of range for {logits.shape[1]} classes")
    return F.cross_entropy(logits, labels.long())


def binary_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean over all units of -[t log s(z) + (1 - t) log(1 - s(z))]."""
    if logits.shape != targets.shape:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    return F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype))


def loss_for(task: TaskSpec) -> Callable[[torch.Tensor, torch.Tensor], torch.Tensor]:
    return cross_entropy if task.loss is LossKind.CROSS_ENTROPY else binary_cross_entropy


# --------------------------------------------------------------------------- #
# Early stopping and history
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class EarlyStopState:
    patience: int = 10
    best_val_loss: float = math.inf
    best_epoch: int = -1
    epochs_since_best: int = 0
    stopped: bool = False
    epoch: int = -1


def early_stopping_update(state: EarlyStopState, val_loss: float) -> EarlyStopState:
    """Record one epoch; only a strict improvement resets the counter."""
    if not math.isfinite(val_loss):
        raise NonFiniteLoss(f"validation loss is {val_loss}")
    epoch = state.epoch + 1
    if val_loss < state.best_val_loss:
        return dataclasses.replace(state, best_val_loss=float(val_loss), best_epoch=epoch,
                                   epochs_since_best=0, stopped=False, epoch=epoch)
    since = state.epochs_since_best + 1
    return dataclasses.replace(state, epochs_since_best=since, stopped=since > state.patience,
                               epoch=epoch)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_macro_f1: float
    val_auc: float
    seconds: float


@dataclass
class TrainHistory:
    task: str
    fold: int
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_checkpoint: Optional[str] = None

    @property
    def best_val_loss(self) -> float:
        return min((e.val_loss for e in self.epochs), default=math.nan)

    def train_losses(self) -> List[float]:
        return [e.train_loss for e in self.epochs]

    def to_csv(self, path: PathLike) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(HISTORY_COLUMNS)
                for e in self.epochs:
                    writer.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss),
                                     repr(e.val_macro_f1), repr(e.val_auc), f"{e.seconds:.3f}"])
        except OSError as exc:
            raise IoFailure(f"cannot write history {path}: {exc}") from exc
        return path


def read_history(path: PathLike, task: str = "", fold: int = -1) -> TrainHistory:
    history = TrainHistory(task=task, fold=fold)
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            history.epochs.append(EpochRecord(
                epoch=int(row["epoch"]), train_loss=float(row["train_loss"]),
                val_loss=float(row["val_loss"]), val_macro_f1=float(row["val_macro_f1"]),
                val_auc=float(row["val_auc"]), seconds=float(row["seconds"])))
    if history.epochs:
        history.best_epoch = min(history.epochs, key=lambda e: e.val_loss).epoch
    return history


# --------------------------------------------------------------------------- #
# train_task
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class TaskSettings:
    lr: float
    dropout_p: float
    use_weighted_sampler: bool


def resolve_settings(task: TaskSpec, config: TrainConfig) -> TaskSettings:
    """Fill the config's ``None`` fields from the task defaults."""
    return TaskSettings(
        lr=task.lr if config.lr is None else config.lr,
        dropout_p=task.dropout_p if config.dropout_p is None else config.dropout_p,
        use_weighted_sampler=(task.weighted_sampler if config.use_weighted_sampler is None
                              else config.use_weighted_sampler),
    )


def _initial_model(task: TaskSpec, config: TrainConfig, settings: TaskSettings,
                   init: Optional[ModelCheckpoint], seed: int) -> MammoNet:
    if task.requires_init:
        if init is None:
            raise ValueError(f"task {task.name} needs an initialization checkpoint")
        return transfer_weights(init, task, settings.dropout_p, seed)
    if init is not None:
        raise TaskMismatch(f"task {task.name} trains from the backbone weights; "
                           f"an initialization checkpoint is only accepted by transfer tasks")
    if config.pretrained_weights is None:
        log.warning("%s: no pretrained backbone weights configured; starting from random "
                    "initialization (set paths.pretrained or train.pretrained_weights)", task.name)
    backbone = build_backbone(config.pretrained_weights, config.stage_blocks,
                              config.in_channels, seed=seed)
    return attach_head(backbone, task, settings.dropout_p, seed)


def make_optimizer(model: MammoNet, lr: float, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=config.betas, eps=config.eps,
                            weight_decay=config.weight_decay)


def train_step(model: MammoNet, optimizer: torch.optim.Optimizer, loss_fn,
               x: torch.Tensor, y: torch.Tensor) -> float:
    """One optimizer update on ``(x, y)``; returns the loss before the update."""
    optimizer.zero_grad()
    loss = loss_fn(model(x), y)
    if not torch.isfinite(loss):
        raise DivergedLoss(f"training loss {float(loss)}")
    loss.backward()
    optimizer.step()
    return float(loss)


@torch.no_grad()
def _validate(model: MammoNet, loader: DataLoader, loss_fn, device) -> float:
    model.eval()
    total, count = 0.0, 0
    for x, y in loader:
        x, y = x.to(device), y.to(device)
        total += float(loss_fn(model(x), y)) * x.shape[0]
        count += x.shape[0]
    return total / count


def _val_scores(model, dataset, task, batch_size, device) -> Tuple[float, float]:
    probs, targets = predict(model, dataset, batch_size, device)
    try:
        metrics = fold_metrics(task, -1, probs, targets)
    except SingleClass:
        return math.nan, math.nan
    return metrics.macro_f1, metrics.auc


def train_task(task: Union[str, TaskSpec], fold: int, splits: SplitAssignment,
               manifest: DatasetManifest, config: TrainConfig,
               init: Optional[ModelCheckpoint] = None, out_dir: Optional[PathLike] = None,
               config_hash: str = "") -> Tuple[ModelCheckpoint, TrainHistory]:
    """Train ``task`` on fold ``fold``'s training ids, validating on its validation ids.

    Returns the minimum-validation-loss checkpoint and the per-epoch history. With
    ``max_epochs = 0`` the initial model is returned (epoch -1) with an empty history.
    """
    spec = get_task(task)
    with log_context(task=spec.name, fold=fold):
        return _train(spec, fold, splits, manifest, config, init, out_dir, config_hash)


def _train(spec: TaskSpec, fold: int, splits: SplitAssignment, manifest: DatasetManifest,
           config: TrainConfig, init: Optional[ModelCheckpoint], out_dir: Optional[PathLike],
           config_hash: str) -> Tuple[ModelCheckpoint, TrainHistory]:
    settings = resolve_settings(spec, config)
    seed = derive_seed(config.seed, spec.name, fold)
    torch.manual_seed(seed)
    device = select_device(config.device)

    train_ids, val_ids = splits.fold_members(fold)
    train_ds = MammogramDataset(
        records_for(manifest, train_ids), spec,
        compose_train_transforms(dataclasses.replace(
            config.augment, rng_seed=derive_seed(seed, "augment"))),
        cache=True)
    val_ds = MammogramDataset(records_for(manifest, val_ids), spec, cache=True)
    if not len(train_ds) or not len(val_ds):
        raise EmptyManifest(f"fold {fold} of {spec.name}: {len(train_ds)} train / "
                            f"{len(val_ds)} validation images")

    model = _initial_model(spec, config, settings, init, seed).to(device)
    loss_fn = loss_for(spec)
    loader_gen = torch.Generator().manual_seed(seed)
    if settings.use_weighted_sampler:
        classes = None if spec.is_multilabel else list(spec.class_names)
        sampler = make_weighted_sampler(train_ds.sampler_labels(), classes, loader_gen)
        train_loader = DataLoader(train_ds, batch_size=config.batch_size, sampler=sampler,
                                  num_workers=config.num_workers, worker_init_fn=worker_init_fn)
    else:
        train_loader = DataLoader(train_ds, batch_size=config.batch_size, shuffle=True,
                                  generator=loader_gen, num_workers=config.num_workers,
                                  worker_init_fn=worker_init_fn)
    val_loader = DataLoader(val_ds, batch_size=config.batch_size, shuffle=False)
    optimizer = make_optimizer(model, settings.lr, config)

    history = TrainHistory(task=spec.name, fold=fold)
    ckpt_path = Path(out_dir) / f"{spec.name}_fold{fold}.pt" if out_dir else None
    best = None
    if config.max_epochs == 0:
        best = ModelCheckpoint.from_model(model, fold, -1, _validate(model, val_loader, loss_fn, device),
                                          config_hash)

    state = EarlyStopState(patience=config.patience)
    log.info("Training %s fold %d: %d train / %d val images, lr %g, sampler %s, device %s",
             spec.name, fold, len(train_ds), len(val_ds), settings.lr,
             settings.use_weighted_sampler, device)
    for epoch in range(config.max_epochs):
        started = time.perf_counter()
        train_ds.set_epoch(epoch)
        model.train()
        total, count = 0.0, 0
        for x, y in train_loader:
            x, y = x.to(device), y.to(device)
            try:
                loss = train_step(model, optimizer, loss_fn, x, y)
            except DivergedLoss as exc:
                raise DivergedLoss(f"{spec.name} fold {fold}, epoch {epoch}: {exc}") from exc
            total += loss * x.shape[0]
            count += x.shape[0]

        val_loss = _validate(model, val_loader, loss_fn, device)
        state = early_stopping_update(state, val_loss)
        val_f1, val_auc = _val_scores(model, val_ds, spec, config.batch_size, device)
        history.epochs.append(EpochRecord(epoch, total / count, val_loss, val_f1, val_auc,
                                          time.perf_counter() - started))
        if state.best_epoch == epoch:
            best = ModelCheckpoint.from_model(model, fold, epoch, val_loss, config_hash)
        log.info("%s fold %d epoch %d: train %.4f, val %.4f (best %.4f @ %d)", spec.name, fold,
                 epoch, total / count, val_loss, state.best_val_loss, state.best_epoch)
        if state.stopped:
            log.info("Early stop after epoch %d (no improvement for %d epochs)",
                     epoch, state.epochs_since_best)
            break

    history.best_epoch = best.epoch
    if ckpt_path is not None:
        save_checkpoint(best, ckpt_path)
        history.best_checkpoint = str(ckpt_path)
        history.to_csv(ckpt_path.with_name(f"{spec.name}_fold{fold}_history.csv"))
    return best, history
