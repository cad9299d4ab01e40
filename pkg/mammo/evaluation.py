"""Per-class F1, macro F1, AUC, fold aggregation and the paired t-test.

Decision rule: argmax for softmax heads, 0.5 per unit for sigmoid heads. AUC is the
rank statistic P(score_pos > score_neg) + 1/2 P(tie), computed from average ranks.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from scipy import stats
from torch.utils.data import DataLoader

from .dataset import MammogramDataset
from .errors import (DegenerateVariance, IoFailure, LengthMismatch, SingleClass, TaskMismatch)
from .logging import get_logger
from .manifest import MammogramRecord
from .models import MammoNet, ModelCheckpoint, load_checkpoint, model_from_checkpoint
from .tasks import TaskSpec, get_task
from .util import PathLike, utc_now

log = get_logger(__name__)

REPORT_VERSION = 1
MACRO_F1 = "macro_f1"
AUC = "auc"


def _check_lengths(a, b) -> Tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"expected two equal-length 1-D sequences, got {a.shape} and {b.shape}")
    return a, b


def f1_per_class(predicted: Sequence, actual: Sequence, cls) -> float:
    """2 TP / (2 TP + FP + FN) with ``cls`` as positive; 0 when the denominator is 0."""
    predicted, actual = _check_lengths(predicted, actual)
    if predicted.size == 0:
        raise LengthMismatch("need at least one prediction")
    pred_pos = predicted == cls
    true_pos = actual == cls
    tp = int(np.sum(pred_pos & true_pos))
    fp = int(np.sum(pred_pos & ~true_pos))
    fn = int(np.sum(~pred_pos & true_pos))
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def macro_f1(per_class: Union[Mapping[str, float], Sequence[float]]) -> float:
    values = list(per_class.values()) if isinstance(per_class, Mapping) else list(per_class)
    if not values:
        raise ValueError("macro F1 of zero classes")
    return float(np.mean(values))


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    scores, labels = _check_lengths(scores, labels)
    positive = labels.astype(bool)
    n_pos = int(positive.sum())
    n_neg = int(positive.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC needs both positive and negative samples")
    ranks = stats.rankdata(scores)
    rank_sum = float(ranks[positive].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)


@dataclass(frozen=True)
class FoldMetrics:
    fold: int
    per_class_f1: Dict[str, float]
    macro_f1: float
    auc: float

    def as_metrics(self) -> Dict[str, float]:
        out = {f"f1/{name}": v for name, v in self.per_class_f1.items()}
        out[MACRO_F1] = self.macro_f1
        out[AUC] = self.auc
        return out


@dataclass(frozen=True)
class SignificanceResult:
    t_statistic: float
    p_two_tailed: float
    n_pairs: int


@dataclass
class EvalReport:
    task: str
    folds: List[FoldMetrics]
    mean: Dict[str, float]
    std: Dict[str, float]
    significance: Dict[str, SignificanceResult] = field(default_factory=dict)
    positive_class: Optional[str] = None

    def metric_values(self, metric: str) -> List[float]:
        return [f.as_metrics()[metric] for f in self.folds]

    def to_dict(self) -> Dict:
        return {
            "version": REPORT_VERSION,
            "task": self.task,
            "positive_class": self.positive_class,
            "folds": [asdict(f) for f in self.folds],
            "mean": self.mean,
            "std": self.std,
            "significance": {k: asdict(v) for k, v in self.significance.items()},
        }


def score_outputs(task: TaskSpec, probs: np.ndarray, targets: np.ndarray,
                  positive_class: Optional[str] = None) -> Tuple[Dict[str, float], float, float]:
    """``(per-class F1, macro F1, AUC)`` for one set of predictions.

    ``probs`` is (n, units). ``targets`` are class ids (softmax) or 0/1 rows (sigmoid).
    For sigmoid heads the AUC is the mean per-unit AUC over units with both classes.
    """
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets)
    per_class: Dict[str, float] = {}
    if not task.is_multilabel:
        predicted = probs.argmax(axis=1)
        for rc in task.reported:
            per_class[rc.name] = f1_per_class(predicted, targets, rc.unit)
        positive = positive_class if positive_class in task.class_names else task.auc_positive
        idx = task.class_names.index(positive)
        area = auc(probs[:, idx], (targets == idx).astype(int))
    else:
        predicted = probs >= 0.5
        actual = targets.astype(bool)
        for rc in task.reported:
            pred_u, act_u = predicted[:, rc.unit], actual[:, rc.unit]
            if not rc.positive:
                pred_u, act_u = ~pred_u, ~act_u
            per_class[rc.name] = f1_per_class(pred_u.astype(int), act_u.astype(int), 1)
        areas = [auc(probs[:, u], actual[:, u].astype(int)) for u in range(task.out_units)
                 if 0 < actual[:, u].sum() < len(actual)]
        if not areas:
            raise SingleClass(f"no output unit of {task.name} has both classes present")
        area = float(np.mean(areas))
    return per_class, macro_f1(per_class), area


def fold_metrics(task: TaskSpec, fold: int, probs: np.ndarray, targets: np.ndarray,
                 positive_class: Optional[str] = None) -> FoldMetrics:
    per_class, macro, area = score_outputs(task, probs, targets, positive_class)
    return FoldMetrics(fold=fold, per_class_f1=per_class, macro_f1=macro, auc=area)


def aggregate_folds(folds: Sequence[FoldMetrics], task: str = "",
                    positive_class: Optional[str] = None) -> EvalReport:
    """Mean and sample (n - 1) standard deviation per metric; one fold gives std 0."""
    if not folds:
        raise ValueError("cannot aggregate an empty list of folds")
    table = [f.as_metrics() for f in folds]
    mean, std = {}, {}
    for metric in table[0]:
        values = np.array([row[metric] for row in table], dtype=np.float64)
        mean[metric] = float(values.mean())
        std[metric] = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return EvalReport(task=task, folds=list(folds), mean=mean, std=std,
                      positive_class=positive_class)


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> SignificanceResult:
    """Two-tailed paired t-test on ``a - b`` (Student t, n - 1 degrees of freedom)."""
    a, b = _check_lengths(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    if a.size < 2:
        raise LengthMismatch("paired t-test needs at least two pairs")
    diff = a - b
    if np.allclose(diff, diff[0], rtol=0.0, atol=1e-12):
        raise DegenerateVariance("all paired differences are equal; t is undefined")
    result = stats.ttest_rel(a, b)
    return SignificanceResult(t_statistic=float(result.statistic),
                              p_two_tailed=float(result.pvalue), n_pairs=int(a.size))


# --------------------------------------------------------------------------- #
# Inference
# --------------------------------------------------------------------------- #
@torch.no_grad()
def predict(model: MammoNet, dataset: MammogramDataset, batch_size: int = 16,
            device: Optional[torch.device] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Head probabilities and targets for every item of ``dataset``, in order."""
    device = device or next(model.parameters()).device
    model.eval()
    probs, targets = [], []
    for x, y in DataLoader(dataset, batch_size=batch_size, shuffle=False):
        probs.append(model.probabilities(model(x.to(device))).cpu().numpy())
        targets.append(y.numpy())
    if not probs:
        raise ValueError("cannot predict on an empty dataset")
    return np.concatenate(probs), np.concatenate(targets)


def evaluate_task(checkpoints: Sequence[Union[ModelCheckpoint, PathLike]],
                  test_records: Sequence[MammogramRecord], task: Union[str, TaskSpec],
                  batch_size: int = 16, positive_class: Optional[str] = None,
                  device: Optional[torch.device] = None) -> EvalReport:
    """Run every fold's model on the fixed test set and aggregate."""
    spec = get_task(task)
    dataset = MammogramDataset(test_records, spec, cache=True)
    folds = []
    for i, ckpt in enumerate(checkpoints):
        if not isinstance(ckpt, ModelCheckpoint):
            ckpt = load_checkpoint(ckpt)
        if ckpt.task != spec.name:
            raise TaskMismatch(f"checkpoint for task {ckpt.task!r} given to evaluate {spec.name!r}")
        model = model_from_checkpoint(ckpt)
        if device is not None:
            model.to(device)
        probs, targets = predict(model, dataset, batch_size, device)
        fold = ckpt.fold if ckpt.fold >= 0 else i
        metrics = fold_metrics(spec, fold, probs, targets, positive_class)
        log.info("%s fold %d: macro F1 %.4f, AUC %.4f", spec.name, fold,
                 metrics.macro_f1, metrics.auc)
        folds.append(metrics)
    positive = positive_class if positive_class in spec.class_names else spec.auc_positive
    return aggregate_folds(folds, spec.name, positive)


# --------------------------------------------------------------------------- #
# Report files
# --------------------------------------------------------------------------- #
def write_report_json(payload: Mapping, path: PathLike) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"generated": utc_now(), **payload}, indent=2,
                                   sort_keys=True), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write report {path}: {exc}") from exc
    return path


def _cell(report: EvalReport, metric: str) -> str:
    if metric not in report.mean:
        return "-"
    return f"{report.mean[metric]:.4f} ({report.std[metric]:.4f})"


def format_table(reports: Mapping[str, EvalReport],
                 significance: Optional[Mapping[str, SignificanceResult]] = None) -> str:
    """Plain-text table: one row per metric, one "mean (std)" column per report."""
    names = list(reports)
    metrics: List[str] = []
    for report in reports.values():
        metrics.extend(m for m in report.mean if m.startswith("f1/") and m not in metrics)
    metrics.extend([MACRO_F1, AUC])
    labels = {m: (m[3:] + " F1" if m.startswith("f1/") else
                  "F1 Score" if m == MACRO_F1 else "AUC") for m in metrics}

    rows = [["Metric", *names]]
    rows += [[labels[m], *(_cell(reports[n], m) for n in names)] for m in metrics]
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    for metric, result in (significance or {}).items():
        lines.append(f"paired t-test on {metric}: t = {result.t_statistic:.4f}, "
                     f"p (two-tailed) = {result.p_two_tailed:.3g}, n = {result.n_pairs}")
    return "\n".join(lines) + "\n"


def compare_reports(a: EvalReport, b: EvalReport,
                    metrics: Sequence[str] = (MACRO_F1, AUC)) -> Dict[str, SignificanceResult]:
    """Paired t-tests of ``b`` against ``a`` over folds; degenerate metrics are logged and skipped."""
    results = {}
    for metric in metrics:
        try:
            results[metric] = paired_t_test(b.metric_values(metric), a.metric_values(metric))
        except (DegenerateVariance, LengthMismatch) as exc:
            log.warning("No t-test for %s: %s", metric, exc)
    return results


def report_from_dict(data: Mapping) -> EvalReport:
    """Inverse of :meth:`EvalReport.to_dict` (for reports read back from JSON)."""
    if data.get("version") != REPORT_VERSION:
        raise ValueError(f"unsupported report version {data.get('version')}")
    return EvalReport(
        task=data["task"],
        folds=[FoldMetrics(**f) for f in data["folds"]],
        mean=dict(data["mean"]),
        std=dict(data["std"]),
        significance={k: SignificanceResult(**v) for k, v in data.get("significance", {}).items()},
        positive_class=data.get("positive_class"),
    )


def read_report_json(path: PathLike) -> EvalReport:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read report {path}: {exc}") from exc
    return report_from_dict(data)
