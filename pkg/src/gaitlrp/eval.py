"""Subject-stratified cross-validation, accuracy metrics and report export."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .data import (
    AgeGroup,
    Dataset,
    build_inputs,
    channel_names,
    fit_norm_params,
    stratified_subject_kfold,
)
from .errors import EmptyDataset, EmptyMatrix, FoldError, GaitLrpError
from .lrp import (
    ClassProfiles,
    LrpConfig,
    aggregate_class_relevance,
    lrp_explain_batch,
    total_relevance,
    write_relevance_csv,
)
from .plotting import render_figures

log = logging.getLogger(__name__)

N_CLASSES = len(AgeGroup)


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((N_CLASSES, N_CLASSES), np.int64))

    @classmethod
    def from_labels(cls, y_true, y_pred, n_classes: int = N_CLASSES) -> "ConfusionMatrix":
        m = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(m, (np.asarray(y_true, np.int64), np.asarray(y_pred, np.int64)), 1)
        return cls(m)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accuracy(matrix: ConfusionMatrix) -> float:
    total = matrix.total
    if total == 0:
        raise EmptyMatrix("confusion matrix has no entries")
    return float(np.trace(matrix.counts)) / total


def zero_rule(dataset) -> float:
    """Accuracy of always predicting the most frequent class.

    Accepts a :class:`Dataset` or a plain sequence of class labels.
    """
    labels = dataset.labels if isinstance(dataset, Dataset) else list(dataset)
    if len(labels) == 0:
        raise EmptyDataset("zero rule needs at least one trial")
    counts = np.bincount(np.asarray([int(l) for l in labels], dtype=np.int64))
    return int(counts.max()) / len(labels)


def subject_vote_accuracy(dataset: Dataset, predictions: np.ndarray) -> float:
    """Share of subjects whose trial-majority prediction matches their label."""
    hits = 0
    for sid, idx in dataset.subjects.items():
        votes = np.bincount(predictions[list(idx)], minlength=N_CLASSES)
        hits += int(np.argmax(votes) == dataset.subject_label(sid))
    return hits / len(dataset.subjects)


@dataclass
class CvResult:
    fold_accuracies: list[float]
    accuracy_mean: float
    accuracy_sd: float
    confusion: ConfusionMatrix
    profiles: ClassProfiles
    total_relevance: np.ndarray | None
    zero_rule: float
    subject_vote_accuracy: float
    predictions: np.ndarray  # per dataset trial
    fold_of_trial: np.ndarray
    channels: tuple

    @property
    def k(self) -> int:
        return len(self.fold_accuracies)


@dataclass
class _FoldOutput:
    fold: int
    test_indices: list[int]
    predictions: np.ndarray
    inputs: np.ndarray
    relevance: list  # RelevanceMap per test trial
    final_loss: float


def _run_fold(dataset: Dataset, split, fold: int, train_cfg: nn.TrainConfig,
              lrp_cfg: LrpConfig, seed: int, layout: str, sides: str, use_bias: bool):
    train_ids = split.train_subjects(fold)
    params = fit_norm_params(dataset, train_ids)
    train_idx = dataset.indices_for(train_ids)
    test_idx = dataset.indices_for(split.test_subjects(fold))
    x_train = build_inputs(dataset, train_idx, params, layout, sides)
    x_test = build_inputs(dataset, test_idx, params, layout, sides)
    fold_seed = seed ^ fold
    net = nn.default_network(x_train.shape[1], x_train.shape[2], seed=fold_seed, use_bias=use_bias)
    net, hist = nn.train(net, x_train, dataset.label_array(train_idx),
                         replace(train_cfg, seed=fold_seed))
    trace = nn.forward(net, x_test)
    pred = np.argmax(trace.output, axis=1)
    y_test = dataset.label_array(test_idx)
    targets = y_test if lrp_cfg.explain == "true" else pred
    maps = lrp_explain_batch(net, trace, targets, lrp_cfg)
    return _FoldOutput(fold, test_idx, pred, x_test, maps, hist.loss[-1])


def _fold_worker(args):
    fold = args[2]
    try:
        return _run_fold(*args)
    except GaitLrpError as exc:
        raise FoldError(fold, exc) from exc


def fold_workers() -> int:
    env = os.environ.get("GAITLRP_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_cross_validation(dataset: Dataset, k: int = 10, train_cfg: nn.TrainConfig = nn.TrainConfig(),
                         lrp_cfg: LrpConfig = LrpConfig(), seed: int = 0, layout: str = "channels",
                         sides: str = "both", use_bias: bool = True,
                         workers: int | None = None) -> CvResult:
    """Train and explain one fresh network per fold.

    Fold ``f`` uses seed ``seed ^ f`` for initialization and shuffling;
    normalization is fitted on the training subjects only. Every test trial
    is explained once, at its true class unless ``lrp_cfg.explain`` says
    otherwise. Results are assembled in fold order, so the worker count
    never changes the output.
    """
    split = stratified_subject_kfold(dataset, k, seed)
    jobs = [(dataset, split, f, train_cfg, lrp_cfg, seed, layout, sides, use_bias) for f in range(k)]
    workers = min(k, workers or fold_workers())
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            outputs = list(pool.map(_fold_worker, jobs))
    else:
        outputs = []
        for job in jobs:
            outputs.append(_fold_worker(job))
            log.info("fold %d/%d done", job[2] + 1, k)

    n = len(dataset)
    labels = dataset.label_array()
    predictions = np.full(n, -1, dtype=np.int64)
    fold_of = np.full(n, -1, dtype=np.int64)
    confusion = ConfusionMatrix()
    fold_acc = []
    entries = []
    for out in outputs:
        y = labels[out.test_indices]
        cm = ConfusionMatrix.from_labels(y, out.predictions)
        confusion = confusion + cm
        fold_acc.append(accuracy(cm))
        predictions[out.test_indices] = out.predictions
        fold_of[out.test_indices] = out.fold
        entries.extend(zip(out.relevance, y, out.inputs))
    channels = tuple(channel_names(sides))
    profiles = aggregate_class_relevance(entries, channels)
    total = total_relevance(profiles) if not profiles.missing else None
    acc = np.array(fold_acc)
    return CvResult(fold_acc, float(acc.mean()), float(acc.std()), confusion, profiles, total,
                    zero_rule(dataset), subject_vote_accuracy(dataset, predictions),
                    predictions, fold_of, channels)


# --------------------------------------------------------------------------
# reports


def format_metrics(result: CvResult) -> str:
    lines = [
        f"accuracy_mean={result.accuracy_mean!r}",
        f"accuracy_sd={result.accuracy_sd!r}",
        f"zero_rule={result.zero_rule!r}",
        f"subject_vote_accuracy={result.subject_vote_accuracy!r}",
        "fold_accuracies=" + ",".join(repr(a) for a in result.fold_accuracies),
        f"k={result.k}",
        f"n_trials={result.confusion.total}",
        "classes=" + ",".join(g.name for g in AgeGroup),
        "confusion_matrix=",
    ]
    lines += [" ".join(str(int(c)) for c in row) for row in result.confusion.counts]
    return "\n".join(lines) + "\n"


def read_metrics(path) -> dict:
    """Parse a metrics file; numbers come back as float/int, the matrix as an array."""
    out: dict = {}
    rows = []
    in_matrix = False
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        if in_matrix:
            rows.append([int(v) for v in line.split()])
            continue
        key, _, value = line.partition("=")
        if key == "confusion_matrix":
            in_matrix = True
        elif key == "fold_accuracies":
            out[key] = [float(v) for v in value.split(",")]
        elif key == "classes":
            out[key] = value.split(",")
        elif key in ("k", "n_trials"):
            out[key] = int(value)
        else:
            out[key] = float(value)
    out["confusion_matrix"] = np.array(rows, dtype=np.int64)
    return out


def export_report(result: CvResult, path) -> list[Path]:
    """Write ``metrics.txt``, ``relevance.csv`` and the SVG figures into ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    metrics = out / "metrics.txt"
    metrics.write_text(format_metrics(result), encoding="utf-8")
    relevance = out / "relevance.csv"
    write_relevance_csv(relevance, result.profiles, result.total_relevance, result.channels)
    return [metrics, relevance] + render_figures(result.profiles, result.total_relevance, out)
