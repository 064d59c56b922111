"""K-fold cross-evaluation: fold planning, multi-class metrics, confidence
intervals and the end-to-end harness that trains one model per fold and
tests every fold's model on the same fixed test bags.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingStore, SlideRecord, read_store
from .errors import ConfigError
from .model import MILParams, N_CLASSES, forward, save_checkpoint
from .numerics import RngStream, derive_stream
from .training import TrainConfig, fixed_bags, run_training

CI_Z = 1.96  # two-sided 95% normal quantile


@dataclass
class FoldPlan:
    """Disjoint training folds plus the fixed test-slide list."""

    k: int
    folds: list[list[str]]  # slide ids per fold
    test_slides: list[str] = field(default_factory=list)

    def training_slides(self, fold: int) -> list[str]:
        """Slides of the K-1 folds other than ``fold``."""
        out = []
        for i, ids in enumerate(self.folds):
            if i != fold:
                out.extend(ids)
        return out


def kfold_split(slides: list[tuple[str, int]], k: int, seed: int,
                stratify: bool = True,
                test_slides: list[str] | None = None) -> FoldPlan:
    """Deterministic fold assignment with sizes differing by at most one.

    ``slides`` are (slide_id, label) pairs for the training set. With
    stratify=True, slides are shuffled within each label group before the
    round-robin deal, which balances labels across folds whenever counts
    allow.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(slides):
        raise ValueError(f"k={k} exceeds the {len(slides)} available slides")
    ordered = sorted(slides, key=lambda sl: sl[0])
    if stratify:
        groups: dict[int, list[str]] = {}
        for sid, label in ordered:
            groups.setdefault(int(label), []).append(sid)
        sequence = []
        for label in sorted(groups):
            ids = groups[label]
            perm = RngStream(seed, derive_stream("kfold", label)).permutation(len(ids))
            sequence.extend(ids[i] for i in perm)
    else:
        ids = [sid for sid, _ in ordered]
        perm = RngStream(seed, derive_stream("kfold")).permutation(len(ids))
        sequence = [ids[i] for i in perm]
    folds: list[list[str]] = [[] for _ in range(k)]
    for i, sid in enumerate(sequence):
        folds[i % k].append(sid)
    return FoldPlan(k=k, folds=folds, test_slides=list(test_slides or []))


def confusion(preds, labels, n_classes: int = N_CLASSES) -> np.ndarray:
    """Confusion matrix; entry [t][p] counts true class t predicted as p."""
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.shape != labels.shape:
        raise ValueError("preds and labels must have equal length")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    if preds.size == 0:
        return cm
    if labels.min() < 0 or labels.max() >= n_classes \
            or preds.min() < 0 or preds.max() >= n_classes:
        raise ValueError(f"class values must lie in 0..{n_classes - 1}")
    np.add.at(cm, (labels, preds), 1)
    return cm


@dataclass
class PRFResult:
    precision: np.ndarray  # per class
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    present: np.ndarray  # bool per class: class occurs among the true labels


def prf_macro(cm: np.ndarray) -> PRFResult:
    """Per-class and macro precision/recall/F1 with zero-denominator -> 0.

    Macro averages are unweighted means over the classes present among the
    true labels; classes never seen in the labels are excluded.
    """
    cm = np.asarray(cm, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion matrix must be square")
    tp = np.diag(cm)
    pred_totals = cm.sum(axis=0)
    true_totals = cm.sum(axis=1)
    precision = np.divide(tp, pred_totals, out=np.zeros_like(tp), where=pred_totals > 0)
    recall = np.divide(tp, true_totals, out=np.zeros_like(tp), where=true_totals > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros_like(tp), where=pr > 0)
    present = true_totals > 0
    if present.any():
        macro = (float(precision[present].mean()), float(recall[present].mean()),
                 float(f1[present].mean()))
    else:
        macro = (0.0, 0.0, 0.0)
    return PRFResult(precision=precision, recall=recall, f1=f1,
                     macro_precision=macro[0], macro_recall=macro[1],
                     macro_f1=macro[2], present=present)


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their rank range."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    ranks[order] = np.arange(1, values.size + 1, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < sorted_vals.size:
        j = i
        while j + 1 < sorted_vals.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    return ranks


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney AUC with midrank tie handling.

    Equals the pairwise probability that a positive outranks a negative,
    counting ties as half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = _midranks(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class AUCResult:
    per_class: np.ndarray  # NaN where the class is absent from the labels
    macro: float
    absent: list[int]  # classes with no positive or no negative sample


def roc_auc_ovr(scores: np.ndarray, labels, n_classes: int = N_CLASSES) -> AUCResult:
    """One-vs-rest AUC per class using P(class) as the score.

    Classes absent from the labels have undefined AUC: they are reported
    as NaN, listed in ``absent`` and excluded from the macro average.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if scores.ndim != 2 or scores.shape[1] != n_classes:
        raise ValueError(f"scores must be (n, {n_classes}), got {scores.shape}")
    if scores.shape[0] != labels.shape[0]:
        raise ValueError("scores and labels must have equal length")
    per_class = np.full(n_classes, np.nan)
    absent = []
    for c in range(n_classes):
        auc = binary_auc(scores[:, c], labels == c)
        if np.isnan(auc):
            absent.append(c)
        else:
            per_class[c] = auc
    defined = ~np.isnan(per_class)
    macro = float(per_class[defined].mean()) if defined.any() else float("nan")
    return AUCResult(per_class=per_class, macro=macro, absent=absent)


def roc_points(scores: np.ndarray, positive: np.ndarray) -> list[tuple[float, float]]:
    """(fpr, tpr) points of the ROC curve, one per distinct threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return []
    order = np.argsort(-scores, kind="mergesort")
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < order.size:
        j = i
        while j + 1 < order.size and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        block = order[i:j + 1]
        tp += int(positive[block].sum())
        fp += block.size - int(positive[block].sum())
        points.append((fp / n_neg, tp / n_pos))
        i = j + 1
    return points


@dataclass
class CIResult:
    """Mean with a 95% half-width of 1.96 * standard error over K values."""

    mean: float
    half_width: float
    k: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "half_width": self.half_width, "k": self.k}


def confidence_interval(values) -> CIResult:
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("confidence_interval needs at least one value")
    mean = float(arr.mean())
    if arr.size == 1:
        warnings.warn("confidence interval over a single value has zero width",
                      stacklevel=2)
        return CIResult(mean=mean, half_width=0.0, k=1)
    if np.all(arr == arr[0]):
        # constant input: exactly zero width even when mean() rounds
        return CIResult(mean=float(arr[0]), half_width=0.0, k=int(arr.size))
    std = float(arr.std(ddof=1))
    return CIResult(mean=mean, half_width=CI_Z * std / np.sqrt(arr.size), k=int(arr.size))


@dataclass
class FoldMetrics:
    """Test-set metrics of the model trained without one fold."""

    fold: int
    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class_auc: np.ndarray
    macro_auc: float
    accuracy: float
    best_epoch: int
    val_loss: float

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "confusion": self.confusion.astype(int).tolist(),
            "precision": [float(v) for v in self.precision],
            "recall": [float(v) for v in self.recall],
            "f1": [float(v) for v in self.f1],
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "per_class_auc": [None if np.isnan(v) else float(v) for v in self.per_class_auc],
            "macro_auc": self.macro_auc,
            "accuracy": self.accuracy,
            "best_epoch": self.best_epoch,
            "val_loss": self.val_loss,
        }


def evaluate_bags(params: MILParams, bags) -> FoldMetricsInputs:
    """Forward every bag once; returns stacked probabilities and labels."""
    probs = np.stack([forward(params, bag).probs for bag in bags])
    labels = np.array([bag.label for bag in bags], dtype=np.int64)
    return FoldMetricsInputs(probs=probs, labels=labels)


@dataclass
class FoldMetricsInputs:
    probs: np.ndarray  # (n, C)
    labels: np.ndarray  # (n,)

    @property
    def preds(self) -> np.ndarray:
        # argmax takes the first maximum, which breaks ties toward the
        # lower (clinically conservative) score
        return np.argmax(self.probs, axis=1)


def metrics_from_outputs(outputs: FoldMetricsInputs, fold: int, best_epoch: int,
                         val_loss: float, n_classes: int = N_CLASSES) -> FoldMetrics:
    cm = confusion(outputs.preds, outputs.labels, n_classes)
    prf = prf_macro(cm)
    auc = roc_auc_ovr(outputs.probs, outputs.labels, n_classes)
    total = cm.sum()
    accuracy = float(np.trace(cm) / total) if total else 0.0
    return FoldMetrics(
        fold=fold, confusion=cm,
        precision=prf.precision, recall=prf.recall, f1=prf.f1,
        macro_precision=prf.macro_precision, macro_recall=prf.macro_recall,
        macro_f1=prf.macro_f1,
        per_class_auc=auc.per_class, macro_auc=auc.macro,
        accuracy=accuracy, best_epoch=best_epoch, val_loss=val_loss,
    )


CI_METRICS = ("macro_precision", "macro_recall", "macro_f1", "macro_auc", "accuracy")


@dataclass
class CrossEvalResult:
    plan: FoldPlan
    fold_metrics: list[FoldMetrics]
    cis: dict[str, CIResult]
    test_outputs: list[FoldMetricsInputs]
    fold_params: list[MILParams]

    def best_fold(self) -> int:
        aucs = [m.macro_auc for m in self.fold_metrics]
        return int(np.nanargmax(aucs))


def _stores_for(records: list[SlideRecord]) -> tuple[list[EmbeddingStore], list[int]]:
    stores, labels = [], []
    for rec in records:
        if rec.store_path is None:
            raise ConfigError(
                f"slide '{rec.slide_id}' has no store_path; embed it first")
        stores.append(read_store(rec.store_path, slide_id=rec.slide_id))
        labels.append(rec.her2_score)
    return stores, labels


def cross_evaluate(records: list[SlideRecord], cfg: TrainConfig, k: int, *,
                   attention_dim: int = 128, stratify: bool = True,
                   n_classes: int = N_CLASSES, decoupled: bool = False,
                   out_dir=None, train_fn=None) -> CrossEvalResult:
    """Train K models, each missing one fold, and test all of them on the
    same fixed bags from the held-out test slides.

    Each fold's model starts from the same seeded init; validation bags
    come from the held-out fold and select the best epoch; fold checkpoints
    land in ``out_dir`` when given. ``train_fn(fit_pairs, val_bags, cfg)``
    defaults to run_training and exists so tests can stub the training.
    """
    train_records = [r for r in records if r.split == "train"]
    test_records = [r for r in records if r.split == "test"]
    if not train_records:
        raise ConfigError("manifest has no slides with split='train'")
    if not test_records:
        raise ConfigError("manifest has no slides with split='test'")

    train_stores, train_labels = _stores_for(train_records)
    test_stores, test_labels = _stores_for(test_records)
    by_id = {s.slide_id: (s, l) for s, l in zip(train_stores, train_labels)}

    plan = kfold_split([(r.slide_id, r.her2_score) for r in train_records], k,
                       cfg.seed, stratify,
                       test_slides=[r.slide_id for r in test_records])
    test_bags = fixed_bags(test_stores, test_labels, cfg.test_bags,
                           cfg.bag_size, base_seed=cfg.seed)

    if train_fn is None:
        def train_fn(fit_pairs, val_bags, fold_cfg):
            return run_training(fit_pairs, val_bags, fold_cfg,
                                attention_dim=attention_dim, n_classes=n_classes,
                                decoupled=decoupled)

    fold_metrics: list[FoldMetrics] = []
    test_outputs: list[FoldMetricsInputs] = []
    fold_params: list[MILParams] = []
    for fold in range(k):
        fit_pairs = [by_id[sid] for sid in plan.training_slides(fold)]
        val_pairs = [by_id[sid] for sid in plan.folds[fold]]
        val_bags = fixed_bags([s for s, _ in val_pairs], [l for _, l in val_pairs],
                              cfg.val_bags, cfg.bag_size, base_seed=cfg.seed)
        result = train_fn(fit_pairs, val_bags, cfg)
        outputs = evaluate_bags(result.params, test_bags)
        metrics = metrics_from_outputs(outputs, fold, result.best_epoch,
                                       result.best_val_loss, n_classes)
        fold_metrics.append(metrics)
        test_outputs.append(outputs)
        fold_params.append(result.params)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            save_checkpoint(result.params, out / f"fold{fold}.milc", metadata={
                "fold": fold,
                "best_epoch": result.best_epoch,
                "val_loss": result.best_val_loss,
                "config": cfg.to_dict(),
                "attention_dim": attention_dim,
            })

    cis = {}
    for name in CI_METRICS:
        vals = [getattr(m, name) for m in fold_metrics]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cis[name] = confidence_interval(vals)
    return CrossEvalResult(plan=plan, fold_metrics=fold_metrics, cis=cis,
                           test_outputs=test_outputs, fold_params=fold_params)


def write_crossval_report(result: CrossEvalResult, cfg: TrainConfig, out_dir,
                          metadata: dict | None = None) -> None:
    """report.json, a Table-style summary CSV and per-class ROC points CSV.

    All three files are byte-deterministic functions of the result, so
    reruns with the same seed produce identical bytes.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    report = {
        "k": result.plan.k,
        "folds": [m.to_dict() for m in result.fold_metrics],
        "confidence_intervals": {name: ci.to_dict() for name, ci in result.cis.items()},
        "fold_plan": {"folds": result.plan.folds, "test_slides": result.plan.test_slides},
        "config": cfg.to_dict(),
        "best_fold": result.best_fold(),
    }
    if metadata:
        report["metadata"] = metadata
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")

    with open(out / "table.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["precision", "recall", "f1_score", "auc_roc", "accuracy"])
        cells = []
        for name in ("macro_precision", "macro_recall", "macro_f1", "macro_auc", "accuracy"):
            ci = result.cis[name]
            cells.append(f"{ci.mean:.3f} +/- {ci.half_width:.3f}")
        writer.writerow(cells)

    with open(out / "roc_points.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "class", "fpr", "tpr"])
        for fold, outputs in enumerate(result.test_outputs):
            for c in range(outputs.probs.shape[1]):
                for fpr, tpr in roc_points(outputs.probs[:, c], outputs.labels == c):
                    writer.writerow([fold, c, repr(fpr), repr(tpr)])
