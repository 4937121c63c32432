"""Classification metrics, k-fold cross-validation, the classifier-only
baseline, and the discriminator-equilibrium summary.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import dataset as ds
from . import training
from .errors import DataError
from .model import AdversarialAutoencoderClassifier, init_weights
from .preprocess import PreprocessConfig, Preprocessor


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns are predicted classes."""

    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total


@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    per_class_accuracy: list[float]
    confusion: ConfusionMatrix
    fold_id: int = -1

    def as_dict(self) -> dict:
        return {
            "fold_id": self.fold_id,
            "accuracy": round(self.accuracy, 6),
            "macro_precision": round(self.macro_precision, 6),
            "macro_recall": round(self.macro_recall, 6),
            "per_class_accuracy": [round(v, 6) for v in self.per_class_accuracy],
            "confusion": self.confusion.counts.tolist(),
        }


@dataclass
class CrossValResult:
    reports: list[MetricsReport]
    mean: dict[str, float]
    std: dict[str, float]


@dataclass
class EquilibriumSummary:
    """Behavior of the discriminator loss over the final quarter of training."""

    mean: float
    std: float
    distance: float
    window: int
    epochs: int

    def as_dict(self) -> dict:
        return {
            "mean": round(self.mean, 6),
            "std": round(self.std, 6),
            "distance": round(self.distance, 6),
            "window": self.window,
            "epochs": self.epochs,
            "target": round(training.DISCRIMINATOR_EQUILIBRIUM, 6),
        }


def predict(
    model: AdversarialAutoencoderClassifier,
    images,
    batch_size: int = 8,
) -> np.ndarray:
    """Argmax class indices from the categorical head; ties break toward the
    lowest class index. Accepts a list of HxWx3 arrays or a stacked batch.
    """
    if isinstance(images, np.ndarray) and images.ndim == 4:
        images = list(images)
    elif isinstance(images, torch.Tensor):
        images = list(images.detach().cpu().numpy())
    if len(images) == 0:
        raise DataError("no images to predict on")
    dtype = next(model.parameters()).dtype
    preds = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            batch = training.to_tensor_batch(images[start : start + batch_size], dtype)
            c = model.encode(batch).c.cpu().numpy()
            preds.append(np.argmax(c, axis=1))
    return np.concatenate(preds)


def compute_metrics(
    predictions, truths, num_classes: int, fold_id: int = -1
) -> MetricsReport:
    """Accuracy, macro precision/recall, and per-class accuracy (recall).

    Classes never predicted and absent from the truth are excluded from the
    macro precision mean (0/0); classes present in truth but never predicted
    contribute precision 0. Classes absent from truth contribute recall 0.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if predictions.shape != truths.shape or predictions.ndim != 1:
        raise DataError("predictions and truths must be equal-length 1-D arrays")
    if predictions.size == 0:
        raise DataError("cannot compute metrics on empty input")
    if predictions.max() >= num_classes or truths.max() >= num_classes:
        raise DataError(f"labels exceed num_classes={num_classes}")

    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (truths, predictions), 1)
    confusion = ConfusionMatrix(counts)

    truth_totals = counts.sum(axis=1)
    pred_totals = counts.sum(axis=0)
    diag = np.diag(counts)

    recalls = np.where(truth_totals > 0, diag / np.maximum(truth_totals, 1), 0.0)
    precisions = []
    for cls in range(num_classes):
        if pred_totals[cls] > 0:
            precisions.append(diag[cls] / pred_totals[cls])
        elif truth_totals[cls] > 0:
            precisions.append(0.0)
        # 0/0: class absent from both truth and predictions is excluded

    return MetricsReport(
        accuracy=confusion.accuracy(),
        macro_precision=float(np.mean(precisions)) if precisions else 0.0,
        macro_recall=float(np.mean(recalls)),
        per_class_accuracy=[float(r) for r in recalls],
        confusion=confusion,
        fold_id=fold_id,
    )


def equilibrium_report(discriminator_history) -> EquilibriumSummary:
    """Mean and spread of the discriminator loss over the final 25% of epochs
    and its distance from the 2*ln(2) equilibrium value.
    """
    history = [float(v) for v in discriminator_history]
    if not history:
        raise DataError("discriminator loss history is empty")
    window = max(1, len(history) // 4)
    tail = np.asarray(history[-window:])
    mean = float(tail.mean())
    return EquilibriumSummary(
        mean=mean,
        std=float(tail.std()),
        distance=abs(mean - training.DISCRIMINATOR_EQUILIBRIUM),
        window=window,
        epochs=len(history),
    )


def _fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def cross_validate(
    manifest: ds.DatasetManifest,
    folds: ds.FoldSpec,
    model_config,
    preprocess_config: PreprocessConfig,
    train_config: training.TrainConfig,
    optimizer_spec: training.OptimizerSpec,
    out_dir: str | Path,
    *,
    baseline: bool = False,
) -> CrossValResult:
    """Train on all folds but one, evaluate the best checkpoint on the
    held-out fold, and aggregate mean and standard deviation per metric.

    Each fold gets its own rng stream derived from (seed, fold) and its own
    `fold{f}` output directory. Writes cv_summary.json, per-fold confusion
    CSVs, and (for the adversarial objective) equilibrium.json.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    preprocessor = Preprocessor(preprocess_config)

    reports: list[MetricsReport] = []
    equilibria: list[EquilibriumSummary] = []
    for fold in range(folds.k):
        seed = _fold_seed(train_config.seed, fold)
        fold_config = dataclasses.replace(train_config, seed=seed)
        model = AdversarialAutoencoderClassifier(model_config)
        init_weights(model, seed=seed)
        fold_dir = out_dir / f"fold{fold}"
        try:
            state = training.train(
                model,
                manifest,
                folds,
                fold,
                preprocessor,
                fold_config,
                optimizer_spec,
                fold_dir,
                baseline=baseline,
            )
        except Exception as exc:
            raise type(exc)(f"fold {fold}: {exc}") from exc

        _, val_records = ds.split_records(manifest, folds, fold)
        views = [
            preprocessor.eval_view(preprocessor.load_base(r.path)[0]) for r in val_records
        ]
        preds = predict(model, views, batch_size=train_config.batch_size)
        truths = np.array([r.label for r in val_records])
        report = compute_metrics(preds, truths, manifest.num_classes, fold_id=fold)
        reports.append(report)
        if not baseline:
            equilibria.append(equilibrium_report(state.loss_history["discriminator"]))
        write_confusion_csv(out_dir / f"confusion_fold{fold}.csv", report.confusion)

    metric_names = ("accuracy", "macro_precision", "macro_recall")
    values = {m: np.array([getattr(r, m) for r in reports]) for m in metric_names}
    result = CrossValResult(
        reports=reports,
        mean={m: float(v.mean()) for m, v in values.items()},
        std={m: float(v.std()) for m, v in values.items()},
    )

    summary = {
        "k": folds.k,
        "objective": "classifier-only" if baseline else "adversarial",
        "per_fold": [r.as_dict() for r in reports],
        "mean": {m: round(v, 6) for m, v in result.mean.items()},
        "std": {m: round(v, 6) for m, v in result.std.items()},
    }
    with open(out_dir / "cv_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if equilibria:
        payload = {
            "per_fold": [e.as_dict() for e in equilibria],
            "mean_distance": round(float(np.mean([e.distance for e in equilibria])), 6),
        }
        with open(out_dir / "equilibrium.json", "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return result


def train_baseline(
    manifest: ds.DatasetManifest,
    folds: ds.FoldSpec,
    model_config,
    preprocess_config: PreprocessConfig,
    train_config: training.TrainConfig,
    optimizer_spec: training.OptimizerSpec,
    out_dir: str | Path,
) -> CrossValResult:
    """Classifier-only control: the same encoder backbone and categorical
    head trained with only the classification loss, under identical data,
    folds, optimizer, and early stopping.
    """
    return cross_validate(
        manifest,
        folds,
        model_config,
        preprocess_config,
        train_config,
        optimizer_spec,
        out_dir,
        baseline=True,
    )


def write_confusion_csv(path: Path, confusion: ConfusionMatrix) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        n = confusion.counts.shape[0]
        writer.writerow(["true/pred"] + list(range(n)))
        for cls in range(n):
            writer.writerow([cls] + confusion.counts[cls].tolist())
