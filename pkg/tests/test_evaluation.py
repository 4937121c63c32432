import json
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from aaecls import dataset as ds
from aaecls import evaluation as ev
from aaecls import training as tr
from aaecls.errors import DataError, TrainingDiverged
from aaecls.model import ModelConfig
from aaecls.preprocess import PreprocessConfig, Preprocessor


class StubModel:
    """Returns canned categorical rows; enough surface for predict()."""

    def __init__(self, rows):
        self._rows = torch.tensor(rows, dtype=torch.float32)

    def parameters(self):
        yield torch.zeros(1)

    def encode(self, batch):
        return SimpleNamespace(c=self._rows[: batch.shape[0]])


def test_predict_argmax():
    model = StubModel([[0.2, 0.5, 0.3]])
    preds = ev.predict(model, np.zeros((1, 4, 4, 3), dtype=np.float32))
    assert preds.tolist() == [1]


def test_predict_tie_breaks_to_lowest_index():
    model = StubModel([[0.4, 0.4, 0.2]])
    preds = ev.predict(model, np.zeros((1, 4, 4, 3), dtype=np.float32))
    assert preds.tolist() == [0]


def test_predict_order_preserving():
    rows = [[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.1, 0.2, 0.7], [0.6, 0.3, 0.1]]
    model = StubModel(rows)
    preds = ev.predict(model, np.zeros((4, 4, 4, 3), dtype=np.float32), batch_size=8)
    assert preds.tolist() == [0, 1, 2, 0]


def test_predict_empty_rejected():
    with pytest.raises(DataError):
        ev.predict(StubModel([[1.0, 0.0]]), [])


# ---------------------------------------------------------------------------
# metrics


def test_metrics_perfect_classifier():
    report = ev.compute_metrics([0, 1, 2, 1], [0, 1, 2, 1], 3)
    assert report.accuracy == 1.0
    assert report.macro_precision == 1.0
    assert report.macro_recall == 1.0
    assert report.per_class_accuracy == [1.0, 1.0, 1.0]


def test_metrics_hand_tabulated_case():
    report = ev.compute_metrics([0, 1, 1], [0, 1, 2], 3)
    assert abs(report.accuracy - 2 / 3) < 1e-12
    assert report.per_class_accuracy == [1.0, 1.0, 0.0]
    assert abs(report.macro_recall - 2 / 3) < 1e-12
    # precision: class0 1/1, class1 1/2, class2 never predicted but present -> 0
    assert abs(report.macro_precision - 0.5) < 1e-12


def test_metrics_absent_class_excluded_from_precision():
    report = ev.compute_metrics([0, 1], [0, 1], 4)
    # classes 2 and 3 appear in neither truth nor predictions
    assert report.macro_precision == 1.0
    assert abs(report.macro_recall - 0.5) < 1e-12  # absent classes contribute recall 0


def test_metrics_confusion_trace_consistency():
    rng = np.random.default_rng(0)
    preds = rng.integers(0, 3, size=200)
    truths = rng.integers(0, 3, size=200)
    report = ev.compute_metrics(preds, truths, 3)
    assert report.accuracy == report.confusion.accuracy()
    assert report.confusion.total == 200


def test_metrics_permutation_invariance():
    rng = np.random.default_rng(1)
    preds = rng.integers(0, 3, size=120)
    truths = rng.integers(0, 3, size=120)
    base = ev.compute_metrics(preds, truths, 3)
    perm = rng.permutation(120)
    shuffled = ev.compute_metrics(preds[perm], truths[perm], 3)
    assert base.accuracy == shuffled.accuracy
    assert base.macro_precision == shuffled.macro_precision
    assert base.macro_recall == shuffled.macro_recall
    assert np.array_equal(base.confusion.counts, shuffled.confusion.counts)


def test_metrics_macro_recall_is_mean_of_per_class():
    rng = np.random.default_rng(2)
    preds = rng.integers(0, 4, size=80)
    truths = rng.integers(0, 4, size=80)
    report = ev.compute_metrics(preds, truths, 4)
    assert abs(report.macro_recall - np.mean(report.per_class_accuracy)) < 1e-12
    assert all(0.0 <= v <= 1.0 for v in report.per_class_accuracy)


def test_metrics_empty_input_rejected():
    with pytest.raises(DataError):
        ev.compute_metrics([], [], 3)


def test_metrics_label_overflow_rejected():
    with pytest.raises(DataError):
        ev.compute_metrics([0, 3], [0, 1], 3)


# ---------------------------------------------------------------------------
# equilibrium summary


def test_equilibrium_exact_value():
    history = [tr.DISCRIMINATOR_EQUILIBRIUM] * 8
    summary = ev.equilibrium_report(history)
    assert summary.distance == 0.0
    assert summary.window == 2


def test_equilibrium_hand_example():
    summary = ev.equilibrium_report([0.5, 1.0, 1.4, 1.39])
    assert summary.window == 1
    assert abs(summary.mean - 1.39) < 1e-12
    assert abs(summary.distance - 0.0037056389) < 1e-9


def test_equilibrium_empty_history_rejected():
    with pytest.raises(DataError):
        ev.equilibrium_report([])


def test_equilibrium_window_is_final_quarter():
    history = list(range(1, 13))
    summary = ev.equilibrium_report(history)
    assert summary.window == 3
    assert abs(summary.mean - np.mean([10, 11, 12])) < 1e-12


# ---------------------------------------------------------------------------
# cross-validation harness


@pytest.fixture(scope="module")
def cv_setup(small_dataset):
    manifest_path, manifest = small_dataset
    folds = ds.stratified_kfold(manifest, 3, seed=0)
    model_config = ModelConfig(input_side=48, latent_length=4, num_classes=3, widths=(4, 8))
    pre_config = PreprocessConfig(side=48, roi_enabled=False)
    train_config = tr.TrainConfig(max_epochs=1, early_stop_patience=3, seed=0)
    return manifest, folds, model_config, pre_config, train_config


def test_cross_validate_cardinality_and_artifacts(cv_setup, tmp_path):
    manifest, folds, model_config, pre_config, train_config = cv_setup
    result = ev.cross_validate(
        manifest, folds, model_config, pre_config, train_config, tr.OptimizerSpec(), tmp_path
    )
    assert len(result.reports) == 3
    assert [r.fold_id for r in result.reports] == [0, 1, 2]
    accs = [r.accuracy for r in result.reports]
    assert abs(result.mean["accuracy"] - np.mean(accs)) < 1e-9
    assert abs(result.std["accuracy"] - np.std(accs)) < 1e-9
    assert (tmp_path / "cv_summary.json").is_file()
    assert (tmp_path / "equilibrium.json").is_file()
    for fold in range(3):
        assert (tmp_path / f"confusion_fold{fold}.csv").is_file()
        assert (tmp_path / f"fold{fold}" / "losses.csv").is_file()

    with open(tmp_path / "cv_summary.json") as fh:
        summary = json.load(fh)
    assert summary["k"] == 3
    assert summary["objective"] == "adversarial"
    assert set(summary["mean"]) == {"accuracy", "macro_precision", "macro_recall"}


def test_baseline_emits_same_report_schema(cv_setup, tmp_path):
    manifest, folds, model_config, pre_config, train_config = cv_setup
    result = ev.train_baseline(
        manifest, folds, model_config, pre_config, train_config, tr.OptimizerSpec(), tmp_path
    )
    assert len(result.reports) == 3
    with open(tmp_path / "cv_summary.json") as fh:
        summary = json.load(fh)
    assert summary["objective"] == "classifier-only"
    proposed_keys = set(ev.MetricsReport(1, 1, 1, [1], ev.ConfusionMatrix(np.eye(2, dtype=int))).as_dict())
    assert set(summary["per_fold"][0]) == proposed_keys
    assert not (tmp_path / "equilibrium.json").is_file()


def test_cross_validate_annotates_failing_fold(cv_setup, tmp_path, monkeypatch):
    manifest, folds, model_config, pre_config, train_config = cv_setup

    class Poison(Preprocessor):
        def train_view(self, base, rng):
            view = super().train_view(base, rng)
            view[:] = np.nan
            return view

    monkeypatch.setattr(ev, "Preprocessor", Poison)
    with pytest.raises(TrainingDiverged, match="fold 0"):
        ev.cross_validate(
            manifest, folds, model_config, pre_config, train_config,
            tr.OptimizerSpec(), tmp_path,
        )
