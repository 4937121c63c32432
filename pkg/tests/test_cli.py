import csv
import json
import math

import numpy as np
import pytest

from aaecls import cli
from aaecls.errors import TrainingDiverged
from util import tree_digest


@pytest.fixture(autouse=True)
def workspace(tmp_path, monkeypatch):
    monkeypatch.setenv("AAE_WORKSPACE", str(tmp_path / "ws"))
    return tmp_path / "ws"


def run_cli(*argv):
    return cli.main(list(argv))


# ---------------------------------------------------------------------------
# gen-data


def test_gen_data_deterministic_trees(tmp_path):
    args = ["gen-data", "--count", "24", "--seed", "42", "--image-size", "40"]
    assert run_cli(*args, "--out", str(tmp_path / "a")) == 0
    assert run_cli(*args, "--out", str(tmp_path / "b")) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_gen_data_proportions_conserve_count(tmp_path):
    assert run_cli(
        "gen-data", "--count", "30", "--seed", "1", "--image-size", "40",
        "--proportions", "0.33,0.33,0.34", "--out", str(tmp_path / "d"),
    ) == 0
    from aaecls import dataset as ds

    manifest = ds.load_manifest(tmp_path / "d" / "manifest.csv")
    assert manifest.class_counts.sum() == 30


def test_missing_out_flag_shows_usage(capsys):
    with pytest.raises(SystemExit) as exc:
        run_cli("gen-data", "--count", "9")
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err.lower()


# ---------------------------------------------------------------------------
# preprocess


def test_preprocess_emits_images_and_roi_report(small_dataset, tmp_path):
    manifest_path, manifest = small_dataset
    out = tmp_path / "pre"
    rc = run_cli(
        "preprocess", "--manifest", str(manifest_path), "--out", str(out),
        "--side", "32", "--save-roi",
    )
    assert rc == 0
    from aaecls import dataset as ds
    from aaecls.preprocess import load_image

    processed = ds.load_manifest(out / "manifest.csv")
    assert len(processed) == len(manifest)
    assert load_image(processed.records[0].path).shape == (32, 32, 3)
    assert (out / "roi_report.csv").is_file()
    with open(out / "roi_report.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(manifest)
    assert {"id", "row_min", "fallback_used", "iterations"} <= set(rows[0])
    masks = list((out / "masks").glob("*.png"))
    assert len(masks) == len(manifest)


# ---------------------------------------------------------------------------
# train


@pytest.fixture(scope="module")
def trained_run(small_dataset, tmp_path_factory):
    # module-scoped setup runs before the function-scoped autouse env
    # fixture, so it must point AAE_WORKSPACE at a sandbox itself
    manifest_path, _ = small_dataset
    out = tmp_path_factory.mktemp("clirun")
    mp = pytest.MonkeyPatch()
    mp.setenv("AAE_WORKSPACE", str(out / "ws"))
    try:
        rc = cli.main(
            [
                "train", "--manifest", str(manifest_path), "--out", str(out / "run"),
                "--epochs", "2", "--patience", "2", "--k", "3", "--side", "48",
                "--no-roi", "--seed", "5", "--lr", "0.001",
            ]
        )
        assert rc == 0
    finally:
        mp.undo()
    return manifest_path, out / "run"


def test_train_run_json_echoes_defaults(small_dataset, tmp_path):
    manifest_path, _ = small_dataset
    rc = run_cli(
        "train", "--manifest", str(manifest_path), "--out", str(tmp_path / "r"),
        "--epochs", "1", "--k", "3", "--side", "48", "--no-roi",
    )
    assert rc == 0
    with open(tmp_path / "r" / "run.json") as fh:
        echo = json.load(fh)
    assert echo["config"]["optimizer"]["learning_rate"] == 1e-4
    assert echo["config"]["optimizer"]["beta1"] == 0.9
    assert echo["config"]["optimizer"]["beta2"] == 0.999
    assert echo["config"]["train"]["batch_size"] == 8
    assert echo["objective"] == "adversarial"


def test_train_records_resolved_class_weights(small_dataset, tmp_path):
    from fractions import Fraction

    manifest_path, manifest = small_dataset
    rc = run_cli(
        "train", "--manifest", str(manifest_path), "--out", str(tmp_path / "w"),
        "--epochs", "1", "--k", "3", "--side", "48", "--no-roi",
        "--weight-scheme", "balanced",
    )
    assert rc == 0
    with open(tmp_path / "w" / "run.json") as fh:
        echo = json.load(fh)
    counts = manifest.class_counts.tolist()
    raw = [Fraction(1, c) for c in counts]
    expected = [float(r * 3 / sum(raw)) for r in raw]
    assert np.allclose(echo["class_weights"], expected, atol=1e-9)


def test_train_cv_emits_fold_directories(small_dataset, tmp_path):
    manifest_path, _ = small_dataset
    rc = run_cli(
        "train", "--manifest", str(manifest_path), "--out", str(tmp_path / "cv"),
        "--cv", "--epochs", "1", "--k", "3", "--side", "48", "--no-roi",
    )
    assert rc == 0
    folds = sorted(p.name for p in (tmp_path / "cv").glob("fold*"))
    assert folds == ["fold0", "fold1", "fold2"]
    assert (tmp_path / "cv" / "cv_summary.json").is_file()


def test_train_rerun_from_echo_reproduces_losses(trained_run, tmp_path):
    _, run_dir = trained_run
    rc = run_cli(
        "train", "--out", str(tmp_path / "again"), "--config", str(run_dir / "run.json"),
    )
    assert rc == 0
    assert (run_dir / "losses.csv").read_bytes() == (tmp_path / "again" / "losses.csv").read_bytes()


def test_unknown_config_key_rejected(small_dataset, tmp_path):
    manifest_path, _ = small_dataset
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nbatch_size = 4\nturbo = yes\n")
    rc = run_cli(
        "train", "--manifest", str(manifest_path), "--out", str(tmp_path / "x"),
        "--config", str(bad),
    )
    assert rc == 1


def test_training_divergence_maps_to_exit_3(monkeypatch, tmp_path):
    def explode(args, config):
        raise TrainingDiverged("boom")

    monkeypatch.setattr(cli, "cmd_train", explode)
    rc = run_cli("train", "--manifest", "m.csv", "--out", str(tmp_path / "r"))
    assert rc == 3


# ---------------------------------------------------------------------------
# eval


def test_eval_reproduces_logged_best_accuracy(trained_run, tmp_path):
    manifest_path, run_dir = trained_run
    rc = run_cli(
        "eval", "--checkpoint", str(run_dir / "ckpt_best.pt"),
        "--manifest", str(manifest_path), "--out", str(tmp_path / "ev"),
    )
    assert rc == 0
    with open(tmp_path / "ev" / "metrics_val.json") as fh:
        result = json.load(fh)
    with open(run_dir / "val_metrics.csv", newline="") as fh:
        logged = {int(r["epoch"]): float(r["accuracy"]) for r in csv.DictReader(fh)}
    assert abs(result["accuracy_exact"] - logged[result["checkpoint_epoch"]]) < 1e-9


def test_eval_train_and_val_reports_are_distinct_files(trained_run, tmp_path):
    manifest_path, run_dir = trained_run
    for split in ("train", "val"):
        rc = run_cli(
            "eval", "--checkpoint", str(run_dir / "ckpt_best.pt"),
            "--manifest", str(manifest_path), "--split", split,
            "--out", str(tmp_path / "ev2"),
        )
        assert rc == 0
    with open(tmp_path / "ev2" / "metrics_train.json") as fh:
        train_report = json.load(fh)
    with open(tmp_path / "ev2" / "metrics_val.json") as fh:
        val_report = json.load(fh)
    assert train_report["split"] == "train"
    assert val_report["split"] == "val"
    assert train_report["num_samples"] != val_report["num_samples"]


def test_eval_corrupt_checkpoint_exit_2(trained_run, tmp_path):
    manifest_path, _ = trained_run
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"\x00\x01garbage")
    rc = run_cli(
        "eval", "--checkpoint", str(bad), "--manifest", str(manifest_path),
        "--out", str(tmp_path / "ev3"),
    )
    assert rc == 2


# ---------------------------------------------------------------------------
# report


def test_report_single_run_artifacts(trained_run, tmp_path):
    _, run_dir = trained_run
    rc = run_cli("report", str(run_dir), "--out", str(tmp_path / "rep"))
    assert rc == 0
    with open(tmp_path / "rep" / "comparison.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["run", "objective", "Accuracy", "Average Precision", "Average Recall"]
    assert len(rows) == 2
    assert (tmp_path / "rep" / "disc_loss.png").is_file()

    with open(tmp_path / "rep" / "disc_loss.csv", newline="") as fh:
        series = list(csv.DictReader(fh))
    assert series, "expected discriminator series rows"
    assert all(abs(float(r["reference"]) - 2 * math.log(2)) < 1e-4 for r in series)


def test_report_without_completed_runs_exit_2(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    rc = run_cli("report", str(empty), "--out", str(tmp_path / "rep2"))
    assert rc == 2


# ---------------------------------------------------------------------------
# registry


def test_registry_appends_entries(workspace, small_dataset, tmp_path):
    manifest_path, _ = small_dataset
    rc = run_cli(
        "train", "--manifest", str(manifest_path), "--out", str(tmp_path / "reg"),
        "--epochs", "1", "--k", "3", "--side", "48", "--no-roi",
    )
    assert rc == 0
    registry = workspace / "runs.jsonl"
    assert registry.is_file()
    entries = [json.loads(line) for line in registry.read_text().splitlines()]
    train_entries = [e for e in entries if e["command"] == "train"]
    assert {e["status"] for e in train_entries} == {"started", "completed"}
    assert all("run_id" in e for e in entries)
