"""Command-line entry point wiring configs to every pipeline stage.

Commands: gen-data, preprocess, train, eval, report. Configuration comes
from defaults, overridden by an INI-style config file (or a run.json echo),
overridden by command-line flags. Exit codes: 1 config error, 2 data error,
3 training divergence.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import math
import os
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import evaluation, training
from .errors import ConfigError, DataError, TrainingDiverged
from .model import (
    AdversarialAutoencoderClassifier,
    ModelConfig,
    init_weights,
    load_checkpoint,
    model_from_checkpoint,
)
from .preprocess import PreprocessConfig, Preprocessor, load_image, save_image

# section -> key -> (parser, default); mirrors the module boundaries
_SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {"seed": (int, 0)},
    "data": {
        "manifest": (str, ""),
        "count": (int, 300),
        "image_size": (int, 64),
        "proportions": (str, "1/3,1/3,1/3"),
        "blob_range": (str, "0,5"),
    },
    "preprocess": {
        "side": (int, 64),
        "roi_enabled": (lambda s: _parse_bool(s), True),
        "roi_max_iters": (int, 300),
        "roi_tol": (float, 5e-4),
        "roi_mu": (float, 0.2),
        "rotation_degrees": (float, 15.0),
        "hflip_probability": (float, 0.5),
    },
    "model": {
        "latent_length": (int, 16),
        "num_classes": (int, 3),
        "backbone": (str, "small-conv"),
        "widths": (str, "16,32,64,128"),
        "pretrained_init": (str, ""),
    },
    "train": {
        "batch_size": (int, 8),
        "max_epochs": (int, 50),
        "early_stop_patience": (int, 10),
        "class_weight_scheme": (str, "none"),
        "reconstruction_mode": (str, "mean"),
    },
    "optimizer": {
        "learning_rate": (float, 1e-4),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "epsilon": (float, 1e-8),
    },
    "eval": {"k": (int, 5), "val_fold": (int, 0)},
}


def _parse_bool(text: str) -> bool:
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"cannot parse boolean value {text!r}")


def default_config() -> dict[str, dict]:
    return {sec: {k: default for k, (_, default) in keys.items()} for sec, keys in _SCHEMA.items()}


def load_config_file(path: str | Path) -> dict[str, dict]:
    """Read an INI config or a run.json echo and return {section: {key: value}}."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    if path.suffix == ".json":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        raw = data.get("config", data)
        sections = {sec: {k: str(v) for k, v in keys.items()} for sec, keys in raw.items()}
    else:
        parser = configparser.ConfigParser()
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        sections = {sec: dict(parser.items(sec)) for sec in parser.sections()}
    return sections


def merge_config(overrides: dict[str, dict]) -> dict[str, dict]:
    """Apply string overrides onto the defaults, rejecting unknown keys."""
    config = default_config()
    for section, keys in overrides.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in keys.items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            caster = _SCHEMA[section][key][0]
            try:
                config[section][key] = caster(value)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for {section}.{key}: {value!r}") from exc
    return config


def _parse_proportions(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(Fraction(tok.strip())) for tok in text.split(","))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"cannot parse proportions {text!r}") from exc


def _parse_int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(tok.strip()) for tok in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"cannot parse integer list {text!r}") from exc


def build_synth_config(config: dict) -> ds.SynthConfig:
    data = config["data"]
    blob_range = _parse_int_list(data["blob_range"])
    if len(blob_range) != 2:
        raise ConfigError(f"blob_range needs two integers, got {data['blob_range']!r}")
    return ds.SynthConfig(
        image_size=data["image_size"],
        class_proportions=_parse_proportions(data["proportions"]),
        specular_blob_count_range=blob_range,
        seed=config["run"]["seed"],
    )


def build_preprocess_config(config: dict) -> PreprocessConfig:
    pre = config["preprocess"]
    return PreprocessConfig(
        side=pre["side"],
        roi_enabled=pre["roi_enabled"],
        roi_max_iters=pre["roi_max_iters"],
        roi_tol=pre["roi_tol"],
        roi_mu=pre["roi_mu"],
        rotation_degrees=pre["rotation_degrees"],
        hflip_probability=pre["hflip_probability"],
    )


def build_model_config(config: dict) -> ModelConfig:
    model = config["model"]
    return ModelConfig(
        input_side=config["preprocess"]["side"],
        latent_length=model["latent_length"],
        num_classes=model["num_classes"],
        backbone=model["backbone"],
        widths=_parse_int_list(model["widths"]),
        pretrained_init=model["pretrained_init"] or None,
    )


def build_train_config(config: dict) -> training.TrainConfig:
    train = config["train"]
    return training.TrainConfig(
        batch_size=train["batch_size"],
        max_epochs=train["max_epochs"],
        early_stop_patience=train["early_stop_patience"],
        class_weight_scheme=train["class_weight_scheme"],
        seed=config["run"]["seed"],
        reconstruction_mode=train["reconstruction_mode"],
    )


def build_optimizer_spec(config: dict) -> training.OptimizerSpec:
    opt = config["optimizer"]
    return training.OptimizerSpec(
        learning_rate=opt["learning_rate"],
        beta1=opt["beta1"],
        beta2=opt["beta2"],
        epsilon=opt["epsilon"],
    )


# ---------------------------------------------------------------------------
# Run registry and run directories


def workspace_root() -> Path:
    return Path(os.environ.get("AAE_WORKSPACE", "."))


def make_run_id(config: dict) -> str:
    digest = hashlib.sha1(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()
    return time.strftime("%Y%m%d-%H%M%S") + "-" + digest[:8]


def registry_append(entry: dict) -> None:
    root = workspace_root()
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "runs.jsonl", "a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")


def write_run_json(out_dir: Path, run_id: str, command: str, config: dict, extra: dict) -> None:
    payload = {
        "run_id": run_id,
        "command": command,
        "config": config,
        **extra,
    }
    with open(out_dir / "run.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Commands


def _resolve_folds(manifest: ds.DatasetManifest, k: int, seed: int) -> tuple[ds.FoldSpec, str]:
    assigned = {r.id: r.fold for r in manifest.records if r.fold != ds.UNASSIGNED_FOLD}
    if len(assigned) == len(manifest.records):
        folds = set(assigned.values())
        if folds != set(range(len(folds))):
            raise DataError(f"manifest folds {sorted(folds)} are not contiguous from 0")
        return ds.FoldSpec(k=len(folds), assignments=assigned), "manifest"
    return ds.stratified_kfold(manifest, k, seed), "computed"


def cmd_gen_data(args, config: dict) -> int:
    synth = build_synth_config(config)
    run_id = make_run_id(config)
    manifest = ds.generate_synthetic(synth, config["data"]["count"], args.out)
    registry_append(
        {
            "run_id": run_id,
            "command": "gen-data",
            "status": "completed",
            "out_dir": str(args.out),
            "artifacts": ["manifest.csv", "genconfig.json", "images/"],
        }
    )
    print(f"wrote {len(manifest)} images across {manifest.num_classes} classes to {args.out}")
    return 0


def cmd_preprocess(args, config: dict) -> int:
    manifest = ds.load_manifest(args.manifest)
    pre = Preprocessor(build_preprocess_config(config))
    out_dir = Path(args.out)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    mask_dir = out_dir / "masks"

    rows = []
    records = []
    for rec in manifest.records:
        base, roi = pre.prepare_base(load_image(rec.path))
        target = img_dir / f"{rec.id}.png"
        save_image(base, target)
        records.append(ds.ImageRecord(rec.id, str(target), rec.label, rec.fold))
        if roi is not None:
            rows.append(
                [rec.id, roi.row_min, roi.row_max, roi.col_min, roi.col_max,
                 roi.fallback_used, roi.iterations]
            )
            if args.save_roi:
                save_image(roi.mask.astype(float), mask_dir / f"{rec.id}.png")
    ds.save_manifest(ds.DatasetManifest(records, manifest.num_classes), out_dir / "manifest.csv")
    artifacts = ["manifest.csv", "images/"]
    if args.save_roi and rows:
        with open(out_dir / "roi_report.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "row_min", "row_max", "col_min", "col_max",
                             "fallback_used", "iterations"])
            writer.writerows(rows)
        artifacts += ["roi_report.csv", "masks/"]
    registry_append({"run_id": make_run_id(config), "command": "preprocess",
                     "status": "completed", "out_dir": str(out_dir), "artifacts": artifacts})
    print(f"preprocessed {len(records)} images into {out_dir}")
    return 0


def cmd_train(args, config: dict) -> int:
    manifest_path = args.manifest or config["data"]["manifest"]
    if not manifest_path:
        raise ConfigError("train requires --manifest or data.manifest in config")
    manifest = ds.load_manifest(manifest_path)
    config["data"]["manifest"] = str(manifest_path)

    seed = config["run"]["seed"]
    folds, fold_source = _resolve_folds(manifest, config["eval"]["k"], seed)
    preprocess_config = build_preprocess_config(config)
    model_config = build_model_config(config)
    train_config = build_train_config(config)
    optimizer_spec = build_optimizer_spec(config)

    weights = None
    if train_config.class_weight_scheme != "none":
        weights = ds.compute_class_weights(manifest, train_config.class_weight_scheme)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    run_id = make_run_id(config)
    meta = {
        "manifest": str(manifest_path),
        "objective": "classifier-only" if args.baseline else "adversarial",
        "cv": bool(args.cv),
        "val_fold": config["eval"]["val_fold"],
        "folds": {"k": folds.k, "source": fold_source},
        "class_weights": None if weights is None else [round(w, 9) for w in weights.weights],
    }
    write_run_json(out_dir, run_id, "train", config, meta)
    registry_append({"run_id": run_id, "command": "train", "status": "started",
                     "out_dir": str(out_dir), "artifacts": []})
    try:
        if args.cv:
            evaluation.cross_validate(
                manifest, folds, model_config, preprocess_config, train_config,
                optimizer_spec, out_dir, baseline=args.baseline,
            )
            artifacts = ["cv_summary.json"] + [f"fold{f}/" for f in range(folds.k)]
        else:
            model = AdversarialAutoencoderClassifier(model_config)
            init_weights(model, seed=seed)
            preprocessor = Preprocessor(preprocess_config)
            state = training.train(
                model, manifest, folds, config["eval"]["val_fold"], preprocessor,
                train_config, optimizer_spec, out_dir, baseline=args.baseline,
            )
            artifacts = ["losses.csv", "val_metrics.csv", "ckpt_best.pt", "ckpt_last.pt"]
            print(
                f"best validation accuracy {state.best_val_accuracy:.4f} "
                f"at epoch {state.best_epoch} ({state.epoch} epochs run)"
            )
    except Exception:
        registry_append({"run_id": run_id, "command": "train", "status": "failed",
                         "out_dir": str(out_dir), "artifacts": []})
        raise
    registry_append({"run_id": run_id, "command": "train", "status": "completed",
                     "out_dir": str(out_dir), "artifacts": artifacts})
    return 0


def cmd_eval(args, config: dict, explicit: dict) -> int:
    ckpt_path = Path(args.checkpoint)
    payload = load_checkpoint(ckpt_path)
    model = model_from_checkpoint(payload)

    # default to the training run's own configuration when none was given
    run_json = ckpt_path.parent / "run.json"
    if not args.config and run_json.is_file():
        config = merge_config(_stringify(load_config_file(run_json)))
        config = _apply_overrides(config, explicit)

    manifest_path = args.manifest or config["data"]["manifest"]
    if not manifest_path:
        raise ConfigError("eval requires --manifest or data.manifest in config")
    manifest = ds.load_manifest(manifest_path)
    seed = config["run"]["seed"]
    folds, _ = _resolve_folds(manifest, config["eval"]["k"], seed)
    val_fold = config["eval"]["val_fold"]
    train_records, val_records = ds.split_records(manifest, folds, val_fold)
    records = val_records if args.split == "val" else train_records

    preprocessor = Preprocessor(build_preprocess_config(config))
    views = [preprocessor.eval_view(preprocessor.load_base(r.path)[0]) for r in records]
    preds = evaluation.predict(model, views, batch_size=config["train"]["batch_size"])
    truths = np.array([r.label for r in records])
    report = evaluation.compute_metrics(preds, truths, manifest.num_classes, fold_id=val_fold)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = {
        "split": args.split,
        "checkpoint": str(ckpt_path),
        "checkpoint_epoch": payload["epoch"],
        "num_samples": len(records),
        "accuracy_exact": report.accuracy,
        **report.as_dict(),
    }
    with open(out_dir / f"metrics_{args.split}.json", "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    evaluation.write_confusion_csv(out_dir / f"confusion_{args.split}.csv", report.confusion)
    registry_append({"run_id": make_run_id(config), "command": "eval", "status": "completed",
                     "out_dir": str(out_dir),
                     "artifacts": [f"metrics_{args.split}.json", f"confusion_{args.split}.csv"]})
    print(f"{args.split} accuracy {report.accuracy:.6f} over {len(records)} samples")
    return 0


def _epoch_discriminator_series(losses_csv: Path) -> tuple[list[int], list[float]]:
    sums: dict[int, list[float]] = {}
    with open(losses_csv, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            value = float(row["discriminator"])
            if math.isnan(value):
                continue
            sums.setdefault(int(row["epoch"]), []).append(value)
    epochs = sorted(sums)
    return epochs, [float(np.mean(sums[e])) for e in epochs]


def _run_metrics(run_dir: Path) -> dict | None:
    cv_summary = run_dir / "cv_summary.json"
    if cv_summary.is_file():
        with open(cv_summary, encoding="utf-8") as fh:
            summary = json.load(fh)
        return summary["mean"]
    val_metrics = run_dir / "val_metrics.csv"
    if val_metrics.is_file():
        best = None
        with open(val_metrics, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                if best is None or float(row["accuracy"]) > float(best["accuracy"]):
                    best = row
        if best is not None:
            return {
                "accuracy": float(best["accuracy"]),
                "macro_precision": float(best["macro_precision"]),
                "macro_recall": float(best["macro_recall"]),
            }
    return None


def cmd_report(args, config: dict) -> int:
    run_dirs = [Path(d) for d in args.run_dirs]
    runs = []
    for run_dir in run_dirs:
        run_json = run_dir / "run.json"
        if not run_json.is_file():
            continue
        with open(run_json, encoding="utf-8") as fh:
            meta = json.load(fh)
        metrics = _run_metrics(run_dir)
        if metrics is None:
            continue
        runs.append((run_dir, meta, metrics))
    if not runs:
        raise DataError("no completed runs found among the given directories")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    with open(out_dir / "comparison.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "objective", "Accuracy", "Average Precision", "Average Recall"])
        for run_dir, meta, metrics in runs:
            writer.writerow(
                [
                    run_dir.name,
                    meta.get("objective", "adversarial"),
                    f"{metrics['accuracy']:.6f}",
                    f"{metrics['macro_precision']:.6f}",
                    f"{metrics['macro_recall']:.6f}",
                ]
            )

    series = []
    for run_dir, meta, _ in runs:
        candidates = [run_dir / "losses.csv"] + sorted(run_dir.glob("fold*/losses.csv"))
        for losses_csv in candidates:
            if losses_csv.is_file():
                epochs, values = _epoch_discriminator_series(losses_csv)
                if epochs:
                    label = run_dir.name if losses_csv.parent == run_dir else (
                        f"{run_dir.name}/{losses_csv.parent.name}"
                    )
                    series.append((label, epochs, values))

    reference = training.DISCRIMINATOR_EQUILIBRIUM
    with open(out_dir / "disc_loss.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "epoch", "discriminator_loss", "reference"])
        for label, epochs, values in series:
            for epoch, value in zip(epochs, values):
                writer.writerow([label, epoch, f"{value:.6f}", f"{reference:.6f}"])

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label, epochs, values in series:
        ax.plot(epochs, values, label=label)
    ax.axhline(reference, color="black", linestyle="--", linewidth=1,
               label=f"2 ln 2 = {reference:.4f}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("discriminator loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_dir / "disc_loss.png", dpi=120)
    plt.close(fig)

    registry_append({"run_id": make_run_id(config), "command": "report", "status": "completed",
                     "out_dir": str(out_dir),
                     "artifacts": ["comparison.csv", "disc_loss.csv", "disc_loss.png"]})
    print(f"report with {len(runs)} run(s) written to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing and dispatch


def _stringify(sections: dict[str, dict]) -> dict[str, dict]:
    return {sec: {k: str(v) for k, v in keys.items()} for sec, keys in sections.items()}


def _flag_overrides(args) -> dict[str, dict]:
    """Map command-line flags onto (section, key) overrides; flags win."""
    mapping = {
        "seed": ("run", "seed"),
        "count": ("data", "count"),
        "image_size": ("data", "image_size"),
        "proportions": ("data", "proportions"),
        "blob_range": ("data", "blob_range"),
        "side": ("preprocess", "side"),
        "latent": ("model", "latent_length"),
        "num_classes": ("model", "num_classes"),
        "backbone": ("model", "backbone"),
        "batch_size": ("train", "batch_size"),
        "epochs": ("train", "max_epochs"),
        "patience": ("train", "early_stop_patience"),
        "weight_scheme": ("train", "class_weight_scheme"),
        "recon_mode": ("train", "reconstruction_mode"),
        "lr": ("optimizer", "learning_rate"),
        "k": ("eval", "k"),
        "val_fold": ("eval", "val_fold"),
    }
    overrides: dict[str, dict] = {}
    for attr, (section, key) in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides.setdefault(section, {})[key] = str(value)
    if getattr(args, "no_roi", False):
        overrides.setdefault("preprocess", {})["roi_enabled"] = "false"
    return overrides


def _apply_overrides(config: dict, overrides: dict[str, dict]) -> dict:
    merged = {sec: dict(keys) for sec, keys in _stringify(config).items()}
    for section, keys in overrides.items():
        merged.setdefault(section, {}).update(keys)
    return merge_config(merged)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aae",
        description="Adversarially trained autoencoder classifier pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="INI config file or a run.json echo")
        p.add_argument("--seed", type=int, help="global seed")
        p.add_argument("--out", required=True, help="output directory")

    p_gen = sub.add_parser("gen-data", help="generate the synthetic dataset")
    add_common(p_gen)
    p_gen.add_argument("--count", type=int)
    p_gen.add_argument("--image-size", dest="image_size", type=int)
    p_gen.add_argument("--proportions")
    p_gen.add_argument("--blob-range", dest="blob_range")

    p_pre = sub.add_parser("preprocess", help="run ROI crop + resize over a manifest")
    add_common(p_pre)
    p_pre.add_argument("--manifest", required=True)
    p_pre.add_argument("--side", type=int)
    p_pre.add_argument("--no-roi", dest="no_roi", action="store_true")
    p_pre.add_argument("--save-roi", dest="save_roi", action="store_true")

    p_train = sub.add_parser("train", help="train on one fold or all folds")
    add_common(p_train)
    p_train.add_argument("--manifest")
    p_train.add_argument("--cv", action="store_true", help="run all folds")
    p_train.add_argument("--baseline", action="store_true",
                         help="classifier-only control instead of the adversarial model")
    p_train.add_argument("--val-fold", dest="val_fold", type=int)
    p_train.add_argument("--k", type=int)
    p_train.add_argument("--batch-size", dest="batch_size", type=int)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--patience", type=int)
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--weight-scheme", dest="weight_scheme")
    p_train.add_argument("--recon-mode", dest="recon_mode")
    p_train.add_argument("--latent", type=int)
    p_train.add_argument("--num-classes", dest="num_classes", type=int)
    p_train.add_argument("--backbone")
    p_train.add_argument("--side", type=int)
    p_train.add_argument("--no-roi", dest="no_roi", action="store_true")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--manifest")
    p_eval.add_argument("--split", choices=("train", "val"), default="val")
    p_eval.add_argument("--val-fold", dest="val_fold", type=int)
    p_eval.add_argument("--k", type=int)

    p_rep = sub.add_parser("report", help="comparison table and loss plots")
    add_common(p_rep)
    p_rep.add_argument("run_dirs", nargs="+", help="completed run directories")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = _flag_overrides(args)
        file_sections = load_config_file(args.config) if args.config else {}
        config = merge_config(file_sections)
        config = _apply_overrides(config, overrides)

        if args.command == "gen-data":
            return cmd_gen_data(args, config)
        if args.command == "preprocess":
            return cmd_preprocess(args, config)
        if args.command == "train":
            return cmd_train(args, config)
        if args.command == "eval":
            return cmd_eval(args, config, overrides)
        if args.command == "report":
            return cmd_report(args, config)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, DataError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
