"""Three-phase per-batch training: reconstruction, adversarial regularization
(discriminator then generator), and supervised classification, each with its
own optimizer so gradients never leak across phase boundaries.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import dataset as ds
from .errors import ConfigError, TrainingDiverged
from .model import (
    AdversarialAutoencoderClassifier,
    parameter_groups,
    sample_real_categorical,
    save_checkpoint,
)
from .preprocess import Preprocessor

PROB_FLOOR = 1e-12

# discriminator loss when both branches output [0.5, 0.5]
DISCRIMINATOR_EQUILIBRIUM = 2.0 * math.log(2.0)

RECONSTRUCTION_MODES = ("mean", "sum")

PHASES = ("reconstruction", "discriminator", "generator", "classification")


@dataclass(frozen=True)
class OptimizerSpec:
    algorithm: str = "adam"
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.algorithm != "adam":
            raise ConfigError(f"unsupported optimizer {self.algorithm!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    max_epochs: int = 50
    early_stop_patience: int = 10
    class_weight_scheme: str = "none"
    seed: int = 0
    reconstruction_mode: str = "mean"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if self.class_weight_scheme not in ds.WEIGHT_SCHEMES:
            raise ConfigError(f"unknown class_weight_scheme {self.class_weight_scheme!r}")
        if self.reconstruction_mode not in RECONSTRUCTION_MODES:
            raise ConfigError(
                f"reconstruction_mode must be one of {RECONSTRUCTION_MODES}"
            )


@dataclass
class PhaseLosses:
    reconstruction: float
    discriminator: float
    generator: float
    classification: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def all_finite(self) -> bool:
        return all(math.isfinite(v) for v in asdict(self).values())


@dataclass
class TrainState:
    epoch: int = 0
    best_val_accuracy: float = float("-inf")
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    loss_history: dict[str, list[float]] = field(
        default_factory=lambda: {p: [] for p in PHASES}
    )
    val_accuracy_history: list[float] = field(default_factory=list)
    batch_digests: list[str] = field(default_factory=list)
    optimizer_states: dict[str, dict] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Loss functions. All probability inputs are clamped to [1e-12, 1] before
# logs so every loss stays finite on the closed simplex.


def reconstruction_loss(recon: torch.Tensor, target: torch.Tensor, mode: str = "mean") -> torch.Tensor:
    """Squared error summed per sample and averaged over the batch ("sum"),
    optionally further averaged over pixels and channels ("mean").
    """
    if recon.shape != target.shape:
        raise ConfigError(f"shape mismatch {tuple(recon.shape)} vs {tuple(target.shape)}")
    if mode not in RECONSTRUCTION_MODES:
        raise ConfigError(f"unknown reconstruction mode {mode!r}")
    per_sample = (recon - target).pow(2).reshape(recon.shape[0], -1).sum(dim=1)
    loss = per_sample.mean()
    if mode == "mean":
        loss = loss / recon[0].numel()
    return loss


def _clamped_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(PROB_FLOOR, 1.0))


def discriminator_loss(y_hat_real: torch.Tensor, y_hat_fake: torch.Tensor) -> torch.Tensor:
    """Cross-entropy for real samples scored real plus fakes scored fake."""
    if y_hat_real.shape != y_hat_fake.shape or y_hat_real.shape[-1] != 2:
        raise ConfigError("discriminator outputs must be matching (batch, 2) tensors")
    return (-_clamped_log(y_hat_real[..., 1]) - _clamped_log(y_hat_fake[..., 0])).mean()


def generator_loss(y_hat_fake: torch.Tensor) -> torch.Tensor:
    """Cross-entropy for fakes scored real (the encoder fooling the judge)."""
    if y_hat_fake.shape[-1] != 2:
        raise ConfigError("discriminator output must have two columns")
    return (-_clamped_log(y_hat_fake[..., 1])).mean()


def classification_loss(
    probs: torch.Tensor,
    onehot: torch.Tensor,
    weights=None,
) -> torch.Tensor:
    """Cross-entropy against one-hot targets, optionally scaled per sample by
    the weight of its target class.
    """
    if probs.shape != onehot.shape:
        raise ConfigError(f"shape mismatch {tuple(probs.shape)} vs {tuple(onehot.shape)}")
    per_sample = -(onehot * _clamped_log(probs)).sum(dim=1)
    if weights is not None:
        if isinstance(weights, ds.ClassWeights):
            weights = weights.weights
        w = torch.as_tensor(np.asarray(weights), dtype=probs.dtype, device=probs.device)
        per_sample = per_sample * (onehot * w).sum(dim=1)
    return per_sample.mean()


# ---------------------------------------------------------------------------
# Phase steps. Each step clears all gradients, recomputes its own forward
# pass, and steps an optimizer that holds only the phase's target group, so
# parameters outside that group are bit-identical before and after.


def make_optimizers(
    model: AdversarialAutoencoderClassifier, spec: OptimizerSpec
) -> dict[str, torch.optim.Optimizer]:
    """Independent optimizer (own moment buffers) per phase-and-group pairing."""
    groups = parameter_groups(model)

    def adam(params):
        return torch.optim.Adam(
            params, lr=spec.learning_rate, betas=(spec.beta1, spec.beta2), eps=spec.epsilon
        )

    return {
        "reconstruction": adam(groups.encoder_params + groups.decoder_params),
        "discriminator": adam(groups.discriminator_params),
        "generator": adam(groups.encoder_params),
        "classification": adam(groups.encoder_params),
    }


def reconstruction_step(model, images, optimizer, mode: str = "mean") -> float:
    model.zero_grad(set_to_none=True)
    recon, _ = model(images)
    loss = reconstruction_loss(recon, images, mode)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def discriminator_step(model, images, optimizer, sampler: torch.Generator) -> float:
    model.zero_grad(set_to_none=True)
    with torch.no_grad():
        fake = model.encode(images).c
    real = sample_real_categorical(
        model.config.num_classes, images.shape[0], sampler, dtype=fake.dtype
    )
    loss = discriminator_loss(model.discriminate(real), model.discriminate(fake))
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def generator_step(model, images, optimizer) -> float:
    model.zero_grad(set_to_none=True)
    fake = model.encode(images).c
    loss = generator_loss(model.discriminate(fake))
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def classification_step(model, images, onehot, optimizer, weights=None) -> float:
    model.zero_grad(set_to_none=True)
    probs = model.encode(images).c
    loss = classification_loss(probs, onehot, weights)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def train_batch(
    model: AdversarialAutoencoderClassifier,
    images: torch.Tensor,
    onehot: torch.Tensor,
    optimizers: dict[str, torch.optim.Optimizer],
    sampler: torch.Generator,
    *,
    recon_mode: str = "mean",
    class_weights=None,
) -> PhaseLosses:
    """One pass of all three phases over a batch, in the fixed order
    reconstruction -> discriminator -> generator -> classification.
    """
    l_rec = reconstruction_step(model, images, optimizers["reconstruction"], recon_mode)
    l_dis = discriminator_step(model, images, optimizers["discriminator"], sampler)
    l_gen = generator_step(model, images, optimizers["generator"])
    l_cls = classification_step(model, images, onehot, optimizers["classification"], class_weights)
    return PhaseLosses(l_rec, l_dis, l_gen, l_cls)


# ---------------------------------------------------------------------------
# Epoch loop


class EarlyStopper:
    """Stops once validation accuracy has not strictly improved for
    `patience` consecutive epochs; remembers the best epoch.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("-inf")
        self.best_epoch = 0
        self.stale = 0

    def update(self, accuracy: float, epoch: int) -> bool:
        if accuracy > self.best:
            self.best = accuracy
            self.best_epoch = epoch
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def to_tensor_batch(views: list[np.ndarray], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack(views)).to(dtype)


def _format(value: float) -> str:
    return repr(float(value))


def train(
    model: AdversarialAutoencoderClassifier,
    manifest: ds.DatasetManifest,
    folds: ds.FoldSpec,
    val_fold: int,
    preprocessor: Preprocessor,
    train_config: TrainConfig,
    optimizer_spec: OptimizerSpec,
    out_dir: str | Path,
    *,
    baseline: bool = False,
) -> TrainState:
    """Run the epoch loop on all folds except `val_fold`, evaluating on the
    held-out fold after each epoch.

    Emits losses.csv (per batch), val_metrics.csv (per epoch), ckpt_best.pt,
    and ckpt_last.pt under `out_dir`; restores the best-accuracy weights into
    the model before returning. With `baseline=True` only the classification
    phase runs (no decoder, no discriminator updates).
    """
    from .evaluation import compute_metrics, predict  # deferred: avoids import cycle

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_records, val_records = ds.split_records(manifest, folds, val_fold)

    weights = None
    if train_config.class_weight_scheme != "none":
        weights = ds.compute_class_weights(manifest, train_config.class_weight_scheme)

    bases = {
        rec.id: preprocessor.load_base(rec.path)[0]
        for rec in manifest.records
    }
    val_views = [preprocessor.eval_view(bases[r.id]) for r in val_records]
    val_labels = np.array([r.label for r in val_records])

    optimizers = make_optimizers(model, optimizer_spec)
    sampler = torch.Generator().manual_seed(train_config.seed)
    shuffle_rng = np.random.default_rng(train_config.seed)
    stopper = EarlyStopper(train_config.early_stop_patience)
    state = TrainState()
    num_classes = manifest.num_classes
    eye = np.eye(num_classes, dtype=np.float32)

    losses_path = out_dir / "losses.csv"
    metrics_path = out_dir / "val_metrics.csv"
    with open(losses_path, "w", newline="", encoding="utf-8") as loss_fh, open(
        metrics_path, "w", newline="", encoding="utf-8"
    ) as metric_fh:
        loss_csv = csv.writer(loss_fh)
        loss_csv.writerow(["epoch", "batch"] + list(PHASES))
        metric_csv = csv.writer(metric_fh)
        metric_csv.writerow(["epoch", "accuracy", "macro_precision", "macro_recall"])

        for epoch in range(1, train_config.max_epochs + 1):
            perm = shuffle_rng.permutation(len(train_records))
            digest = hashlib.sha1(
                ",".join(train_records[i].id for i in perm).encode()
            ).hexdigest()
            state.batch_digests.append(digest)

            sums = {p: 0.0 for p in PHASES}
            n_batches = 0
            for start in range(0, len(perm), train_config.batch_size):
                chunk = perm[start : start + train_config.batch_size]
                views = [
                    preprocessor.train_view(
                        bases[train_records[i].id],
                        np.random.default_rng([train_config.seed, epoch, int(i)]),
                    )
                    for i in chunk
                ]
                images = to_tensor_batch(views)
                onehot = torch.from_numpy(eye[[train_records[i].label for i in chunk]])

                if baseline:
                    l_cls = classification_step(
                        model, images, onehot, optimizers["classification"], weights
                    )
                    losses = PhaseLosses(float("nan"), float("nan"), float("nan"), l_cls)
                    diverged = not math.isfinite(l_cls)
                else:
                    losses = train_batch(
                        model,
                        images,
                        onehot,
                        optimizers,
                        sampler,
                        recon_mode=train_config.reconstruction_mode,
                        class_weights=weights,
                    )
                    diverged = not losses.all_finite()
                if diverged:
                    _dump_divergence(out_dir, model, epoch, n_batches, losses)
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} batch {n_batches}: "
                        f"{losses.as_dict()}"
                    )
                loss_csv.writerow(
                    [epoch, n_batches] + [_format(v) for v in losses.as_dict().values()]
                )
                for phase, value in losses.as_dict().items():
                    sums[phase] += value
                n_batches += 1

            for phase in PHASES:
                state.loss_history[phase].append(sums[phase] / max(n_batches, 1))

            preds = predict(model, val_views, batch_size=train_config.batch_size)
            report = compute_metrics(preds, val_labels, num_classes)
            state.val_accuracy_history.append(report.accuracy)
            metric_csv.writerow(
                [epoch]
                + [_format(v) for v in (report.accuracy, report.macro_precision, report.macro_recall)]
            )
            state.epoch = epoch

            rng_states = {
                "sampler": sampler.get_state(),
                "shuffle": shuffle_rng.bit_generator.state,
            }
            save_checkpoint(out_dir / "ckpt_last.pt", model, epoch,
                            extra={"val_accuracy": report.accuracy}, rng_states=rng_states)
            improved = report.accuracy > stopper.best
            should_stop = stopper.update(report.accuracy, epoch)
            if improved:
                save_checkpoint(out_dir / "ckpt_best.pt", model, epoch,
                                extra={"val_accuracy": report.accuracy}, rng_states=rng_states)
            state.best_val_accuracy = stopper.best
            state.best_epoch = stopper.best_epoch
            state.epochs_since_improvement = stopper.stale
            if should_stop:
                break

    state.optimizer_states = {name: opt.state_dict() for name, opt in optimizers.items()}
    _restore_best(model, out_dir / "ckpt_best.pt")
    return state


def _restore_best(model: AdversarialAutoencoderClassifier, best_path: Path) -> None:
    from .model import load_checkpoint

    if best_path.is_file():
        payload = load_checkpoint(best_path)
        model.encoder.load_state_dict(payload["params"]["encoder"])
        model.decoder.load_state_dict(payload["params"]["decoder"])
        model.discriminator.load_state_dict(payload["params"]["discriminator"])


def _dump_divergence(out_dir: Path, model, epoch: int, batch: int, losses: PhaseLosses) -> None:
    save_checkpoint(out_dir / "ckpt_diverged.pt", model, epoch,
                    extra={"batch": batch, "losses": losses.as_dict()})
    with open(out_dir / "divergence.json", "w", encoding="utf-8") as fh:
        json.dump({"epoch": epoch, "batch": batch, "losses": losses.as_dict()}, fh, indent=2)
        fh.write("\n")
