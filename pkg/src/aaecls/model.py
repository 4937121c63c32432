"""Encoder with dual latent/categorical heads, mirrored decoder, and the
two-layer categorical discriminator, with explicit parameter groups.

Public tensors are channel-last (batch, H, W, 3) to match the pipeline's
image currency; convolution stacks run NCHW internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DataError

BACKBONES = ("small-conv", "vgg16-style")

# conv widths per stage; each stage halves the spatial side
_VGG16_STAGES = ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512))

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_side: int = 64
    latent_length: int = 16
    num_classes: int = 3
    backbone: str = "small-conv"
    widths: tuple[int, ...] = (16, 32, 64, 128)
    pretrained_init: str | None = None

    def __post_init__(self):
        if self.latent_length < 1:
            raise DataError(f"latent_length must be >= 1, got {self.latent_length}")
        if self.num_classes < 2:
            raise DataError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.backbone not in BACKBONES:
            raise DataError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")
        if not self.widths:
            raise DataError("widths must name at least one stage")
        factor = 2 ** self.depth
        if self.input_side % factor != 0 or self.input_side // factor < 1:
            raise DataError(
                f"input_side {self.input_side} not divisible by the backbone's "
                f"downsampling factor {factor}"
            )

    @property
    def depth(self) -> int:
        return 5 if self.backbone == "vgg16-style" else len(self.widths)

    @property
    def stage_widths(self) -> tuple[int, ...]:
        if self.backbone == "vgg16-style":
            return tuple(stage[-1] for stage in _VGG16_STAGES)
        return self.widths


class EncoderOutput(NamedTuple):
    z: torch.Tensor  # (batch, latent_length), unconstrained
    c: torch.Tensor  # (batch, num_classes), rows on the probability simplex


class Encoder(nn.Module):
    """Conv backbone -> spatial average pooling -> parallel z and c heads."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.backbone == "vgg16-style":
            layers: list[nn.Module] = []
            in_ch = 3
            for stage in _VGG16_STAGES:
                for width in stage:
                    layers += [nn.Conv2d(in_ch, width, 3, padding=1), nn.ReLU(inplace=True)]
                    in_ch = width
                layers.append(nn.MaxPool2d(2))
            self.backbone = nn.Sequential(*layers)
        else:
            layers = []
            in_ch = 3
            for width in config.widths:
                layers += [nn.Conv2d(in_ch, width, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
                in_ch = width
            self.backbone = nn.Sequential(*layers)
        feat = config.stage_widths[-1]
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.latent_head = nn.Linear(feat, config.latent_length)
        self.class_head = nn.Linear(feat, config.num_classes)

    def forward(self, images: torch.Tensor) -> EncoderOutput:
        x = images.permute(0, 3, 1, 2)
        pooled = self.pool(self.backbone(x)).flatten(1)
        z = self.latent_head(pooled)
        c = F.softmax(self.class_head(pooled), dim=1)
        return EncoderOutput(z=z, c=c)


class Decoder(nn.Module):
    """Concatenated (z, c) -> affine expansion -> upsample-conv stack."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        widths = list(config.stage_widths)
        self.base_side = config.input_side // 2**config.depth
        self.base_channels = widths[-1]
        self.expand = nn.Linear(
            config.latent_length + config.num_classes,
            self.base_channels * self.base_side**2,
        )
        rev = widths[::-1]
        stages: list[nn.Module] = []
        in_ch = rev[0]
        for i in range(config.depth):
            out_ch = rev[i + 1] if i + 1 < len(rev) else rev[-1]
            stages += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(in_ch, out_ch, 3, padding=1),
                nn.ReLU(inplace=True),
            ]
            in_ch = out_ch
        self.stack = nn.Sequential(*stages)
        self.output = nn.Conv2d(in_ch, 3, 3, padding=1)

    def forward(self, z: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        code = torch.cat([z, c], dim=1)
        x = F.relu(self.expand(code))
        x = x.reshape(-1, self.base_channels, self.base_side, self.base_side)
        x = self.output(self.stack(x))
        return x.permute(0, 2, 3, 1)


class Discriminator(nn.Module):
    """Input layer (num_classes neurons) fully connected to two output
    neurons, followed by a softmax: P(fake) at index 0, P(real) at index 1.
    """

    def __init__(self, num_classes: int):
        super().__init__()
        self.out = nn.Linear(num_classes, 2)

    def logits(self, c: torch.Tensor) -> torch.Tensor:
        return self.out(c)

    def forward(self, c: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.logits(c), dim=1)


class AdversarialAutoencoderClassifier(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)
        self.discriminator = Discriminator(config.num_classes)

    def encode(self, images: torch.Tensor) -> EncoderOutput:
        if images.ndim != 4 or images.shape[1:] != (self.config.input_side,
                                                    self.config.input_side, 3):
            raise DataError(
                f"expected batch of shape (B, {self.config.input_side}, "
                f"{self.config.input_side}, 3), got {tuple(images.shape)}"
            )
        return self.encoder(images)

    def decode(self, z: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        if z.shape[1] != self.config.latent_length or c.shape[1] != self.config.num_classes:
            raise DataError(
                f"expected z length {self.config.latent_length} and c length "
                f"{self.config.num_classes}, got {z.shape[1]} and {c.shape[1]}"
            )
        return self.decoder(z, c)

    def discriminate(self, c: torch.Tensor) -> torch.Tensor:
        if c.shape[-1] != self.config.num_classes:
            raise DataError(f"expected c length {self.config.num_classes}, got {c.shape[-1]}")
        return self.discriminator(c)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, EncoderOutput]:
        encoded = self.encode(images)
        return self.decode(encoded.z, encoded.c), encoded


@dataclass
class ParameterGroups:
    encoder_params: list[nn.Parameter]
    decoder_params: list[nn.Parameter]
    discriminator_params: list[nn.Parameter]


def parameter_groups(model: AdversarialAutoencoderClassifier) -> ParameterGroups:
    """Disjoint trainable groups; the encoder group includes both heads."""
    return ParameterGroups(
        encoder_params=list(model.encoder.parameters()),
        decoder_params=list(model.decoder.parameters()),
        discriminator_params=list(model.discriminator.parameters()),
    )


def sample_real_categorical(
    num_classes: int,
    batch_size: int,
    generator: torch.Generator,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """One-hot vectors with the hot index uniform over the classes."""
    if num_classes < 2:
        raise DataError(f"num_classes must be >= 2, got {num_classes}")
    idx = torch.randint(0, num_classes, (batch_size,), generator=generator)
    return F.one_hot(idx, num_classes).to(dtype)


def init_weights(
    model: AdversarialAutoencoderClassifier,
    config: ModelConfig | None = None,
    seed: int = 0,
) -> AdversarialAutoencoderClassifier:
    """Fan-in-scaled uniform initialization, seeded; biases start at zero.

    When the config names a pretrained weight source, backbone tensors are
    then overwritten from it; heads and decoder stay randomly initialized.
    """
    config = config or model.config
    generator = torch.Generator().manual_seed(seed)
    for name, param in model.named_parameters():
        with torch.no_grad():
            if param.ndim >= 2:
                fan_in = param.shape[1] * math.prod(param.shape[2:])
                bound = math.sqrt(6.0 / fan_in)
                param.uniform_(-bound, bound, generator=generator)
            else:
                param.zero_()
    if config.pretrained_init:
        _load_backbone_weights(model, config.pretrained_init)
    return model


def _load_backbone_weights(model: AdversarialAutoencoderClassifier, source: str) -> None:
    path = Path(source)
    if not path.is_file():
        raise DataError(f"pretrained weight source not found: {path}")
    loaded = torch.load(path, map_location="cpu", weights_only=True)
    state = model.encoder.backbone.state_dict()
    for key, tensor in loaded.items():
        if key not in state:
            raise DataError(f"pretrained source has unknown backbone layer {key!r}")
        if tuple(tensor.shape) != tuple(state[key].shape):
            raise DataError(
                f"pretrained layer {key!r} has shape {tuple(tensor.shape)}, "
                f"expected {tuple(state[key].shape)}"
            )
        state[key] = tensor
    model.encoder.backbone.load_state_dict(state)


# ---------------------------------------------------------------------------
# Checkpoint container: config echo, parameter arrays keyed by group and
# layer name, rng states, and epoch counter.


def save_checkpoint(
    path: str | Path,
    model: AdversarialAutoencoderClassifier,
    epoch: int = 0,
    extra: dict | None = None,
    rng_states: dict | None = None,
) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "params": {
            "encoder": model.encoder.state_dict(),
            "decoder": model.decoder.state_dict(),
            "discriminator": model.discriminator.state_dict(),
        },
        "epoch": epoch,
        "rng_states": rng_states or {},
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise DataError(f"{path} is not a checkpoint file")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise DataError(
            f"checkpoint version {payload['format_version']} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    return payload


def model_from_checkpoint(payload: dict) -> AdversarialAutoencoderClassifier:
    config = ModelConfig(**payload["model_config"])
    model = AdversarialAutoencoderClassifier(config)
    try:
        model.encoder.load_state_dict(payload["params"]["encoder"])
        model.decoder.load_state_dict(payload["params"]["decoder"])
        model.discriminator.load_state_dict(payload["params"]["discriminator"])
    except (KeyError, RuntimeError) as exc:
        raise DataError(f"checkpoint does not match its declared config: {exc}") from exc
    return model
