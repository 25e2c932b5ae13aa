"""Configuration dataclasses shared across the model, data, and training modules."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, replace

TASKS = ("binary", "multiclass")


class ConfigError(ValueError):
    """Raised when a configuration is internally inconsistent or incompatible."""


def infection_classes_for_task(task: str) -> int:
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}, expected one of {TASKS}")
    return 1 if task == "binary" else 3


@dataclass(frozen=True)
class ModelConfig:
    """Every architecture hyperparameter, including the three ablation toggles.

    The token grid is ``(image_size / patch_size)**2`` patches; the four tapped
    transformer layers are upsampled through the ladder and concatenated into
    the five-stage convolutional encoder.
    """

    input_channels: int = 3
    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 768
    depth: int = 12
    heads: int = 12
    mlp_dim: int = 3072
    tap_layers: tuple[int, int, int, int] = (4, 7, 10, 12)
    encoder_channels: tuple[int, int, int, int, int] = (64, 128, 256, 512, 1024)
    num_infection_classes: int = 1
    use_attention_gates: bool = True
    use_dual_decoder: bool = True
    use_transformer_encoder: bool = True
    pretrained_transformer: str | None = None

    def __post_init__(self):
        if self.input_channels < 1:
            raise ConfigError("input_channels must be >= 1")
        if self.image_size < 1 or self.patch_size < 1:
            raise ConfigError("image_size and patch_size must be positive")
        log2_patch = math.log2(self.patch_size)
        if log2_patch != int(log2_patch) or self.patch_size < 16:
            raise ConfigError(
                "patch_size must be a power of two >= 16 so the upsampling "
                "ladder (3, 2, 1, 0 doublings) can reach the encoder stages"
            )
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if len(self.tap_layers) != 4:
            raise ConfigError("tap_layers must name exactly four layers")
        if any(t < 1 or t > self.depth for t in self.tap_layers):
            raise ConfigError(f"tap_layers {self.tap_layers} out of range 1..{self.depth}")
        if any(b < a for a, b in zip(self.tap_layers, self.tap_layers[1:])):
            raise ConfigError(f"tap_layers {self.tap_layers} must be non-decreasing")
        if len(self.encoder_channels) != 5:
            raise ConfigError("encoder_channels must list five stage widths")
        if any(c < 1 for c in self.encoder_channels):
            raise ConfigError("encoder_channels must be strictly positive")
        if self.num_infection_classes not in (1, 3):
            raise ConfigError("num_infection_classes must be 1 (binary) or 3 (multiclass)")
        # tuples survive a round trip through dict/json configs
        object.__setattr__(self, "tap_layers", tuple(self.tap_layers))
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def injection_channels(self) -> tuple[int, int, int, int]:
        """Widths of the four ladder outputs: half the stage they feed into."""
        return tuple(max(c // 2, 1) for c in self.encoder_channels[1:])

    @property
    def ladder_upsample_counts(self) -> tuple[int, int, int, int]:
        """Doublings needed to lift the token grid to each injected stage."""
        base = int(math.log2(self.patch_size))
        return tuple(base - stage for stage in (1, 2, 3, 4))

    @property
    def task(self) -> str:
        return "binary" if self.num_infection_classes == 1 else "multiclass"


def tiny_model_config(task: str = "binary", image_size: int = 64, **overrides) -> ModelConfig:
    """A reduced configuration whose invariants run in seconds on a CPU."""
    cfg = ModelConfig(
        input_channels=3,
        image_size=image_size,
        patch_size=16,
        embed_dim=96,
        depth=4,
        heads=4,
        mlp_dim=192,
        tap_layers=(1, 2, 3, 4),
        encoder_channels=(16, 32, 64, 128, 256),
        num_infection_classes=infection_classes_for_task(task),
    )
    return replace(cfg, **overrides) if overrides else cfg


@dataclass(frozen=True)
class TrainConfig:
    """Optimization protocol: schedule, batch size, loss weights, repeat runs."""

    epochs: int = 60
    base_lr: float = 0.1
    decay_epochs: tuple[int, ...] = (30, 50)
    decay_factor: float = 0.1
    batch_size: int = 6
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    infection_loss_weight: float = 0.7
    lung_loss_weight: float = 0.3
    task: str = "binary"
    runs: int = 5
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    validation_fraction: float = 0.1
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if abs(self.infection_loss_weight + self.lung_loss_weight - 1.0) > 1e-9:
            raise ConfigError("loss weights must sum to 1.0")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigError("decay_epochs must be strictly increasing")
        if any(d < 0 or d >= self.epochs for d in self.decay_epochs):
            raise ConfigError("decay_epochs must lie inside 0..epochs-1")
        if self.runs != len(self.seeds):
            raise ConfigError(f"runs={self.runs} but {len(self.seeds)} seeds given")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must be in [0, 1)")
        object.__setattr__(self, "decay_epochs", tuple(self.decay_epochs))
        object.__setattr__(self, "seeds", tuple(self.seeds))
        object.__setattr__(self, "betas", tuple(self.betas))

    @property
    def loss_weights(self) -> tuple[float, float]:
        return (self.infection_loss_weight, self.lung_loss_weight)


@dataclass(frozen=True)
class SplitSpec:
    """Deterministic train/test partition: same spec, same membership."""

    train_fraction: float = 0.7
    seed: int = 0
    granularity: str = "slice"

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must be in (0, 1)")
        if self.granularity not in ("slice", "scan"):
            raise ConfigError("granularity must be 'slice' or 'scan'")


def config_hash(model_config: ModelConfig, task: str) -> str:
    """Stable hash binding checkpoints to the architecture and task they serve."""
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    doc = {"model": asdict(model_config), "task": task}
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
