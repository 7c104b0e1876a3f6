"""Architecture and training configuration, plus ``key = value`` config files."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .tokens import EmbedConfig


@dataclass(frozen=True)
class ModelConfig:
    """All architecture hyperparameters.

    ``reduction`` acts per branch as r_g = r / 2^g, so the per-row output dim
    of branch g is embed_dim * 2^g / r (an expansion when r < 2^g).  Every
    branch feature then has exactly M * D / r dimensions.
    """

    image_height: int = 256
    image_width: int = 128
    patch_size: int = 16
    stride: int = 16
    embed_dim: int = 384
    num_class_tokens: int = 12
    num_cameras: int = 6
    side_weight: float = 3.0
    depth: int = 24
    state_dim: int = 8
    expand: int = 2
    conv_width: int = 4
    reduction: int = 4
    num_branches: int = 3
    fusion: str = "max"
    gem_power: float = 3.0
    drop_rate: float = 0.3

    def __post_init__(self) -> None:
        self.embed  # validates the geometry fields
        if self.depth < 3 and self.num_branches >= 1:
            raise ValueError("depth must be >= 3 (L - 2 shared blocks plus 2 per branch)")
        if self.state_dim < 1 or self.expand < 1 or self.conv_width < 1:
            raise ValueError("state_dim, expand and conv_width must be >= 1")
        if self.num_branches < 1:
            raise ValueError("num_branches must be >= 1")
        if self.reduction < 1:
            raise ValueError("reduction must be >= 1")
        if self.fusion not in ("min", "max", "avg", "gem"):
            raise ValueError(f"unknown fusion op {self.fusion!r}")
        if self.fusion == "gem" and self.gem_power <= 0:
            raise ValueError("gem_power must be > 0")
        if not 0 <= self.drop_rate < 1:
            raise ValueError("drop_rate must be in [0, 1)")
        for g in range(self.num_branches):
            if self.num_class_tokens % (2**g) != 0:
                raise ValueError(
                    f"num_class_tokens={self.num_class_tokens} not divisible by "
                    f"2^{g} for branch {g}"
                )
            if (self.embed_dim * 2**g) % self.reduction != 0:
                raise ValueError(
                    f"branch {g} row dim D*2^g/r = {self.embed_dim}*{2**g}/"
                    f"{self.reduction} is not an integer"
                )

    @property
    def embed(self) -> EmbedConfig:
        return EmbedConfig(
            image_height=self.image_height,
            image_width=self.image_width,
            patch_size=self.patch_size,
            stride=self.stride,
            embed_dim=self.embed_dim,
            num_class_tokens=self.num_class_tokens,
            num_cameras=self.num_cameras,
            side_weight=self.side_weight,
        )

    @property
    def inner_dim(self) -> int:
        return self.expand * self.embed_dim

    @property
    def feature_dim(self) -> int:
        """Per-branch global feature dimension M * D / r."""
        if (self.num_class_tokens * self.embed_dim) % self.reduction != 0:
            raise ValueError("M * D must be divisible by r")
        return self.num_class_tokens * self.embed_dim // self.reduction

    def branch_class_tokens(self, g: int) -> int:
        return self.num_class_tokens // (2**g)

    def branch_row_dim(self, g: int) -> int:
        """Output dimension of the per-row reduction map for branch g."""
        return self.embed_dim * (2**g) // self.reduction


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule, batch structure, and loss hyperparameters."""

    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    epochs: int = 160
    warmup_epochs: int = 5
    steps_per_epoch: int = 10
    base_lr: float = 0.008
    warmup_start_lr: float = 8e-5
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_p: int = 16
    batch_k: int = 4
    margin: float = 1.2
    label_smoothing: float = 0.1
    ratr_weight: float = 1.0
    ratr_tau: float = 0.1
    seed: int = 0
    flip_aug: bool = True
    crop_aug: bool = False
    erase_aug: bool = False
    eval_every: int = 100

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ValueError("epochs and steps_per_epoch must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("need 0 <= warmup_epochs < epochs")
        if self.base_lr <= 0 or self.warmup_start_lr <= 0 or self.momentum < 0:
            raise ValueError("learning rates must be positive, momentum >= 0")
        if self.batch_p < 2 or self.batch_k < 2:
            raise ValueError("batch structure needs P >= 2 identities, K >= 2 instances")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.ratr_weight < 0:
            raise ValueError("ratr_weight must be >= 0")
        if self.ratr_tau <= 0:
            raise ValueError("ratr_tau must be > 0")

    @property
    def batch_size(self) -> int:
        return self.batch_p * self.batch_k

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch


def desk_model_config(**overrides) -> ModelConfig:
    """Small configuration that trains in minutes on a CPU."""
    defaults = dict(
        image_height=64,
        image_width=32,
        patch_size=16,
        stride=16,
        embed_dim=64,
        num_class_tokens=4,
        num_cameras=4,
        side_weight=3.0,
        depth=6,
        state_dim=8,
        expand=2,
        conv_width=4,
        reduction=2,
        num_branches=2,
        fusion="max",
        drop_rate=0.1,
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


def desk_train_config(**overrides) -> TrainConfig:
    defaults = dict(
        model=desk_model_config(),
        epochs=30,
        warmup_epochs=2,
        steps_per_epoch=10,
        base_lr=0.008,
        warmup_start_lr=8e-5,
        batch_p=8,
        batch_k=4,
        seed=0,
        flip_aug=True,
        crop_aug=False,
        erase_aug=True,
        eval_every=100,
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Read a line-oriented ``key = value`` file; '#' starts a comment."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _coerce(value: str, target_type: type):
    if target_type is bool:
        lowered = value.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean from {value!r}")
    return target_type(value)


def apply_overrides(
    model_cfg: ModelConfig, train_cfg: TrainConfig, values: dict[str, object]
) -> tuple[ModelConfig, TrainConfig]:
    """Apply a flat key -> value mapping on top of the given configurations.

    Keys are field names of ModelConfig or TrainConfig; string values are
    coerced to the field type.  Unknown keys raise.
    """
    model_fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    train_fields = {
        f.name: f for f in dataclasses.fields(TrainConfig) if f.name != "model"
    }
    model_updates: dict[str, object] = {}
    train_updates: dict[str, object] = {}
    for key, value in values.items():
        if key in model_fields:
            ftype = model_fields[key].type
            target = {"int": int, "float": float, "str": str, "bool": bool}[ftype]
            model_updates[key] = _coerce(value, target) if isinstance(value, str) else value
        elif key in train_fields:
            ftype = train_fields[key].type
            target = {"int": int, "float": float, "str": str, "bool": bool}[ftype]
            train_updates[key] = _coerce(value, target) if isinstance(value, str) else value
        else:
            raise ValueError(f"unknown configuration key {key!r}")
    new_model = dataclasses.replace(model_cfg, **model_updates)
    new_train = dataclasses.replace(train_cfg, model=new_model, **train_updates)
    return new_model, new_train
