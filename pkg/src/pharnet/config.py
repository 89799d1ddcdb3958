"""Model and training configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

VGG_WIDTH = 64

# Table of ablation variants: (residual encoder, feature discriminators, image discriminator)
ABLATIONS: dict[str, tuple[bool, bool, bool]] = {
    "V1": (False, False, False),
    "V2": (False, False, True),
    "V3": (True, False, True),
    "V4": (True, True, True),
}


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    max_steps: int = 1000
    seed: int = 0
    image_size: int = 256
    scale: int = 1
    use_residual_encoder: bool = True
    use_feature_disc: bool = True
    use_image_disc: bool = True
    use_blending: bool = True
    residual_layers: tuple[int, ...] = (1, 2, 3, 4)
    checkpoint_every: int = 100
    encoder_seed: int = 1234
    encoder_weights: str | None = None
    loss_weights: dict[str, float] = field(
        default_factory=lambda: {"content": 1.0, "style": 1.0, "adv_feat": 1.0, "adv_img": 1.0}
    )

    def __post_init__(self):
        self.residual_layers = tuple(sorted(set(int(l) for l in self.residual_layers)))
        self.validate()

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not set(self.residual_layers) <= {1, 2, 3, 4}:
            raise ConfigError(f"residual_layers must be a subset of {{1,2,3,4}}, got {self.residual_layers}")
        if self.scale < 1 or VGG_WIDTH % self.scale:
            raise ConfigError(f"scale must divide {VGG_WIDTH}, got {self.scale}")
        if self.image_size % 8:
            raise ConfigError(f"image_size must be a multiple of 8, got {self.image_size}")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be non-negative")

    @property
    def width(self) -> int:
        return VGG_WIDTH // self.scale

    def with_ablation(self, name: str) -> TrainConfig:
        try:
            er, df, dm = ABLATIONS[name]
        except KeyError:
            raise ConfigError(f"unknown ablation {name!r}; expected one of {sorted(ABLATIONS)}") from None
        return dataclasses.replace(self, use_residual_encoder=er, use_feature_disc=df, use_image_disc=dm)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["residual_layers"] = list(self.residual_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


def desk_config(**overrides) -> TrainConfig:
    """Small configuration used by tests and smoke runs (width 8, 64x64)."""
    base = dict(scale=8, image_size=64, batch_size=4, max_steps=200, checkpoint_every=50)
    base.update(overrides)
    return TrainConfig(**base)
