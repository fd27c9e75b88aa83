from __future__ import annotations

from dataclasses import dataclass

from weaksal.errors import ConfigError

BACKBONE_STRIDES = (2, 2, 2, 1)


@dataclass(frozen=True)
class NetConfig:
    scales: tuple[float, ...] = (0.5, 0.75, 1.0)
    backbone_channels: tuple[int, ...] = (16, 32, 64, 64)
    n_classes: int = 2
    feature_stride: int = 8

    def validate(self) -> None:
        if not self.scales or any(not 0.0 < s <= 1.0 for s in self.scales):
            raise ConfigError("scales must be non-empty and each in (0, 1]")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if len(self.backbone_channels) != len(BACKBONE_STRIDES) or min(self.backbone_channels) < 1:
            raise ConfigError(f"backbone needs {len(BACKBONE_STRIDES)} positive channel counts")
        stride = 1
        for s in BACKBONE_STRIDES:
            stride *= s
        if self.feature_stride != stride:
            raise ConfigError(f"feature_stride must equal the backbone stride {stride}")

    @property
    def feature_channels(self) -> int:
        """K: channels of the concatenated multi-scale feature map."""
        return len(self.scales) * self.backbone_channels[-1]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    minibatch: int = 2
    loss_accumulation: int = 5
    iterations_per_round: int = 2000
    validate_every: int = 100
    rng_seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be > 0 and weight_decay >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if self.minibatch < 1 or self.loss_accumulation < 1 or self.validate_every < 1:
            raise ConfigError("minibatch, loss_accumulation and validate_every must be >= 1")
        if self.iterations_per_round < 0:
            raise ConfigError("iterations_per_round must be >= 0")
