"""Training and experiment configuration, with desk-scale and full-scale presets."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .backbones import BACKBONES, DecoderSpec, EncoderSpec
from .data import DriftConfig
from .errors import ConfigurationError
from .model import VARIANTS, MemDAModel, build_model


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 0.001
    max_epochs: int = 200
    patience: int = 15
    seed: int = 0
    variant: str = "memda"
    alpha: int = 12
    K: int = 2
    C_e: int = 256
    L: int = 20
    D: int = 32
    N_s: int = 5
    backbone: str = "temporal-conv"
    encoder_depth: int = 3
    encoder_width: int = 32
    decoder_hidden: int = 128
    decoder_depth: int = 2
    early_stopping: bool = True
    grad_clip: float = 5.0
    replay: bool = True
    share_xy_ntn: bool = False
    revin: bool = False
    deterministic: bool = True

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.backbone not in BACKBONES:
            raise ConfigurationError(f"unknown backbone {self.backbone!r}; choose from {', '.join(sorted(BACKBONES))}")
        for name in ("batch_size", "max_epochs", "alpha", "C_e", "L", "D", "N_s"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.K < 0 or (self.variant != "backbone" and self.K < 1):
            raise ConfigurationError(f"variant {self.variant!r} needs K >= 1, got K={self.K}")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")

    @property
    def effective_K(self) -> int:
        return 0 if self.variant == "backbone" else self.K

    def encoder_spec(self) -> EncoderSpec:
        options = {"width": self.encoder_width} if self.backbone == "temporal-conv" else {}
        return EncoderSpec(kind=self.backbone, C_e=self.C_e, depth=self.encoder_depth, options=options)

    def decoder_spec(self) -> DecoderSpec:
        return DecoderSpec(hidden_width=self.decoder_hidden, depth=self.decoder_depth)

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - names
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        cfg = cls(**payload)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


PRESETS: dict[str, dict] = {
    "desk": {
        # the validation range is four days, so its error is noisy: allow more patience
        "train": {"C_e": 64, "L": 8, "D": 16, "N_s": 5, "alpha": 12, "K": 2, "decoder_hidden": 128, "patience": 30},
        "synthetic": {
            "drift_kind": "sudden",
            "drift_time": 20 * 24,
            "magnitude": 1.0,
            "base_period": 24,
            "noise_std": 0.1,
            "day_variability": 0.3,
            "n_nodes": 8,
            "n_days": 30,
            "seed": 0,
        },
        "data": {"samples_per_day": 24, "channels": 1, "train_end": 20 * 24, "val_fraction": 0.2},
    },
    "paper": {
        "train": {"C_e": 256, "L": 20, "D": 32, "N_s": 5, "alpha": 12, "K": 2, "decoder_hidden": 256},
        "synthetic": {
            "drift_kind": "sudden",
            "drift_time": 42 * 288,
            "magnitude": 1.0,
            "base_period": 288,
            "noise_std": 0.1,
            "day_variability": 0.3,
            "n_nodes": 32,
            "n_days": 56,
            "seed": 0,
        },
        "data": {"samples_per_day": 288, "channels": 1, "train_end": 42 * 288, "val_fraction": 0.2},
    },
}


def build_variant(config: TrainConfig, in_channels: int = 1) -> MemDAModel:
    """Instantiate the model for ``config.variant`` with seeded initial weights."""
    import torch

    config.validate()
    torch.manual_seed(config.seed)
    return build_model(
        config.variant,
        config.alpha,
        in_channels,
        K=config.K,
        encoder=config.encoder_spec(),
        decoder=config.decoder_spec(),
        L=config.L,
        D=config.D,
        N_s=config.N_s,
        share_xy_ntn=config.share_xy_ntn,
        revin=config.revin,
    )


@dataclass
class DataSpec:
    path: str | None = None
    samples_per_day: int = 24
    channels: int = 1
    train_end: int = 480
    val_fraction: float = 0.2


@dataclass
class ExperimentConfig:
    preset: str = "desk"
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSpec = field(default_factory=DataSpec)
    synthetic: DriftConfig | None = None
    out_dir: str | None = None
    name: str | None = None

    @classmethod
    def from_dict(cls, payload: dict, preset: str | None = None) -> "ExperimentConfig":
        payload = dict(payload)
        preset = preset or payload.pop("preset", None) or "desk"
        payload.pop("preset", None)
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        base = PRESETS[preset]
        unknown = set(payload) - {"train", "data", "synthetic", "out_dir", "name"}
        if unknown:
            raise ConfigurationError(f"unknown experiment config keys: {sorted(unknown)}")

        train = TrainConfig.from_dict({**base["train"], **payload.get("train", {})})
        data_fields = {**base["data"], **payload.get("data", {})}
        try:
            data = DataSpec(**data_fields)
        except TypeError as exc:
            raise ConfigurationError(f"bad data section: {exc}") from None
        synthetic = None
        if data.path is None:
            synthetic = DriftConfig.from_dict({**base["synthetic"], **(payload.get("synthetic") or {})})
            data.samples_per_day = synthetic.base_period
            if "train_end" not in payload.get("data", {}):
                data.train_end = synthetic.drift_time
        return cls(
            preset=preset,
            train=train,
            data=data,
            synthetic=synthetic,
            out_dir=payload.get("out_dir"),
            name=payload.get("name"),
        )

    @classmethod
    def load(cls, path: str | Path | None, preset: str | None = None) -> "ExperimentConfig":
        if path is None:
            return cls.from_dict({}, preset=preset)
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigurationError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(payload, preset=preset)

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "name": self.name,
            "out_dir": self.out_dir,
            "train": self.train.to_dict(),
            "data": dataclasses.asdict(self.data),
            "synthetic": self.synthetic.to_dict() if self.synthetic else None,
        }

    def run_dir(self) -> Path:
        if self.out_dir:
            return Path(self.out_dir)
        root = Path(os.environ.get("MEMDA_OUT_DIR", "runs"))
        name = self.name or f"{self.train.variant}-seed{self.train.seed}"
        return root / name
