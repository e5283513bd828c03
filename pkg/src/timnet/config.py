"""Flat ``key = value`` run configuration covering features, model, training and protocol."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .dsp import FeatureConfig
from .model import ModelConfig, normalize_variant
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # features
    sample_rate: int = 22050
    frame_ms: float = 50.0
    hop_ms: float = 12.5
    fft_size: int = 2048
    n_mels: int = 128
    n_mfcc: int = 39
    log_floor: float = 1e-10
    # model
    n_tabs: int = 8
    kernel_size: int = 2
    channels: int = 39
    dropout: float = 0.1
    variant: str = "full"
    input_T: int = 0  # 0: 95th percentile of the training manifest
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5
    # training
    lr: float = 0.001
    batch_size: int = 64
    epochs: int = 500
    smoothing: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True
    # evaluation
    protocol: str = "best"
    folds: int = 10
    by_speaker: bool = False
    out_dir: str = "runs"
    plots: bool = True

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(self.sample_rate, self.frame_ms, self.hop_ms, self.fft_size,
                             self.n_mels, self.n_mfcc, self.log_floor)

    def model_config(self, n_classes: int, input_T: int) -> ModelConfig:
        return ModelConfig(n_classes, input_T, self.n_tabs, self.kernel_size, self.channels, self.n_mfcc,
                           self.dropout, self.variant, self.bn_momentum, self.bn_eps)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.lr, self.batch_size, self.epochs, self.smoothing, self.beta1, self.beta2,
                           self.adam_eps, self.seed, self.shuffle)

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def validate(self) -> "RunConfig":
        try:
            normalize_variant(self.variant)
            if self.protocol not in ("last", "best"):
                raise ValueError(f"protocol must be 'last' or 'best', got {self.protocol!r}")
            self.feature_config()
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = _TYPES[key]
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config(text: str, origin: str = "<config>") -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{origin}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(key, raw)
        except ValueError as exc:
            raise ConfigError(f"{origin}:{lineno}: bad value for {key}: {exc}") from exc
    return RunConfig(**values).validate()


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(), str(path))


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
