"""Flat ``key=value`` run configuration shared by every CLI stage."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError, DataError
from .formats import dump_kv, parse_kv
from .learn.train import MaskConfig, TrainConfig
from .signal import LEFT_BAND, RIGHT_BAND, SAMPLE_RATE, SWEEP_SAMPLES, ChirpConfig


@dataclass(frozen=True)
class RunConfig:
    # transmit
    left_f_start: float = LEFT_BAND[0]
    left_f_end: float = LEFT_BAND[1]
    right_f_start: float = RIGHT_BAND[0]
    right_f_end: float = RIGHT_BAND[1]
    n_samples: int = SWEEP_SAMPLES
    sample_rate: float = SAMPLE_RATE
    amplitude: float = 1.0
    # scene source: a scene file, or a catalog class rendered for ``duration`` seconds
    scene: str = ""
    scene_class: str = "chew"
    duration: float = 10.0
    snr_db: float = 45.0
    # synthetic dataset
    n_groups: int = 5
    seconds_per_class: float = 6.0
    # masking
    mask_min: float = 0.15
    mask_max: float = 0.20
    patches_min: int = 1
    patches_max: int = 4
    # training
    batch_size: int = 64
    pretrain_epochs: int = 100
    finetune_epochs: int = 50
    stage2_epochs: int = 10
    lr_init: float = 1e-3
    gamma_focal: float = 0.5
    dropout_p: float = 0.2
    loss: str = "focal"
    masked_only: bool = False
    # outputs
    out_dir: str = "run"
    seed: int = 0

    def chirps(self) -> tuple[ChirpConfig, ChirpConfig]:
        left = ChirpConfig(self.left_f_start, self.left_f_end, self.n_samples, self.sample_rate, self.amplitude)
        right = ChirpConfig(self.right_f_start, self.right_f_end, self.n_samples, self.sample_rate, self.amplitude)
        left.validate()
        right.validate()
        return left, right

    def mask(self) -> MaskConfig:
        return MaskConfig((self.mask_min, self.mask_max), (self.patches_min, self.patches_max), self.seed)

    def train(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.pretrain_epochs, self.finetune_epochs, self.lr_init,
                           self.gamma_focal, self.dropout_p, self.seed, self.loss, self.masked_only,
                           self.stage2_epochs)

    def dump(self) -> str:
        return dump_kv(asdict(self))

    @property
    def hash(self) -> str:
        """Short digest of every setting except the output location."""
        d = asdict(self)
        d.pop("out_dir")
        return hashlib.sha256(dump_kv(d).encode()).hexdigest()[:16]

    def validate(self) -> "RunConfig":
        self.chirps()
        self.mask()
        self.train()
        if self.duration <= 0 or self.seconds_per_class <= 0 or self.n_groups < 1:
            raise ConfigError("durations and group count must be positive")
        return self


def _coerce(name: str, kind, raw: str):
    try:
        if kind is bool or kind == "bool":
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {name}: cannot parse {raw!r}") from exc


def parse_config(text: str, base_dir: str | Path = ".", **overrides) -> RunConfig:
    """Parse ``key=value`` text; unknown keys are rejected and ``scene`` is resolved against ``base_dir``."""
    try:
        raw = parse_kv(text)
    except DataError as exc:
        raise ConfigError(str(exc)) from exc
    known = {f.name: f.type for f in fields(RunConfig)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {k: _coerce(k, known[k], v) for k, v in raw.items()}
    values.update({k: v for k, v in overrides.items() if v is not None})
    cfg = replace(RunConfig(), **values)
    if cfg.scene:
        path = Path(cfg.scene)
        if not path.is_absolute():
            path = Path(base_dir) / path
        if not path.exists():
            raise ConfigError(f"scene file {path} does not exist")
        cfg = replace(cfg, scene=str(path.resolve()))
    return cfg.validate()


def load_config(path: str | Path | None, **overrides) -> RunConfig:
    if path is None:
        return replace(RunConfig(), **{k: v for k, v in overrides.items() if v is not None}).validate()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(), path.parent, **overrides)
