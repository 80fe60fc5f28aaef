"""Declarative run configuration (TOML) with strict key validation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib
import tomli_w

from .errors import ConfigError


@dataclass
class DataSection:
    n_scenes: int = 64
    rows: int = 64
    cols: int = 64
    val_scenes: int = 8


@dataclass
class StormSection:
    n_cells: tuple = (1, 12)
    cell_amp: tuple = (20.0, 55.0)
    cell_sigma: tuple = (2.0, 12.0)
    background_level: tuple = (0.0, 12.0)
    background_smoothing: float = 4.0
    bt_slope: float = -1.5
    bt_base: float = 280.0
    channel_blur: tuple = (1.0, 2.0, 4.0)
    channel_slope_scale: tuple = (1.0, 0.8, 0.6)
    noise_sd: tuple = (0.5, 0.5, 0.5, 0.0)
    lightning_threshold: float = 40.0
    lightning_blur: float = 2.0
    flash_scale: float = 5.0


@dataclass
class NormSection:
    dbz_min: float = 0.0
    dbz_max: float = 60.0
    model_lo: float = -1.0
    model_hi: float = 1.0


@dataclass
class PatchSection:
    size: int = 32
    stride: int = 32
    # 16 of 1024 pixels keeps the full-size ratio of 1000 of 65536
    gamma: int = 16
    value_threshold: float = 6.0


@dataclass
class TransformSection:
    embed_patch: int = 16
    embed_dim: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    w0: float = 5.0
    w1: float = 4.0
    lr: float = 1e-4
    steps: int = 2000
    batch_size: int = 8


@dataclass
class DenoiserSection:
    base_channels: int = 16
    depth: int = 3
    time_dim: int = 128
    attention: bool = True
    mode: str = "both"
    prediction: str = "v"
    lr: float = 1e-3
    ema: float = 0.0  # 0 keeps the last iterate
    steps: int = 2000
    batch_size: int = 16


@dataclass
class ScheduleSection:
    T: int = 200
    beta_min: float = 1e-4
    beta_max: float = 0.02
    sample_steps: int = 0  # 0 samples with all T steps


@dataclass
class SampleSection:
    stride: int = 32
    seeds: tuple = (0, 1, 2)
    scenes: str = "validation"  # "validation" or "all"


@dataclass
class EvalSection:
    thresholds: tuple = (15.0, 35.0, 50.0)
    pools: tuple = (1, 4, 8)
    data_range: float = 60.0
    window: int = 11
    exceedance_dbz: float = 40.0


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    storm: StormSection = field(default_factory=StormSection)
    norm: NormSection = field(default_factory=NormSection)
    patch: PatchSection = field(default_factory=PatchSection)
    transform: TransformSection = field(default_factory=TransformSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    sample: SampleSection = field(default_factory=SampleSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # derived seeds, one per stage, all keyed off the global seed
    @property
    def data_seed(self) -> int:
        return self.seed

    @property
    def tm_seed(self) -> int:
        return self.seed + 1

    @property
    def diffusion_seed(self) -> int:
        return self.seed + 2

    @property
    def sample_seeds(self) -> tuple:
        return tuple(self.seed + 3 + s for s in self.sample.seeds)

    def to_dict(self) -> dict:
        def conv(v):
            if isinstance(v, tuple):
                return [conv(x) for x in v]
            if isinstance(v, dict):
                return {k: conv(x) for k, x in v.items()}
            return v

        return conv(dataclasses.asdict(self))

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"[{where}] must be a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    kwargs = {}
    for name, v in values.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), v, name)
        elif isinstance(default, tuple):
            if not isinstance(v, list):
                raise ConfigError(f"{where}.{name} must be an array")
            kwargs[name] = tuple(v)
        elif isinstance(default, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{where}.{name} must be a boolean")
            kwargs[name] = v
        elif isinstance(default, float):
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise ConfigError(f"{where}.{name} must be a number")
            kwargs[name] = float(v)
        elif isinstance(default, int):
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigError(f"{where}.{name} must be an integer")
            kwargs[name] = v
        else:
            if not isinstance(v, type(default)):
                raise ConfigError(f"{where}.{name} must be a {type(default).__name__}")
            kwargs[name] = v
    return cls(**kwargs)


def from_dict(d: dict) -> RunConfig:
    cfg = _build(RunConfig, d, "root")
    validate(cfg)
    return cfg


def loads(text: str) -> RunConfig:
    try:
        return from_dict(tomllib.loads(text))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def validate(cfg: RunConfig) -> None:
    if cfg.denoiser.mode not in ("satellite", "estimate", "both"):
        raise ConfigError(f"denoiser.mode must be satellite|estimate|both, got {cfg.denoiser.mode!r}")
    if cfg.denoiser.prediction not in ("eps", "v"):
        raise ConfigError(f"denoiser.prediction must be eps|v, got {cfg.denoiser.prediction!r}")
    if not 0.0 <= cfg.denoiser.ema < 1.0:
        raise ConfigError(f"denoiser.ema must lie in [0, 1), got {cfg.denoiser.ema}")
    if not 0 <= cfg.data.val_scenes < cfg.data.n_scenes:
        raise ConfigError("data.val_scenes must be in [0, n_scenes)")
    if cfg.patch.size > min(cfg.data.rows, cfg.data.cols):
        raise ConfigError("patch.size exceeds the scene size")
    if cfg.data.rows % cfg.transform.embed_patch or cfg.data.cols % cfg.transform.embed_patch:
        raise ConfigError("transform.embed_patch must divide the scene size")
    if cfg.sample.scenes not in ("validation", "all"):
        raise ConfigError("sample.scenes must be 'validation' or 'all'")
    if cfg.schedule.sample_steps < 0 or cfg.schedule.sample_steps > cfg.schedule.T:
        raise ConfigError("schedule.sample_steps must be in [0, T]")
