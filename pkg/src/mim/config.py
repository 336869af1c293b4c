"""JSON pipeline configuration with strict key checking."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .ciubm import VARIANTS
from .synthdata import WorldConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    align_dim: int = 16
    mm_dim: int = 16
    hidden: tuple[int, ...] = (64,)
    fusion: str = "tfn"
    dma_epochs: int = 1
    dma_lr: float = 0.005
    dma_batch_size: int = 64
    dma_tau: float = 1.0

    def __post_init__(self):
        if self.fusion not in ("tfn", "concat"):
            raise ConfigError(f"encoder.fusion must be 'tfn' or 'concat', got {self.fusion!r}")
        _positive(self, "align_dim", "mm_dim", "dma_batch_size", "dma_lr", "dma_tau")
        _non_negative(self, "dma_epochs")


@dataclass(frozen=True)
class CsftConfig:
    enabled: bool = True
    alpha: float = 0.5
    beta: float = 0.5
    k: int = 3
    N: int = 8
    P: int = 2
    tau: float = 1.0
    lr: float = 0.005
    epochs: int = 2
    optimizer: str = "sgd"
    hard_negatives: bool = True
    loss_variant: str = "multi_level"   # or "mm_only" (fused level only)
    signal: str = "purchase"            # purchase | click | category

    def __post_init__(self):
        if self.loss_variant not in ("multi_level", "mm_only"):
            raise ConfigError(f"csft.loss_variant must be 'multi_level' or 'mm_only', got {self.loss_variant!r}")
        if self.signal not in ("purchase", "click", "category"):
            raise ConfigError(f"csft.signal must be purchase, click or category, got {self.signal!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"csft.optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        _positive(self, "N", "P", "tau", "lr")
        _non_negative(self, "alpha", "beta", "k", "epochs")


@dataclass(frozen=True)
class CiubmConfig:
    variant: str = "base+mim"
    id_dim: int = 16
    hidden: tuple[int, ...] = (64, 32)
    lr: float = 0.005
    epochs: int = 4
    batch_size: int = 256
    optimizer: str = "adam"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"ciubm.variant must be one of {sorted(VARIANTS)}, got {self.variant!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"ciubm.optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        _positive(self, "id_dim", "lr", "batch_size")
        _non_negative(self, "epochs")


@dataclass(frozen=True)
class RepcenterConfig:
    bind: str = "127.0.0.1:0"
    window_count: int = 64
    window_ms: float = 100.0
    serve_check_samples: int = 200   # samples scored through a loopback server and compared bit-wise

    def __post_init__(self):
        _positive(self, "window_count", "window_ms")
        _non_negative(self, "serve_check_samples")


@dataclass(frozen=True)
class EvalConfig:
    test_fraction: float = 0.2
    cold_start_buckets: int = 10
    hold_out_newest: bool = True   # newest bucket never appears as a training target
    ablations: bool = True
    fom_cost: float = 1.0e9        # synthetic per-entity encoder forward cost for the FLOP table

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("eval.test_fraction must lie in (0, 1)")
        _positive(self, "cold_start_buckets")
        _non_negative(self, "fom_cost")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    csft: CsftConfig = field(default_factory=CsftConfig)
    ciubm: CiubmConfig = field(default_factory=CiubmConfig)
    repcenter: RepcenterConfig = field(default_factory=RepcenterConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def config_hash(self) -> str:
        """Hash of everything except the seed; run directories combine it with the seed."""
        d = self.to_dict()
        seed = d.pop("seed")
        if d["world"]["seed"] == seed:  # propagated, not pinned
            d["world"].pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def with_seed(self, seed: int) -> "PipelineConfig":
        return from_dict({**self.to_dict(), "seed": seed, "world": {**self.to_dict()["world"], "seed": seed}})


def _positive(obj, *names):
    for n in names:
        if getattr(obj, n) <= 0:
            raise ConfigError(f"{type(obj).__name__}.{n} must be positive")


def _non_negative(obj, *names):
    for n in names:
        if getattr(obj, n) < 0:
            raise ConfigError(f"{type(obj).__name__}.{n} must be non-negative")


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    proto = cls()
    kwargs = {}
    for name, value in data.items():
        if cls is PipelineConfig and name in _SECTIONS:
            kwargs[name] = _build(_SECTIONS[name], value, f"{where}.{name}")
            continue
        default = getattr(proto, name)
        if isinstance(default, tuple):
            if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                raise ConfigError(f"{where}.{name}: expected a list of integers")
            value = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}.{name}: expected true/false")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where}.{name}: expected an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}.{name}: expected a number")
            value = float(value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{where}.{name}: expected a string")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


_SECTIONS = {"world": WorldConfig, "encoder": EncoderConfig, "csft": CsftConfig, "ciubm": CiubmConfig,
             "repcenter": RepcenterConfig, "eval": EvalConfig}


def from_dict(data: dict) -> PipelineConfig:
    cfg = _build(PipelineConfig, data, "config")
    # the world is generated from the pipeline seed unless a section pins its own
    if "seed" in data and "seed" not in (data.get("world") or {}):
        cfg = PipelineConfig(cfg.seed, WorldConfig(**{**asdict(cfg.world), "seed": cfg.seed}), cfg.encoder,
                             cfg.csft, cfg.ciubm, cfg.repcenter, cfg.eval)
    return cfg


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return from_dict(data)

