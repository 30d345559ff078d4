"""Run configuration: flat ``key = value`` INI sections mapped onto the module configs.

Every field has an explicit default and :func:`dump_config` writes all of them, so the echoed
file reproduces a run exactly when fed back through :func:`load_config`.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .backtest import BASELINES, MetricsConfig
from .env import EnvConfig
from .indicators import IndicatorConfig
from .market_data import DEFAULT_OUTLIER_FACTORS
from .policy import VARIANTS, AttentionConfig
from .ppo import PPOConfig


class ConfigValidationError(ValueError):
    """A config value is missing, malformed or out of range. The message names the field."""


@dataclass(frozen=True)
class DataConfig:
    csv: str = ""
    synthetic: bool = True
    synth_assets: int = 3
    synth_days: int = 900
    synth_drift: tuple[float, ...] = (0.001, 0.0, 0.0)
    synth_volatility: tuple[float, ...] = (0.002,)
    synth_seed: int = 7
    train_start: str = ""
    train_end: str = ""
    test_start: str = ""
    test_end: str = ""
    train_days: int = 648
    outlier_fraction: float = 0.0
    outlier_factors: tuple[float, ...] = DEFAULT_OUTLIER_FACTORS
    outlier_seed: int = 0

    def __post_init__(self):
        if not self.synthetic and not self.csv:
            raise ValueError("csv path is required when synthetic = false")
        if self.synthetic and (self.synth_assets < 1 or self.synth_days < 2):
            raise ValueError("synth_assets must be >= 1 and synth_days >= 2")
        for name in ("synth_drift", "synth_volatility"):
            if len(getattr(self, name)) not in (1, self.synth_assets):
                raise ValueError(f"{name} needs 1 or synth_assets entries")
        if any(v < 0 for v in self.synth_volatility):
            raise ValueError("synth_volatility must be non-negative")
        ranges = (self.train_start, self.train_end, self.test_start, self.test_end)
        if any(ranges) and not all(ranges):
            raise ValueError("train_start, train_end, test_start and test_end must be given together")
        if not any(ranges) and self.train_days < 1:
            raise ValueError("train_days must be >= 1")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ValueError(f"outlier_fraction must lie in [0, 1], got {self.outlier_fraction}")
        if not self.outlier_factors or any(f <= 0 for f in self.outlier_factors):
            raise ValueError("outlier_factors must be a non-empty list of positive numbers")

    @property
    def has_ranges(self) -> bool:
        return bool(self.train_start)


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


@dataclass(frozen=True)
class RunSection:
    seed: int = -1
    out: str = "runs"
    eval_every: int = 0  # 0 evaluates only before and after training

    def __post_init__(self):
        if self.seed < 0 or self.seed >= 2**64:
            raise ValueError("seed is required and must be an unsigned 64-bit integer")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")


@dataclass(frozen=True)
class AblationConfig:
    variants: tuple[str, ...] = VARIANTS
    seeds: tuple[int, ...] = (0,)
    fractions: tuple[float, ...] = (0.0,)

    def __post_init__(self):
        for v in self.variants:
            if v not in VARIANTS:
                raise ValueError(f"variants entry {v!r} is not one of {VARIANTS}")
        if not self.variants or not self.seeds or not self.fractions:
            raise ValueError("variants, seeds and fractions must be non-empty")
        if any(not 0.0 <= f <= 1.0 for f in self.fractions):
            raise ValueError("fractions entries must lie in [0, 1]")


@dataclass(frozen=True)
class BacktestConfig:
    baselines: tuple[str, ...] = BASELINES

    def __post_init__(self):
        for b in self.baselines:
            if b not in BASELINES:
                raise ValueError(f"baselines entry {b!r} is not one of {BASELINES}")


# smoke-test defaults: the trading settings learn a 0.1%/day trend inside 2,000 steps
SMOKE_ATTENTION = AttentionConfig(d_model=32, heads=4, pw_hidden=16, memory=32)
SMOKE_PPO = PPOConfig(lr=3e-3, gamma=0.5, concentration=1.0, total_steps=2000)


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    indicators: IndicatorConfig = field(default_factory=IndicatorConfig)
    attention: AttentionConfig = SMOKE_ATTENTION
    model: ModelConfig = field(default_factory=ModelConfig)
    ppo: PPOConfig = SMOKE_PPO
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    run: RunSection = field(default_factory=lambda: RunSection(seed=0))
    ablation: AblationConfig = field(default_factory=AblationConfig)
    backtest: BacktestConfig = field(default_factory=BacktestConfig)

    @property
    def seed(self) -> int:
        return self.run.seed

    @property
    def out(self) -> Path:
        return Path(self.run.out)

    def ppo_for(self, seed: int) -> PPOConfig:
        return dataclasses.replace(self.ppo, seed=int(seed))

    def with_overrides(self, seed: int | None = None, out: str | None = None) -> RunConfig:
        run = self.run
        if seed is not None:
            run = _build("run", RunSection, {**dataclasses.asdict(run), "seed": seed})
        if out is not None:
            run = dataclasses.replace(run, out=str(out))
        return dataclasses.replace(self, run=run, ppo=self.ppo_for(run.seed))


SECTIONS: dict[str, type] = {
    "data": DataConfig, "env": EnvConfig, "indicators": IndicatorConfig, "attention": AttentionConfig,
    "model": ModelConfig, "ppo": PPOConfig, "metrics": MetricsConfig, "run": RunSection,
    "ablation": AblationConfig, "backtest": BacktestConfig,
}


def _parse(section: str, key: str, raw: str, default: Any) -> Any:
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [s.strip() for s in text.split(",") if s.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(s) for s in items)
        return text
    except ValueError:
        raise ConfigValidationError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from None


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _build(section: str, cls: type, values: dict) -> Any:
    try:
        return cls(**values)
    except (ValueError, TypeError) as exc:
        raise ConfigValidationError(f"[{section}] {exc}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigValidationError(f"{source}: {exc}") from None
    unknown = [s for s in parser.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigValidationError(f"unknown section [{unknown[0]}]; expected one of {sorted(SECTIONS)}")
    if not parser.has_option("run", "seed"):
        raise ConfigValidationError("[run] seed: missing; every run needs an explicit seed")
    base = RunConfig()
    built = {}
    for name, cls in SECTIONS.items():
        defaults = dataclasses.asdict(getattr(base, name))
        values = dict(defaults)
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in defaults:
                    raise ConfigValidationError(f"[{name}] {key}: unknown field")
                values[key] = _parse(name, key, raw, defaults[key])
        built[name] = _build(name, cls, values)
    # the PPO seed always follows the run seed
    return RunConfig(**built).with_overrides(seed=built["run"].seed)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def dump_config(config: RunConfig) -> str:
    """Every field of every section, in declaration order."""
    out = io.StringIO()
    for name in SECTIONS:
        out.write(f"[{name}]\n")
        for key, value in dataclasses.asdict(getattr(config, name)).items():
            if name == "ppo" and key == "seed":
                continue
            out.write(f"{key} = {_format(value)}\n")
        out.write("\n")
    return out.getvalue()
