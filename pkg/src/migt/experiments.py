"""Dataset preparation, single training runs, and ablation sweeps."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .backtest import (BaselineStrategy, MetricsConfig, PolicyStrategy, all_metrics, cumulative_return,
                       run_backtest)
from .env import EnvConfig, PortfolioEnv
from .indicators import FeatureNormalizer, FeaturePanel, IndicatorConfig, compute_features
from .market_data import DEFAULT_OUTLIER_FACTORS, FIELDS, PanelData, align_and_split, inject_outliers
from .policy import AttentionConfig, MIGTPolicy, PolicyConfig, VARIANTS
from .ppo import PPOConfig, TrainingDiverged, TrainingLog, train

logger = logging.getLogger(__name__)


@dataclass
class Dataset:
    train: FeaturePanel
    test: FeaturePanel
    normalizer: FeatureNormalizer

    @property
    def tickers(self) -> tuple[str, ...]:
        return self.train.tickers


def _concat(a: PanelData, b: PanelData) -> PanelData:
    return PanelData(a.dates + b.dates, a.tickers,
                     **{f: np.vstack([a.field(f), b.field(f)]) for f in FIELDS})


def prepare_dataset(panel: PanelData, train_range: tuple[str, str], test_range: tuple[str, str],
                    indicators: IndicatorConfig, window: int, outlier_fraction: float = 0.0,
                    outlier_factors: Sequence[float] = DEFAULT_OUTLIER_FACTORS, outlier_seed: int = 0) -> Dataset:
    """Normalised train/test feature panels.

    Training indicators come from the (optionally outlier-injected) training range alone. Test
    indicators are computed over clean train+test history so the test episode starts with full
    context on its first day.
    """
    train_panel, test_panel = align_and_split(panel, train_range, test_range)
    noisy = inject_outliers(train_panel, outlier_fraction, outlier_factors, outlier_seed)
    train_feats = compute_features(noisy, indicators)
    full_feats = compute_features(_concat(train_panel, test_panel), indicators)
    test_feats = full_feats.episode(test_panel.dates[0], test_panel.dates[-1], context=window)
    norm = FeatureNormalizer.fit(train_feats)
    return Dataset(norm.transform(train_feats), norm.transform(test_feats), norm)


def split_dates(panel: PanelData, train_days: int) -> tuple[tuple[str, str], tuple[str, str]]:
    d = panel.dates
    return (d[0], d[train_days - 1]), (d[train_days], d[-1])


def make_policy(dataset: Dataset, attention: AttentionConfig, variant: str, seed: int) -> MIGTPolicy:
    cfg = PolicyConfig(dataset.train.n_assets, dataset.train.n_features + 2, attention, variant)
    return MIGTPolicy(cfg, seed=seed)


@dataclass
class RunResult:
    variant: str
    seed: int
    fraction: float
    policy: MIGTPolicy | None
    log: TrainingLog
    curve: list[tuple[int, float]] = field(default_factory=list)
    metrics: dict[str, float] = field(default_factory=dict)
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


def evaluate_return(policy: MIGTPolicy, dataset: Dataset, env_config: EnvConfig) -> float:
    return cumulative_return(run_backtest(PolicyStrategy(policy), dataset.test, env_config).curve)


def train_and_evaluate(dataset: Dataset, env_config: EnvConfig, attention: AttentionConfig, ppo: PPOConfig,
                       variant: str = "full", eval_every: int | None = None,
                       metrics: MetricsConfig = MetricsConfig(), fraction: float = 0.0) -> RunResult:
    """Train one arm; record test cumulative return every ``eval_every`` steps."""
    policy = make_policy(dataset, attention, variant, ppo.seed)
    env = PortfolioEnv(dataset.train, env_config)
    curve: list[tuple[int, float]] = []

    def on_checkpoint(steps: int, p: MIGTPolicy) -> None:
        curve.append((steps, evaluate_return(p, dataset, env_config)))

    try:
        policy, log = train(env, policy, ppo, on_checkpoint if eval_every else None, eval_every)
    except TrainingDiverged as exc:
        logger.warning("arm %s seed %d fraction %g diverged: %s", variant, ppo.seed, fraction, exc)
        return RunResult(variant, ppo.seed, fraction, exc.policy, exc.log, curve, error=str(exc))
    result = run_backtest(PolicyStrategy(policy), dataset.test, env_config)
    return RunResult(variant, ppo.seed, fraction, policy, log, curve, all_metrics(result.curve, metrics))


@dataclass
class AblationResult:
    runs: list[RunResult]
    datasets: dict[float, Dataset]

    def table(self) -> list[dict]:
        rows = []
        for r in self.runs:
            row = {"variant": r.variant, "seed": r.seed, "outlier_fraction": r.fraction,
                   "status": "ok" if r.ok else "diverged"}
            for k in ("cum_return", "sharpe", "omega", "sortino"):
                row[k] = r.metrics.get(k, math.nan)
            rows.append(row)
        return rows

    def mean_return(self, variant: str, fraction: float) -> float:
        vals = [r.metrics["cum_return"] for r in self.runs if r.ok and r.variant == variant and r.fraction == fraction]
        return float(np.mean(vals)) if vals else math.nan


ABLATION_COLUMNS = ("variant", "seed", "outlier_fraction", "status", "cum_return", "sharpe", "omega", "sortino")


def ablation_report(panel: PanelData, train_range, test_range, indicators: IndicatorConfig, env_config: EnvConfig,
                    attention: AttentionConfig, ppo: PPOConfig, variants: Sequence[str] = VARIANTS,
                    seeds: Sequence[int] = (0,), fractions: Sequence[float] = (0.0,),
                    outlier_factors: Sequence[float] = DEFAULT_OUTLIER_FACTORS, eval_every: int | None = None,
                    metrics: MetricsConfig = MetricsConfig(), outlier_seed: int = 0) -> AblationResult:
    """Train every (fraction, variant, seed) arm in declared order; diverged arms are recorded, not fatal."""
    if not seeds:
        raise ValueError("need at least one seed")
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
    datasets = {f: prepare_dataset(panel, train_range, test_range, indicators, env_config.window, f,
                                   outlier_factors, outlier_seed) for f in fractions}
    runs = []
    for f in fractions:
        for v in variants:
            for s in seeds:
                cfg = PPOConfig(**{**ppo.__dict__, "seed": int(s)})
                runs.append(train_and_evaluate(datasets[f], env_config, attention, cfg, v, eval_every, metrics, f))
    return AblationResult(runs, datasets)


def write_ablation_table(result: AblationResult, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for row in result.table():
            w.writerow([row["variant"], row["seed"], repr(float(row["outlier_fraction"])), row["status"]]
                       + [repr(float(row[k])) for k in ABLATION_COLUMNS[4:]])


def write_convergence(result: AblationResult, path: str | Path) -> None:
    """Long-format step-vs-return curves, sorted by arm then step."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "outlier_fraction", "step", "cum_return"])
        for r in result.runs:
            for step, ret in r.curve:
                w.writerow([r.variant, r.seed, repr(float(r.fraction)), step, repr(float(ret))])


def baseline_rows(dataset: Dataset, env_config: EnvConfig, metrics: MetricsConfig, kinds: Sequence[str]) -> list[dict]:
    rows = []
    for k in kinds:
        res = run_backtest(BaselineStrategy(k), dataset.test, env_config)
        rows.append({"strategy": k, **all_metrics(res.curve, metrics)})
    return rows
