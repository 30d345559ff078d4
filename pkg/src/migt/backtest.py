"""Backtests, baseline strategies and the four performance ratios.

Ratios are computed on daily simple returns. Sharpe and Sortino are annualised by sqrt(days per
year); annual thresholds become daily via (1 + annual) ** (1 / days) - 1. Degenerate denominators
return NaN (Sharpe) or +inf (Sortino without downside, Omega without losses) instead of raising.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .env import AccountSnapshot, ContractError, EnvConfig, PortfolioEnv
from .indicators import FeaturePanel
from .policy import MIGTPolicy
from .ppo import greedy_action

BASELINES = ("best", "equal_weight", "buy_and_hold", "all_cash")
METRIC_COLUMNS = ("strategy", "dataset", "cum_return", "sharpe", "omega", "sortino")


@dataclass(frozen=True)
class MetricsConfig:
    risk_free: float = 0.03
    min_acceptable: float = 0.03
    omega_threshold: float = 0.03
    days_per_year: int = 252

    def __post_init__(self):
        if min(self.risk_free, self.min_acceptable, self.omega_threshold) < 0:
            raise ValueError("metric rates must be non-negative")
        if self.days_per_year < 1:
            raise ValueError("days_per_year must be >= 1")

    def daily(self, annual: float) -> float:
        return (1.0 + annual) ** (1.0 / self.days_per_year) - 1.0


@dataclass(frozen=True)
class EquityCurve:
    dates: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        if len(self.dates) != len(self.values):
            raise ValueError("dates and values differ in length")
        if np.any(np.asarray(self.values) <= 0):
            raise ValueError("portfolio values must stay positive")

    @property
    def returns(self) -> np.ndarray:
        v = np.asarray(self.values, dtype=np.float64)
        return v[1:] / v[:-1] - 1.0

    @property
    def ratios(self) -> np.ndarray:
        return np.asarray(self.values) / self.values[0]


def cumulative_return(curve: EquityCurve) -> float:
    v = curve.values
    if len(v) == 0:
        raise ValueError("empty equity curve")
    return float((v[-1] - v[0]) / v[0])


def sharpe_ratio(curve: EquityCurve, config: MetricsConfig = MetricsConfig()) -> float:
    r = curve.returns
    if len(r) < 2:
        raise ValueError("Sharpe needs at least two returns")
    sd = r.std(ddof=1)
    if sd == 0 or not np.isfinite(sd) or sd < 1e-15 * max(1.0, float(np.abs(r).max())):
        return math.nan
    excess = r - config.daily(config.risk_free)
    return float(excess.mean() / sd * math.sqrt(config.days_per_year))


def sortino_ratio(curve: EquityCurve, config: MetricsConfig = MetricsConfig()) -> float:
    r = curve.returns
    if len(r) < 2:
        raise ValueError("Sortino needs at least two returns")
    mar = config.daily(config.min_acceptable)
    below = r < mar
    excess = float((r - mar).mean())
    if not below.any():
        return math.inf
    downside = math.sqrt(float(np.sum((r[below] - mar) ** 2)) / len(r))
    return excess / downside * math.sqrt(config.days_per_year)


def omega_ratio(curve: EquityCurve, config: MetricsConfig = MetricsConfig(), threshold: float | None = None) -> float:
    """Discrete Omega: sum of gains above tau over sum of shortfalls below tau (tau daily)."""
    r = curve.returns
    if len(r) < 1:
        raise ValueError("Omega needs at least one return")
    tau = config.daily(config.omega_threshold) if threshold is None else threshold
    gain = float(np.sum(np.maximum(r - tau, 0.0)))
    loss = float(np.sum(np.maximum(tau - r, 0.0)))
    if loss == 0:
        return math.inf
    return gain / loss


def all_metrics(curve: EquityCurve, config: MetricsConfig = MetricsConfig()) -> dict[str, float]:
    return {
        "cum_return": cumulative_return(curve),
        "sharpe": sharpe_ratio(curve, config),
        "omega": omega_ratio(curve, config),
        "sortino": sortino_ratio(curve, config),
    }


# ---------------------------------------------------------------------------
# strategies
# ---------------------------------------------------------------------------


def best_baseline(prices: np.ndarray, t: int) -> np.ndarray:
    """All-in on the asset with the highest return into day ``t``; all cash on day 0."""
    n = prices.shape[1]
    target = np.zeros(n + 1)
    if t < 1:
        target[-1] = 1.0
        return target
    r = prices[t] / prices[t - 1] - 1.0
    target[int(np.argmax(r))] = 1.0  # argmax returns the first (lowest-index) maximum
    return target


def control_baseline(kind: str, n_assets: int, t: int = 0, current: np.ndarray | None = None) -> np.ndarray:
    target = np.zeros(n_assets + 1)
    if kind == "all_cash":
        target[-1] = 1.0
    elif kind == "equal_weight":
        target[:-1] = 1.0 / n_assets
    elif kind == "buy_and_hold":
        if t == 0 or current is None:
            target[:-1] = 1.0 / n_assets
        else:
            target = np.asarray(current, dtype=np.float64).copy()
    else:
        raise ValueError(f"unknown control baseline {kind!r}")
    return target


class Strategy(Protocol):
    name: str

    def reset(self) -> None: ...

    def act(self, env: PortfolioEnv, state: np.ndarray, step: int) -> np.ndarray: ...


class BaselineStrategy:
    def __init__(self, kind: str):
        if kind not in BASELINES:
            raise ValueError(f"unknown baseline {kind!r}; choose from {BASELINES}")
        self.name = kind

    def reset(self) -> None:
        pass

    def act(self, env: PortfolioEnv, state: np.ndarray, step: int) -> np.ndarray:
        if self.name == "best":
            # the latest known bar is the one before the trading day
            return best_baseline(env.prices, env.t - 1)
        return control_baseline(self.name, env.n_assets, step, env.current_fractions())


class PolicyStrategy:
    """Greedy (softmax) actions of a trained policy, memory carried through the episode."""

    def __init__(self, policy: MIGTPolicy, name: str | None = None):
        self.policy = policy
        self.name = name or f"MIGT_{policy.variant}"
        self.memory = policy.new_memory()

    def reset(self) -> None:
        self.memory = self.policy.new_memory()

    def act(self, env: PortfolioEnv, state: np.ndarray, step: int) -> np.ndarray:
        logits, _, self.memory = self.policy.step(state, self.memory, advance=1)
        a = greedy_action(logits)
        return a / a.sum()


@dataclass
class BacktestResult:
    name: str
    curve: EquityCurve
    snapshots: list[AccountSnapshot]
    tickers: tuple[str, ...]

    @property
    def weights(self) -> np.ndarray:
        return np.stack([s.weights for s in self.snapshots])


def run_backtest(strategy: Strategy, features: FeaturePanel, env_config: EnvConfig) -> BacktestResult:
    env = PortfolioEnv(features, env_config)
    if isinstance(strategy, PolicyStrategy) and strategy.policy.config.n_assets != env.n_assets:
        raise ContractError(f"policy trades {strategy.policy.config.n_assets} assets, panel has {env.n_assets}")
    strategy.reset()
    state = env.reset()
    dates = [features.dates[env.t - 1]]
    values = [env.config.initial_cash]
    snaps = []
    step = 0
    while not env.done:
        target = strategy.act(env, state, step)
        state, _, _, snap = env.step(target)
        snaps.append(snap)
        dates.append(snap.date)
        values.append(snap.value)
        step += 1
    return BacktestResult(strategy.name, EquityCurve(tuple(dates), np.asarray(values)), snaps, features.tickers)


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------


def fmt(x: float) -> str:
    return repr(float(x))


def write_metrics_table(rows: Sequence[dict], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["strategy"], r["dataset"]] + [fmt(r[c]) for c in METRIC_COLUMNS[2:]])


def read_metrics_table(path: str | Path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [{k: (v if k in ("strategy", "dataset") else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def write_equity_curve(curve: EquityCurve, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "value_ratio"])
        for d, r in zip(curve.dates, curve.ratios):
            w.writerow([d, fmt(r)])


def read_equity_curve(path: str | Path) -> EquityCurve:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return EquityCurve(tuple(r["date"] for r in rows), np.array([float(r["value_ratio"]) for r in rows]))


def write_weight_log(result: BacktestResult, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "ticker", "weight"])
        for s in result.snapshots:
            for ticker, weight in zip(list(result.tickers) + ["CASH"], s.weights):
                w.writerow([s.date, ticker, fmt(weight)])


def svg_lines(series: dict[str, Sequence[float]], title: str, width: int = 640, height: int = 360) -> str:
    """Minimal dependency-free SVG line chart; output depends only on the inputs."""
    palette = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")
    pad = 40
    finite = [float(v) for ys in series.values() for v in ys if np.isfinite(v)]
    lo, hi = (min(finite), max(finite)) if finite else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{pad}" y="20" font-family="sans-serif" font-size="14">{title}</text>',
           f'<text x="4" y="{pad}" font-family="sans-serif" font-size="10">{hi:.4g}</text>',
           f'<text x="4" y="{height - pad}" font-family="sans-serif" font-size="10">{lo:.4g}</text>']
    for k, (name, ys) in enumerate(series.items()):
        ys = list(ys)
        n = max(len(ys) - 1, 1)
        pts = " ".join(f"{pad + (width - 2 * pad) * i / n:.2f},"
                       f"{height - pad - (height - 2 * pad) * (float(y) - lo) / (hi - lo):.2f}"
                       for i, y in enumerate(ys) if np.isfinite(y))
        color = palette[k % len(palette)]
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{width - pad - 120}" y="{pad + 14 * k}" font-family="sans-serif" '
                   f'font-size="11" fill="{color}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def backtest_all(strategies: Sequence[Strategy], features: FeaturePanel, env_config: EnvConfig,
                 metrics: MetricsConfig = MetricsConfig(), dataset: str = "test",
                 on_result: Callable[[BacktestResult], None] | None = None) -> list[dict]:
    rows = []
    for s in strategies:
        res = run_backtest(s, features, env_config)
        if on_result:
            on_result(res)
        rows.append({"strategy": res.name, "dataset": dataset, **all_metrics(res.curve, metrics)})
    return rows
