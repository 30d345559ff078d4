"""Daily-rebalance portfolio MDP with proportional transaction costs and no shorting.

Indexing: a step at trading index ``t`` sees feature rows ``t-window .. t-1``. Orders are sized
and filled at the previous adjusted close ``V[t-1]``, then positions are marked at ``V[t]``:

    A_t = A_{t-1} + M_t.V_{t-1} (1 - c) - B_t.V_{t-1} (1 + c)
    W_t = W_{t-1} + B_t - M_t
    P_t = A_t + W_t.V_t
    dP_t = W_t.(V_t - V_{t-1}) - c (B_t + M_t).V_{t-1}
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .indicators import FeaturePanel

SUM_TOL = 1e-9
REWARD_MODES = ("initial", "raw")


class ContractError(ValueError):
    """A caller violated an operation precondition."""


@dataclass(frozen=True)
class EnvConfig:
    cost: float = 0.001
    initial_cash: float = 1_000_000.0
    window: int = 5
    reward_mode: str = "initial"

    def __post_init__(self):
        if not 0.0 <= self.cost < 0.05:
            raise ValueError(f"cost must lie in [0, 0.05), got {self.cost}")
        if not self.initial_cash > 0:
            raise ValueError("initial_cash must be positive")
        if int(self.window) < 1:
            raise ValueError("window must be >= 1")
        if self.reward_mode not in REWARD_MODES:
            raise ValueError(f"reward_mode must be one of {REWARD_MODES}")


@dataclass
class PortfolioAccount:
    cash: float
    shares: np.ndarray

    def value(self, prices: np.ndarray) -> float:
        return float(self.cash + self.shares @ prices)

    def fractions(self, prices: np.ndarray) -> np.ndarray:
        """Allocation over (assets..., cash) at ``prices``; sums to one."""
        out = np.empty(len(prices) + 1)
        np.multiply(self.shares, prices, out=out[:-1])
        out[-1] = self.cash
        return out / out.sum()

    def copy(self) -> PortfolioAccount:
        return PortfolioAccount(self.cash, self.shares.copy())


@dataclass(frozen=True)
class TradePair:
    buys: np.ndarray
    sells: np.ndarray

    @property
    def turnover_shares(self) -> np.ndarray:
        return self.buys + self.sells


@dataclass(frozen=True)
class AccountSnapshot:
    date: str
    t: int
    value: float
    cash: float
    shares: np.ndarray
    weights: np.ndarray
    reward: float
    turnover: float
    cost: float


def check_target(target: np.ndarray, n_assets: int) -> np.ndarray:
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (n_assets + 1,):
        raise ContractError(f"target must have {n_assets + 1} entries (assets + cash), got {target.shape}")
    total = target.sum()
    # nan fails the comparison and any inf makes the sum non-finite
    if not np.isfinite(total) or not target.min() >= 0:
        raise ContractError("target allocation has negative or non-finite entries")
    if abs(total - 1.0) > SUM_TOL:
        raise ContractError(f"target allocation sums to {total!r}, not 1")
    return target


def target_to_trades(account: PortfolioAccount, target: np.ndarray, prices: np.ndarray, cost: float) -> TradePair:
    """Convert a target allocation into share trades executed at ``prices``.

    Sells settle first; buys are shrunk by one common factor when their cost-inclusive
    price would overdraw the cash left after sales.
    """
    prices = np.asarray(prices, dtype=np.float64)
    if np.any(prices <= 0):
        raise ContractError("execution prices must be positive")
    target = check_target(target, len(prices))
    value = account.value(prices)
    desired = target[:-1] * value / prices
    delta = desired - account.shares
    # rounding dust from re-deriving the current allocation is not a trade
    delta[np.abs(delta) <= 1e-12 * np.maximum(np.abs(desired), np.abs(account.shares))] = 0.0
    sells = np.minimum(np.maximum(-delta, 0.0), account.shares)
    buys = np.maximum(delta, 0.0)
    available = account.cash + (sells @ prices) * (1.0 - cost)
    spend = (buys @ prices) * (1.0 + cost)
    if spend > available:
        scale = max(available, 0.0) / spend
        buys = buys * scale
        # guard the last ulp so cash never dips below zero
        while account.cash + (sells @ prices) * (1.0 - cost) - (buys @ prices) * (1.0 + cost) < 0:
            buys = buys * (1.0 - 1e-15)
    return TradePair(buys, sells)


def settle(account: PortfolioAccount, trades: TradePair, prices: np.ndarray, cost: float) -> PortfolioAccount:
    cash = account.cash + (trades.sells @ prices) * (1.0 - cost) - (trades.buys @ prices) * (1.0 + cost)
    shares = account.shares - trades.sells + trades.buys
    return PortfolioAccount(cash, shares)


@dataclass
class PortfolioEnv:
    """Single-owner episode over one feature panel."""

    features: FeaturePanel
    config: EnvConfig = field(default_factory=EnvConfig)

    def __post_init__(self):
        need = self.features.warmup + self.config.window + 1
        if self.features.n_days < need:
            raise ContractError(
                f"panel has {self.features.n_days} days; needs at least {need} "
                f"(warm-up {self.features.warmup} + window {self.config.window} + 1)")
        self.prices = self.features.prices
        self.n_assets = self.features.n_assets
        self.first_step = self.features.warmup + self.config.window
        self.t = self.first_step
        self.account = PortfolioAccount(self.config.initial_cash, np.zeros(self.n_assets))
        self.done = True
        self._alloc_history = np.zeros((self.features.n_days, self.n_assets + 1))

    @property
    def episode_length(self) -> int:
        return self.features.n_days - self.first_step

    @property
    def n_features(self) -> int:
        return self.features.n_features + 2

    def reset(self) -> np.ndarray:
        self.t = self.first_step
        self.account = PortfolioAccount(self.config.initial_cash, np.zeros(self.n_assets))
        self.done = False
        self._alloc_history[:] = 0.0
        self._alloc_history[:, -1] = 1.0
        return self.observe()

    def observe(self) -> np.ndarray:
        """State tensor (window, n_assets, features + 2): cash fraction, asset fraction, indicators."""
        lo, hi = self.t - self.config.window, self.t
        alloc = self._alloc_history[lo:hi]
        state = np.empty((hi - lo, self.n_assets, self.n_features))
        state[..., 0] = alloc[:, -1:]
        state[..., 1] = alloc[:, :-1]
        state[..., 2:] = self.features.values[lo:hi]
        return state

    def current_fractions(self) -> np.ndarray:
        return self.account.fractions(self.prices[self.t - 1])

    def step(self, action: np.ndarray) -> tuple[np.ndarray | None, float, bool, AccountSnapshot]:
        if self.done:
            raise ContractError("step called on a finished episode; call reset first")
        c = self.config.cost
        v_prev, v_now = self.prices[self.t - 1], self.prices[self.t]
        before = self.account
        p_prev = before.value(v_prev)
        trades = target_to_trades(before, action, v_prev, c)
        after = settle(before, trades, v_prev, c)
        cost_paid = c * float(trades.turnover_shares @ v_prev)
        delta = float(after.shares @ (v_now - v_prev)) - cost_paid
        self.account = after
        value = after.value(v_now)
        scale = self.config.initial_cash if self.config.reward_mode == "initial" else 1.0
        weights = after.fractions(v_now)
        self._alloc_history[self.t] = weights
        snap = AccountSnapshot(
            date=self.features.dates[self.t], t=self.t, value=value, cash=after.cash,
            shares=after.shares.copy(), weights=weights, reward=delta / scale,
            turnover=float(trades.turnover_shares @ v_prev) / p_prev, cost=cost_paid)
        self.t += 1
        self.done = self.t >= self.features.n_days
        return (None if self.done else self.observe()), snap.reward, self.done, snap


def replay(env: PortfolioEnv, actions: Sequence[np.ndarray]) -> list[AccountSnapshot]:
    """Run a whole episode from reset with a fixed action sequence."""
    if len(actions) != env.episode_length:
        raise ContractError(f"expected {env.episode_length} actions, got {len(actions)}")
    env.reset()
    snaps = []
    for a in actions:
        _, _, _, snap = env.step(a)
        snaps.append(snap)
    return snaps


def write_snapshots(snaps: Sequence[AccountSnapshot], tickers: Sequence[str], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "portfolio_value", "cash", "reward", "turnover"] + list(tickers))
        for s in snaps:
            w.writerow([s.date, repr(s.value), repr(s.cash), repr(s.reward), repr(s.turnover)]
                       + [repr(float(x)) for x in s.weights[:-1]])
