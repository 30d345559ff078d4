"""Technical-indicator features per (day, asset) and training-set normalisation.

All indicators are causal: the value on day ``t`` uses only bars ``<= t``.
Arrays are (n_days, n_assets); undefined warm-up cells are NaN.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .market_data import PanelData

FEATURE_NAMES = (
    "boll_upper", "boll_middle", "boll_lower",
    "cci", "rsi", "tr",
    "plus_di", "minus_di", "adx",
    "macd", "macd_signal", "macd_hist",
    "mfi", "adj_close",
)
PRICE_LEVEL = frozenset({"boll_upper", "boll_middle", "boll_lower", "tr", "macd", "macd_signal",
                         "macd_hist", "adj_close"})


class IndicatorError(ValueError):
    pass


@dataclass(frozen=True)
class IndicatorConfig:
    boll_window: int = 20
    boll_k: float = 2.0
    cci_window: int = 14
    rsi_window: int = 14
    dmi_window: int = 14
    macd_fast: int = 12
    macd_slow: int = 26
    macd_signal: int = 9
    mfi_window: int = 14

    def __post_init__(self):
        for name in ("boll_window", "cci_window", "rsi_window", "dmi_window", "macd_fast",
                     "macd_slow", "macd_signal", "mfi_window"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"indicator window {name} must be >= 1")
        if self.boll_k < 0:
            raise ValueError("boll_k must be non-negative")

    def first_valid(self) -> dict[str, int]:
        """Index of the first defined value for each indicator family."""
        return {
            "BOLL": self.boll_window - 1,
            "CCI": self.cci_window - 1,
            "RSI": self.rsi_window,
            "TR": 0,
            "DMI": 2 * self.dmi_window - 1,
            "MACD": max(self.macd_fast, self.macd_slow) + self.macd_signal - 2,
            "MFI": self.mfi_window,
        }

    @property
    def warmup(self) -> int:
        """Number of leading days with at least one undefined feature."""
        return max(self.first_valid().values())


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def rolling_sum(x: np.ndarray, window: int) -> np.ndarray:
    out = np.full_like(x, np.nan, dtype=np.float64)
    if window > len(x):
        return out
    c = np.cumsum(np.vstack([np.zeros((1,) + x.shape[1:]), x]), axis=0)
    out[window - 1:] = c[window:] - c[:-window]
    return out


def sma(x: np.ndarray, window: int) -> np.ndarray:
    # direct windowed mean, not cumsum differences: constant input must give the constant back exactly
    out = np.full_like(x, np.nan, dtype=np.float64)
    if window > len(x):
        return out
    view = np.lib.stride_tricks.sliding_window_view(x, window, axis=0)
    out[window - 1:] = view.mean(axis=-1)
    return out


def rolling_std(x: np.ndarray, window: int) -> np.ndarray:
    out = np.full_like(x, np.nan, dtype=np.float64)
    if window > len(x):
        return out
    view = np.lib.stride_tricks.sliding_window_view(x, window, axis=0)
    out[window - 1:] = view.std(axis=-1)
    return out


def ema(x: np.ndarray, span: int, start: int = 0) -> np.ndarray:
    """EMA with alpha = 2/(span+1), seeded by the SMA of the first ``span`` values from ``start``."""
    out = np.full_like(x, np.nan, dtype=np.float64)
    seed_at = start + span - 1
    if seed_at >= len(x):
        return out
    alpha = 2.0 / (span + 1.0)
    out[seed_at] = x[start:seed_at + 1].mean(axis=0)
    for t in range(seed_at + 1, len(x)):
        out[t] = alpha * x[t] + (1.0 - alpha) * out[t - 1]
    return out


def wilder(x: np.ndarray, window: int, start: int) -> np.ndarray:
    """Wilder running average seeded by the mean of ``x[start:start+window]``."""
    out = np.full_like(x, np.nan, dtype=np.float64)
    seed_at = start + window - 1
    if seed_at >= len(x):
        return out
    out[seed_at] = x[start:seed_at + 1].mean(axis=0)
    for t in range(seed_at + 1, len(x)):
        out[t] = (out[t - 1] * (window - 1) + x[t]) / window
    return out


def _safe_ratio(num: np.ndarray, den: np.ndarray, when_zero: float) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = num / den
    return np.where(den == 0, when_zero, out)


# ---------------------------------------------------------------------------
# indicator families
# ---------------------------------------------------------------------------


def bollinger(close: np.ndarray, window: int = 20, k: float = 2.0):
    mid = sma(close, window)
    sd = rolling_std(close, window)
    return mid + k * sd, mid, mid - k * sd


def true_range(high: np.ndarray, low: np.ndarray, close: np.ndarray) -> np.ndarray:
    tr = high - low
    prev = close[:-1]
    tr[1:] = np.maximum.reduce([high[1:] - low[1:], np.abs(high[1:] - prev), np.abs(low[1:] - prev)])
    return tr


def cci(high, low, close, window: int = 14) -> np.ndarray:
    tp = (high + low + close) / 3.0
    out = np.full_like(tp, np.nan)
    if window > len(tp):
        return out
    view = np.lib.stride_tricks.sliding_window_view(tp, window, axis=0)
    mean = view.mean(axis=-1)
    mad = np.abs(view - mean[..., None]).mean(axis=-1)
    dev = tp[window - 1:] - mean
    # a flat window leaves rounding-level residue; treat it as zero deviation
    flat = mad <= 1e-12 * np.maximum(np.abs(mean), 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = dev / (0.015 * mad)
    out[window - 1:] = np.where(flat, 0.0, val)
    return out


def rsi(close: np.ndarray, window: int = 14) -> np.ndarray:
    diff = np.zeros_like(close)
    diff[1:] = close[1:] - close[:-1]
    gain = wilder(np.maximum(diff, 0.0), window, start=1)
    loss = wilder(np.maximum(-diff, 0.0), window, start=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = 100.0 - 100.0 / (1.0 + gain / loss)
    val = np.where(loss == 0, 100.0, val)
    val = np.where((loss == 0) & (gain == 0), 50.0, val)
    return np.where(np.isnan(gain), np.nan, val)


def dmi(high, low, close, window: int = 14):
    up = np.zeros_like(high)
    down = np.zeros_like(low)
    up[1:] = high[1:] - high[:-1]
    down[1:] = low[:-1] - low[1:]
    plus_dm = np.where((up > down) & (up > 0), up, 0.0)
    minus_dm = np.where((down > up) & (down > 0), down, 0.0)
    tr = true_range(high, low, close)
    s_tr = wilder(tr, window, start=1)
    plus_di = _safe_ratio(100.0 * wilder(plus_dm, window, start=1), s_tr, 0.0)
    minus_di = _safe_ratio(100.0 * wilder(minus_dm, window, start=1), s_tr, 0.0)
    plus_di = np.where(np.isnan(s_tr), np.nan, plus_di)
    minus_di = np.where(np.isnan(s_tr), np.nan, minus_di)
    dx = _safe_ratio(100.0 * np.abs(plus_di - minus_di), plus_di + minus_di, 0.0)
    dx = np.where(np.isnan(plus_di), np.nan, dx)
    adx = wilder(dx, window, start=window)
    return plus_di, minus_di, adx


def macd(close: np.ndarray, fast: int = 12, slow: int = 26, signal: int = 9):
    line = ema(close, fast) - ema(close, slow)
    first = max(fast, slow) - 1
    sig = ema(line, signal, start=first)
    return line, sig, line - sig


def mfi(high, low, close, volume, window: int = 14) -> np.ndarray:
    tp = (high + low + close) / 3.0
    flow = tp * volume
    pos = np.zeros_like(flow)
    neg = np.zeros_like(flow)
    pos[1:] = np.where(tp[1:] > tp[:-1], flow[1:], 0.0)
    neg[1:] = np.where(tp[1:] < tp[:-1], flow[1:], 0.0)
    pos_sum = rolling_sum(pos, window)
    neg_sum = rolling_sum(neg, window)
    # first window of flows spans diffs 1..window
    pos_sum[:window] = np.nan
    neg_sum[:window] = np.nan
    with np.errstate(divide="ignore", invalid="ignore"):
        val = 100.0 - 100.0 / (1.0 + pos_sum / neg_sum)
    val = np.where(neg_sum == 0, 100.0, val)
    val = np.where((neg_sum == 0) & (pos_sum == 0), 50.0, val)
    return np.where(np.isnan(pos_sum), np.nan, val)


# ---------------------------------------------------------------------------
# panels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeaturePanel:
    """Per (day, asset) feature vectors. ``values`` has shape (n_days, n_assets, n_features).

    The first ``warmup`` rows contain undefined indicators and never enter a state.
    ``prices`` is the adjusted close used for accounting.
    """

    dates: tuple[str, ...]
    tickers: tuple[str, ...]
    names: tuple[str, ...]
    values: np.ndarray
    prices: np.ndarray
    warmup: int = 0

    @property
    def n_days(self) -> int:
        return len(self.dates)

    @property
    def n_assets(self) -> int:
        return len(self.tickers)

    @property
    def n_features(self) -> int:
        return len(self.names)

    def feature(self, name: str) -> np.ndarray:
        return self.values[:, :, self.names.index(name)]

    def slice_days(self, start: int, stop: int, warmup: int = 0) -> FeaturePanel:
        return FeaturePanel(self.dates[start:stop], self.tickers, self.names,
                            self.values[start:stop], self.prices[start:stop], warmup)

    def episode(self, first_date: str, last_date: str, context: int) -> FeaturePanel:
        """Rows for an episode whose first trading day is ``first_date``.

        ``context`` rows before that day are kept for the lookback window.
        """
        dates = np.asarray(self.dates)
        idx = np.flatnonzero((dates >= first_date) & (dates <= last_date))
        if idx.size == 0:
            raise IndicatorError(f"no rows between {first_date} and {last_date}")
        start = int(idx[0]) - context
        if start < self.warmup:
            raise IndicatorError(
                f"episode starting {first_date} needs {context} context rows after the "
                f"{self.warmup}-row warm-up; only {int(idx[0]) - self.warmup} available")
        return self.slice_days(start, int(idx[-1]) + 1)


def compute_features(panel: PanelData, config: IndicatorConfig | None = None) -> FeaturePanel:
    config = config or IndicatorConfig()
    if panel.n_days == 0 or panel.n_assets == 0:
        raise IndicatorError("panel is empty")
    if not panel.complete:
        raise IndicatorError("panel has missing cells; align it first")
    for name, idx in config.first_valid().items():
        if idx >= panel.n_days:
            raise IndicatorError(
                f"{name} needs {idx + 1} days but series for {panel.tickers[0]} has {panel.n_days}")
    h, l, c, v = panel.high, panel.low, panel.close, panel.volume
    up, mid, lo = bollinger(c, config.boll_window, config.boll_k)
    plus_di, minus_di, adx = dmi(h, l, c, config.dmi_window)
    line, sig, hist = macd(c, config.macd_fast, config.macd_slow, config.macd_signal)
    columns = {
        "boll_upper": up, "boll_middle": mid, "boll_lower": lo,
        "cci": cci(h, l, c, config.cci_window),
        "rsi": rsi(c, config.rsi_window),
        "tr": true_range(h, l, c),
        "plus_di": plus_di, "minus_di": minus_di, "adx": adx,
        "macd": line, "macd_signal": sig, "macd_hist": hist,
        "mfi": mfi(h, l, c, v, config.mfi_window),
        "adj_close": panel.adj_close.copy(),
    }
    values = np.stack([columns[name] for name in FEATURE_NAMES], axis=-1)
    return FeaturePanel(panel.dates, panel.tickers, FEATURE_NAMES, values,
                        panel.adj_close.copy(), config.warmup)


@dataclass
class FeatureNormalizer:
    """Per-asset, per-feature z-scoring fitted on training rows."""

    mean: np.ndarray
    std: np.ndarray
    price_base: np.ndarray = field(default_factory=lambda: np.ones(0))

    @classmethod
    def fit(cls, features: FeaturePanel) -> FeatureNormalizer:
        rows = features.values[features.warmup:]
        if rows.shape[0] == 0:
            raise IndicatorError("no post-warm-up rows to fit normalisation on")
        base = features.prices[features.warmup]
        scaled = rows.copy()
        price_cols = [i for i, n in enumerate(features.names) if n in PRICE_LEVEL]
        scaled[:, :, price_cols] /= base[None, :, None]
        mean = scaled.mean(axis=0)
        std = scaled.std(axis=0)
        std = np.where(std < 1e-12, 1.0, std)
        return cls(mean, std, base)

    def transform(self, features: FeaturePanel) -> FeaturePanel:
        values = features.values.copy()
        price_cols = [i for i, n in enumerate(features.names) if n in PRICE_LEVEL]
        values[:, :, price_cols] /= self.price_base[None, :, None]
        values = (values - self.mean[None]) / self.std[None]
        return FeaturePanel(features.dates, features.tickers, features.names, values,
                            features.prices, features.warmup)
