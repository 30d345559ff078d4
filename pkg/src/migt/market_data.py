"""OHLCV panels: CSV ingest, calendar alignment, date splits, outlier pseudo-data, synthetic markets."""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

CSV_HEADER = ["date", "ticker", "open", "high", "low", "close", "adj_close", "volume"]
PRICE_FIELDS = ("open", "high", "low", "close", "adj_close")
FIELDS = PRICE_FIELDS + ("volume",)
DEFAULT_OUTLIER_FACTORS = (0.5, 2.0)


class DataError(ValueError):
    """Malformed or inconsistent market data."""


@dataclass(frozen=True, eq=False)
class PanelData:
    """Dates x tickers OHLCV history. Each field is an array of shape (n_days, n_assets).

    Missing (date, ticker) cells are NaN until :func:`align` drops incomplete assets.
    """

    dates: tuple[str, ...]
    tickers: tuple[str, ...]
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    adj_close: np.ndarray
    volume: np.ndarray
    dropped: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        shape = (len(self.dates), len(self.tickers))
        for name in FIELDS:
            arr = getattr(self, name)
            if arr.shape != shape:
                raise DataError(f"field {name} has shape {arr.shape}, expected {shape}")
            arr.setflags(write=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PanelData):
            return NotImplemented
        return (self.dates == other.dates and self.tickers == other.tickers
                and all(np.array_equal(self.field(f), other.field(f), equal_nan=True) for f in FIELDS))

    __hash__ = None

    @property
    def n_days(self) -> int:
        return len(self.dates)

    @property
    def n_assets(self) -> int:
        return len(self.tickers)

    @property
    def complete(self) -> bool:
        return bool(np.all(np.isfinite(self.adj_close)))

    def field(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def replace(self, **arrays) -> PanelData:
        kw = {name: getattr(self, name) for name in FIELDS}
        kw.update(arrays)
        return PanelData(self.dates, self.tickers, dropped=self.dropped, **kw)

    def take_days(self, rows: slice | np.ndarray) -> PanelData:
        dates = tuple(np.asarray(self.dates, dtype=object)[rows])
        return PanelData(dates, self.tickers, dropped=self.dropped,
                         **{name: getattr(self, name)[rows].copy() for name in FIELDS})

    def take_assets(self, cols: Sequence[int], dropped: Sequence[str] = ()) -> PanelData:
        cols = list(cols)
        tickers = tuple(self.tickers[c] for c in cols)
        return PanelData(self.dates, tickers, dropped=tuple(self.dropped) + tuple(dropped),
                         **{name: getattr(self, name)[:, cols].copy() for name in FIELDS})

    def validate(self) -> None:
        """Check the bar ordering and positivity rules on every present cell."""
        if any(a >= b for a, b in zip(self.dates, self.dates[1:])):
            raise DataError("dates are not strictly increasing")
        present = np.isfinite(self.close)
        o, h, l, c = self.open, self.high, self.low, self.close
        with np.errstate(invalid="ignore"):
            bad = present & ~((h >= np.maximum(o, c)) & (np.minimum(o, c) >= l) & (l > 0)
                              & (self.adj_close > 0) & (self.volume >= 0))
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise DataError(f"invalid bar for {self.tickers[j]} on {self.dates[i]}")


def _check_bar(o, h, l, c, adj, vol) -> str | None:
    if not all(math.isfinite(v) for v in (o, h, l, c, adj, vol)):
        return "non-finite value"
    if l > h:
        return f"low {l} > high {h}"
    if h < max(o, c):
        return f"high {h} below open/close"
    if l > min(o, c):
        return f"low {l} above open/close"
    if l <= 0 or adj <= 0:
        return "non-positive price"
    if vol < 0:
        return "negative volume"
    return None


def load_ohlcv(path: str | Path) -> PanelData:
    """Parse a ``date,ticker,open,high,low,close,adj_close,volume`` CSV into a panel.

    Cells absent from the file are NaN. Tickers and dates come out sorted.
    """
    path = Path(path)
    records: dict[tuple[str, str], tuple[float, ...]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if sorted(header) != sorted(CSV_HEADER):
            raise DataError(f"{path}: line 1: header must contain {','.join(CSV_HEADER)}")
        col = {name: header.index(name) for name in CSV_HEADER}
        for row in reader:
            line = reader.line_num
            if not row or all(not x.strip() for x in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: line {line}: expected {len(header)} fields, got {len(row)}")
            date = row[col["date"]].strip()
            ticker = row[col["ticker"]].strip()
            try:
                dt.date.fromisoformat(date)
            except ValueError:
                raise DataError(f"{path}: line {line}: bad date {date!r}") from None
            if not ticker:
                raise DataError(f"{path}: line {line}: empty ticker")
            try:
                values = tuple(float(row[col[name]]) for name in FIELDS)
            except ValueError:
                raise DataError(f"{path}: line {line}: non-numeric field") from None
            problem = _check_bar(*values)
            if problem:
                raise DataError(f"{path}: line {line}: {problem} ({date}, {ticker})")
            key = (date, ticker)
            if key in records:
                raise DataError(f"{path}: line {line}: duplicate row for ({date}, {ticker})")
            records[key] = values
    if not records:
        raise DataError(f"{path}: empty panel (no data rows)")

    dates = tuple(sorted({d for d, _ in records}))
    tickers = tuple(sorted({t for _, t in records}))
    d_idx = {d: i for i, d in enumerate(dates)}
    t_idx = {t: j for j, t in enumerate(tickers)}
    arrays = {name: np.full((len(dates), len(tickers)), np.nan) for name in FIELDS}
    for (d, t), values in records.items():
        i, j = d_idx[d], t_idx[t]
        for name, v in zip(FIELDS, values):
            arrays[name][i, j] = v
    return PanelData(dates, tickers, **arrays)


def write_ohlcv(panel: PanelData, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for i, date in enumerate(panel.dates):
            for j, ticker in enumerate(panel.tickers):
                if not np.isfinite(panel.close[i, j]):
                    continue
                writer.writerow([date, ticker] + [repr(float(panel.field(n)[i, j])) for n in FIELDS])


def align(panel: PanelData) -> tuple[PanelData, list[str]]:
    """Drop every asset with a missing cell anywhere in the panel."""
    full = np.all(np.isfinite(panel.close), axis=0)
    dropped = [t for t, ok in zip(panel.tickers, full) if not ok]
    for t in dropped:
        logger.warning("dropping %s: incomplete history", t)
    if not full.any():
        raise DataError("no asset has complete history")
    return panel.take_assets(np.flatnonzero(full), dropped), dropped


def _date_mask(panel: PanelData, start: str, end: str) -> np.ndarray:
    dates = np.asarray(panel.dates)
    return (dates >= start) & (dates <= end)


def align_and_split(panel: PanelData, train: tuple[str, str], test: tuple[str, str]) -> tuple[PanelData, PanelData]:
    """Cut a panel into train/test date ranges, dropping assets incomplete in either range."""
    (tr0, tr1), (te0, te1) = train, test
    for a, b in (train, test):
        dt.date.fromisoformat(a), dt.date.fromisoformat(b)
        if a > b:
            raise DataError(f"date range {a}..{b} is reversed")
    if tr1 >= te0:
        raise DataError(f"train range {tr0}..{tr1} must end before test range {te0}..{te1} begins")
    tr_mask = _date_mask(panel, tr0, tr1)
    te_mask = _date_mask(panel, te0, te1)
    if not tr_mask.any() or not te_mask.any():
        raise DataError("a date range contains no trading days")
    rows = tr_mask | te_mask
    full = np.all(np.isfinite(panel.close[rows]), axis=0)
    dropped = [t for t, ok in zip(panel.tickers, full) if not ok]
    for t in dropped:
        logger.warning("dropping %s: missing days inside the requested ranges", t)
    if not full.any():
        raise DataError("no asset covers both date ranges")
    keep = np.flatnonzero(full)
    return (panel.take_days(tr_mask).take_assets(keep, dropped),
            panel.take_days(te_mask).take_assets(keep, dropped))


def inject_outliers(panel: PanelData, fraction: float, magnitude: Sequence[float] = DEFAULT_OUTLIER_FACTORS,
                    seed: int = 0) -> PanelData:
    """Scale the prices of ``floor(fraction * cells)`` randomly chosen (day, asset) cells.

    Each chosen cell has open/high/low/close/adj_close multiplied by a factor drawn from
    ``magnitude``. Volume is left alone.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    factors = np.asarray(list(magnitude), dtype=np.float64)
    if factors.size == 0:
        raise ValueError("magnitude factor set is empty")
    if np.any(factors <= 0):
        raise ValueError("magnitude factors must be positive")
    cells = panel.n_days * panel.n_assets
    k = math.floor(fraction * cells + 1e-9)
    if k == 0:
        return panel
    rng = np.random.default_rng(seed)
    chosen = rng.choice(cells, size=k, replace=False)
    scale = np.ones(cells)
    scale[chosen] = rng.choice(factors, size=k)
    scale = scale.reshape(panel.n_days, panel.n_assets)
    scaled = {name: panel.field(name) * scale for name in PRICE_FIELDS}
    o, c = scaled["open"], scaled["close"]
    scaled["high"] = np.maximum(scaled["high"], np.maximum(o, c))
    scaled["low"] = np.minimum(scaled["low"], np.minimum(o, c))
    return panel.replace(**scaled)


def business_days(start: str, n: int) -> tuple[str, ...]:
    day = dt.date.fromisoformat(start)
    out = []
    while len(out) < n:
        if day.weekday() < 5:
            out.append(day.isoformat())
        day += dt.timedelta(days=1)
    return tuple(out)


def synth_market(n_assets: int, n_days: int, drift: float | Sequence[float] = 0.0,
                 volatility: float | Sequence[float] = 0.01, seed: int = 0,
                 start: str = "2016-01-04", initial_price: float = 100.0) -> PanelData:
    """Geometric random-walk market.

    ``close[t] = close[t-1] * (1 + drift) * exp(vol * eps - vol**2 / 2)``, so zero volatility
    gives ``close[t] = close[0] * (1 + drift) ** t`` exactly in closed form.
    """
    if n_assets < 1 or n_days < 2:
        raise ValueError("need n_assets >= 1 and n_days >= 2")
    mu = np.broadcast_to(np.asarray(drift, dtype=np.float64), (n_assets,))
    vol = np.broadcast_to(np.asarray(volatility, dtype=np.float64), (n_assets,))
    if np.any(vol < 0):
        raise ValueError("volatility must be non-negative")
    if np.any(mu <= -1):
        raise ValueError("drift must exceed -1")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n_days, n_assets))
    eps[0] = 0.0
    log_step = np.log1p(mu) + vol * eps - 0.5 * vol**2
    log_step[0] = 0.0
    close = initial_price * np.exp(np.cumsum(log_step, axis=0))
    prev = np.vstack([close[:1], close[:-1]])
    open_ = prev * np.exp(0.25 * vol * rng.standard_normal((n_days, n_assets)))
    open_[0] = close[0]
    top = np.maximum(open_, close)
    bottom = np.minimum(open_, close)
    high = top * np.exp(0.5 * vol * np.abs(rng.standard_normal((n_days, n_assets))))
    low = bottom * np.exp(-0.5 * vol * np.abs(rng.standard_normal((n_days, n_assets))))
    volume = np.round(1e6 * np.exp(0.2 * rng.standard_normal((n_days, n_assets))))
    tickers = tuple(f"SYN{j:02d}" for j in range(n_assets))
    return PanelData(business_days(start, n_days), tickers, open=open_, high=high, low=low,
                     close=close, adj_close=close.copy(), volume=volume)
