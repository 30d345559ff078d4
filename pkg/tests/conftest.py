import numpy as np
import pytest

from helpers import ACCEPTANCE_LINES
from migt.indicators import FeaturePanel
from migt.market_data import business_days


def make_features(prices, warmup=0, n_features=3, seed=0) -> FeaturePanel:
    """Feature panel with given prices and random finite features."""
    prices = np.asarray(prices, dtype=np.float64)
    days, n = prices.shape
    values = np.random.default_rng(seed).normal(size=(days, n, n_features))
    return FeaturePanel(business_days("2020-01-01", days), tuple(f"A{j}" for j in range(n)),
                        tuple(f"f{k}" for k in range(n_features)), values, prices, warmup)


def random_prices(days, n, seed=0, vol=0.02):
    rng = np.random.default_rng(seed)
    return 100.0 * np.exp(np.cumsum(vol * rng.standard_normal((days, n)), axis=0))


@pytest.fixture
def features():
    return make_features(random_prices(40, 3, seed=1))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
