import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from migt.indicators import (FEATURE_NAMES, FeatureNormalizer, IndicatorConfig, IndicatorError, bollinger, cci,
                             compute_features, dmi, macd, mfi, rsi, true_range)
from migt.market_data import synth_market

CFG = IndicatorConfig()


def flat_panel(n_days=60, price=50.0):
    p = synth_market(2, n_days, volatility=0.0, seed=0, initial_price=price)
    return p.replace(open=p.close.copy(), high=p.close.copy(), low=p.close.copy())


# ---------------------------------------------------------------- loop oracles


def oracle_ema(x, span, start=0):
    out = [np.nan] * len(x)
    a = 2 / (span + 1)
    seed = start + span - 1
    out[seed] = sum(x[start:seed + 1]) / span
    for t in range(seed + 1, len(x)):
        out[t] = a * x[t] + (1 - a) * out[t - 1]
    return np.array(out)


def oracle_rsi(c, n=14):
    out = [np.nan] * len(c)
    gains = [max(c[i] - c[i - 1], 0) for i in range(1, len(c))]
    losses = [max(c[i - 1] - c[i], 0) for i in range(1, len(c))]
    g, l = sum(gains[:n]) / n, sum(losses[:n]) / n
    for t in range(n, len(c)):
        if t > n:
            g = (g * (n - 1) + gains[t - 1]) / n
            l = (l * (n - 1) + losses[t - 1]) / n
        out[t] = 50.0 if g == l == 0 else 100.0 if l == 0 else 100 - 100 / (1 + g / l)
    return np.array(out)


def oracle_cci(h, l, c, n=14):
    tp = [(a + b + d) / 3 for a, b, d in zip(h, l, c)]
    out = [np.nan] * len(tp)
    for t in range(n - 1, len(tp)):
        w = tp[t - n + 1:t + 1]
        m = sum(w) / n
        mad = sum(abs(v - m) for v in w) / n
        out[t] = 0.0 if mad == 0 else (tp[t] - m) / (0.015 * mad)
    return np.array(out)


def oracle_mfi(h, l, c, v, n=14):
    tp = [(a + b + d) / 3 for a, b, d in zip(h, l, c)]
    out = [np.nan] * len(tp)
    for t in range(n, len(tp)):
        pos = sum(tp[i] * v[i] for i in range(t - n + 1, t + 1) if tp[i] > tp[i - 1])
        neg = sum(tp[i] * v[i] for i in range(t - n + 1, t + 1) if tp[i] < tp[i - 1])
        out[t] = 50.0 if pos == neg == 0 else 100.0 if neg == 0 else 100 - 100 / (1 + pos / neg)
    return np.array(out)


def oracle_boll(c, n=20, k=2.0):
    up, mid, lo = (np.full(len(c), np.nan) for _ in range(3))
    for t in range(n - 1, len(c)):
        w = np.array(c[t - n + 1:t + 1])
        m = w.sum() / n
        sd = np.sqrt(((w - m) ** 2).sum() / n)
        up[t], mid[t], lo[t] = m + k * sd, m, m - k * sd
    return up, mid, lo


def series(seed=0, n=120):
    p = synth_market(1, n, drift=0.0005, volatility=0.02, seed=seed)
    return p.high[:, 0], p.low[:, 0], p.close[:, 0], p.volume[:, 0]


# ---------------------------------------------------------------- examples


def test_constant_prices_fixed_points():
    f = compute_features(flat_panel())
    rows = slice(CFG.warmup, None)
    assert np.all(f.feature("macd")[rows] == 0)
    np.testing.assert_array_equal(f.feature("boll_upper")[rows], f.feature("boll_middle")[rows])
    np.testing.assert_array_equal(f.feature("boll_lower")[rows], 50.0)
    assert np.all(f.feature("tr")[1:] == 0)
    assert np.all(f.feature("cci")[rows] == 0)


def test_increasing_closes_rsi_is_100():
    c = 10.0 + np.arange(30.0)
    assert np.all(rsi(c[:, None])[14:] == 100.0)


def test_true_range_hand_series():
    high = np.array([10, 11, 12, 11.5, 13, 12, 12.5, 14, 13, 15, 14, 14.5, 16, 15, 17.0])
    low = np.array([9, 9.5, 10, 10.5, 11, 10, 11.5, 12, 11, 13, 12, 13.5, 14, 13, 15.0])
    close = np.array([9.5, 10.5, 11.5, 11, 12, 11, 12, 13, 12, 14, 13, 14, 15, 14, 16.0])
    tr = true_range(high[:, None], low[:, None], close[:, None])[:, 0]
    expect = [high[0] - low[0]] + [max(high[t] - low[t], abs(high[t] - close[t - 1]), abs(low[t] - close[t - 1]))
                                   for t in range(1, 15)]
    np.testing.assert_allclose(tr, expect, rtol=0, atol=0)


def test_constant_typical_price_cci_zero():
    h = np.full((30, 1), 11.0)
    l = np.full((30, 1), 9.0)
    c = np.full((30, 1), 10.0)
    assert np.all(cci(h, l, c)[13:] == 0.0)


def test_series_too_short_names_indicator_and_asset():
    with pytest.raises(IndicatorError, match="MACD.*SYN00"):
        compute_features(synth_market(1, 30, seed=0))


def test_feature_names_and_warmup():
    f = compute_features(synth_market(3, 80, volatility=0.02, seed=1))
    assert f.names == FEATURE_NAMES and f.values.shape == (80, 3, len(FEATURE_NAMES))
    assert CFG.warmup == 33
    assert np.all(np.isfinite(f.values[CFG.warmup:]))
    assert not np.all(np.isfinite(f.values[CFG.warmup - 1]))


# ---------------------------------------------------------------- oracles


@pytest.mark.parametrize("seed", range(3))
def test_against_loop_oracles(seed):
    h, l, c, v = series(seed)
    col = lambda a: a[:, None]
    np.testing.assert_allclose(rsi(col(c))[:, 0], oracle_rsi(c), rtol=1e-10, equal_nan=True)
    np.testing.assert_allclose(cci(col(h), col(l), col(c))[:, 0], oracle_cci(h, l, c), rtol=1e-9, atol=1e-9,
                               equal_nan=True)
    np.testing.assert_allclose(mfi(col(h), col(l), col(c), col(v))[:, 0], oracle_mfi(h, l, c, v), rtol=1e-10,
                               equal_nan=True)
    for got, want in zip(bollinger(col(c)), oracle_boll(c)):
        np.testing.assert_allclose(got[:, 0], want, rtol=1e-12, equal_nan=True)
    line, sig, hist = (a[:, 0] for a in macd(col(c)))
    want_line = oracle_ema(c, 12) - oracle_ema(c, 26)
    np.testing.assert_allclose(line, want_line, rtol=1e-10, atol=1e-12, equal_nan=True)
    np.testing.assert_allclose(sig, oracle_ema(want_line, 9, start=25), rtol=1e-9, atol=1e-12, equal_nan=True)
    np.testing.assert_allclose(hist, line - sig, atol=1e-12, equal_nan=True)
    assert np.isnan(sig[32]) and np.isfinite(sig[33])


def test_dmi_zero_movement():
    h = np.full((40, 1), 10.0)
    plus, minus, adx = dmi(h, h.copy(), h.copy())
    assert np.all(plus[14:] == 0) and np.all(minus[14:] == 0) and np.all(adx[27:] == 0)
    assert np.isnan(adx[26, 0])


# ---------------------------------------------------------------- properties


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 5000), vol=st.floats(0.001, 0.08))
def test_bounds(seed, vol):
    f = compute_features(synth_market(2, 70, volatility=vol, seed=seed))
    r = slice(CFG.warmup, None)
    for name in ("rsi", "mfi", "adx"):
        x = f.feature(name)[r]
        assert np.all((x >= 0) & (x <= 100)), name
    assert np.all(f.feature("boll_lower")[r] <= f.feature("boll_middle")[r] + 1e-12)
    assert np.all(f.feature("boll_middle")[r] <= f.feature("boll_upper")[r] + 1e-12)
    assert np.all(f.feature("tr") >= 0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 5000), lam=st.floats(0.01, 100))
def test_scale_covariance(seed, lam):
    p = synth_market(2, 70, volatility=0.02, seed=seed)
    q = p.replace(**{k: p.field(k) * lam for k in ("open", "high", "low", "close", "adj_close")})
    a, b = compute_features(p), compute_features(q)
    r = slice(CFG.warmup, None)
    for name in ("rsi", "mfi", "cci", "plus_di", "minus_di", "adx"):
        np.testing.assert_allclose(b.feature(name)[r], a.feature(name)[r], rtol=1e-9, atol=1e-9, err_msg=name)
    for name in ("boll_upper", "boll_middle", "boll_lower", "tr", "macd", "macd_signal", "macd_hist"):
        np.testing.assert_allclose(b.feature(name)[r], lam * a.feature(name)[r], rtol=1e-9, atol=1e-9 * lam,
                                   err_msg=name)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 5000), cut=st.integers(40, 79))
def test_no_lookahead(seed, cut):
    p = synth_market(2, 80, volatility=0.02, seed=seed)
    full = compute_features(p)
    head = compute_features(p.take_days(slice(0, cut)))
    np.testing.assert_array_equal(head.values, full.values[:cut])


# ---------------------------------------------------------------- normalisation


def test_normalizer_uses_train_statistics():
    p = synth_market(2, 200, drift=0.001, volatility=0.02, seed=4)
    train = compute_features(p.take_days(slice(0, 120)))
    full = compute_features(p)
    norm = FeatureNormalizer.fit(train)
    z = norm.transform(train).values[train.warmup:]
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-9)
    test_z = norm.transform(full).values[120:]
    assert np.all(np.isfinite(test_z))
    # price-level features are expressed relative to the first post-warm-up training close
    np.testing.assert_allclose(norm.price_base, train.prices[train.warmup])


def test_normalizer_constant_feature_guard():
    f = compute_features(flat_panel(80))
    z = FeatureNormalizer.fit(f).transform(f).values[f.warmup:]
    assert np.all(np.isfinite(z))
