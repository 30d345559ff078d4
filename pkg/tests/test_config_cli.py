import csv
import subprocess
import sys
import time

import numpy as np
import pytest

from migt.cli import main
from migt.config import ConfigValidationError, RunConfig, dump_config, load_config, parse_config
from migt.market_data import business_days, synth_market, write_ohlcv
from migt.policy import load_checkpoint

TINY = """
[data]
synth_assets = 2
synth_days = 200
synth_drift = 0.001, 0.0
synth_volatility = 0.002
train_days = 140

[ppo]
total_steps = {steps}
lr = {lr}

[ablation]
variants = {variants}
seeds = 0
fractions = {fractions}

[run]
seed = 3
out = {out}
"""


def tiny_config(tmp_path, steps=2000, lr=3e-3, variants="full", fractions="0.0", name="cfg.ini"):
    path = tmp_path / name
    path.write_text(TINY.format(steps=steps, lr=lr, variants=variants, fractions=fractions,
                                out=tmp_path / "out"), encoding="utf-8")
    return path


def rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- config


def test_dump_round_trip():
    cfg = parse_config("[run]\nseed = 11\n[ppo]\nclip = 0.3\n[data]\nsynth_drift = 0.002, 0.0, -0.001\n")
    back = parse_config(dump_config(cfg))
    assert back == cfg and back.ppo.seed == 11 and back.ppo.clip == 0.3
    assert dump_config(back) == dump_config(cfg)


def test_clip_out_of_range_names_field():
    with pytest.raises(ConfigValidationError, match=r"\[ppo\].*clip"):
        parse_config("[run]\nseed = 1\n[ppo]\nclip = 1.5\n")


@pytest.mark.parametrize("text,match", [
    ("[ppo]\nclip = 0.2\n", "seed"),
    ("[run]\nseed = 1\n[ppo]\nbogus = 1\n", "bogus"),
    ("[run]\nseed = 1\n[nonsense]\nx = 1\n", "nonsense"),
    ("[run]\nseed = 1\n[ppo]\nepochs = four\n", "epochs"),
    ("[run]\nseed = 1\n[model]\nvariant = deep\n", "variant"),
])
def test_config_rejections(text, match):
    with pytest.raises(ConfigValidationError, match=match):
        parse_config(text)


def test_load_missing_config(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "none.ini")


def test_overrides_follow_seed():
    cfg = RunConfig().with_overrides(seed=42, out="x")
    assert cfg.seed == 42 and cfg.ppo.seed == 42 and str(cfg.out) == "x"


# ---------------------------------------------------------------- train / backtest


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("train")
    cfg = tiny_config(tmp)
    start = time.perf_counter()
    code = main(["train", "--config", str(cfg)])
    return tmp, cfg, code, time.perf_counter() - start


def test_tiny_train_completes(trained):
    tmp, _, code, seconds = trained
    out = tmp / "out"
    assert code == 0 and seconds < 300
    for name in ("checkpoint.bin", "training_log.csv", "resolved_config.ini"):
        assert (out / name).is_file()
    log = rows(out / "training_log.csv")
    assert int(log[-1]["steps"]) == 2000
    _, extra = load_checkpoint(out / "checkpoint.bin")
    assert extra["tickers"] == ["SYN00", "SYN01"] or len(extra["tickers"]) == 2


def test_rerun_is_byte_identical(trained, tmp_path):
    tmp, cfg, _, _ = trained
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    for name in ("training_log.csv", "checkpoint.bin"):
        assert (tmp_path / name).read_bytes() == (tmp / "out" / name).read_bytes()


def test_resolved_config_reproduces_run(trained, tmp_path):
    tmp, _, _, _ = trained
    echoed = tmp / "out" / "resolved_config.ini"
    assert main(["train", "--config", str(echoed), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "training_log.csv").read_bytes() == (tmp / "out" / "training_log.csv").read_bytes()


def test_backtest_baselines_and_plots(trained, tmp_path):
    tmp, cfg, _, _ = trained
    code = main(["backtest", "--config", str(cfg), "--out", str(tmp_path), "--plot",
                 "--checkpoint", str(tmp / "out" / "checkpoint.bin"), "--baseline", "all_cash", "--baseline", "best"])
    assert code == 0
    table = {r["strategy"]: r for r in rows(tmp_path / "metrics.csv")}
    assert float(table["all_cash"]["cum_return"]) == 0.0
    assert set(table) == {"all_cash", "best", "MIGT_full"}
    for name in table:
        assert (tmp_path / f"equity_{name}.csv").is_file() and (tmp_path / f"equity_{name}.svg").is_file()
    assert (tmp_path / "equity_all.svg").read_text().startswith("<svg")
    by_date = {}
    for r in rows(tmp_path / "weights_best.csv"):
        by_date.setdefault(r["date"], []).append(float(r["weight"]))
    for weights in by_date.values():
        assert sum(w > 1e-9 for w in weights[:-1]) == 1 and weights[-1] < 1e-9
    first = (tmp_path / "metrics.csv").read_bytes()
    assert main(["backtest", "--config", str(cfg), "--out", str(tmp_path), "--plot",
                 "--checkpoint", str(tmp / "out" / "checkpoint.bin"), "--baseline", "all_cash",
                 "--baseline", "best"]) == 0
    assert (tmp_path / "metrics.csv").read_bytes() == first


def test_backtest_asset_mismatch(trained, tmp_path):
    tmp, _, _, _ = trained
    other = tmp_path / "three.ini"
    other.write_text("[data]\nsynth_assets = 3\nsynth_days = 200\ntrain_days = 140\n[run]\nseed = 1\n")
    code = main(["backtest", "--config", str(other), "--out", str(tmp_path),
                 "--checkpoint", str(tmp / "out" / "checkpoint.bin")])
    assert code == 1


def test_missing_checkpoint_is_io_error(tmp_path):
    cfg = tiny_config(tmp_path)
    assert main(["backtest", "--config", str(cfg), "--checkpoint", str(tmp_path / "nope.bin")]) == 3


# ---------------------------------------------------------------- ablate / report


def test_ablate_four_variants(tmp_path):
    cfg = tiny_config(tmp_path, steps=64, variants="full, no_norm, no_gating, no_transformer")
    assert main(["ablate", "--config", str(cfg), "--plot"]) == 0
    out = tmp_path / "out"
    table = rows(out / "ablation.csv")
    assert [r["variant"] for r in table] == ["full", "no_norm", "no_gating", "no_transformer"]
    assert all(r["status"] == "ok" for r in table)
    conv = rows(out / "convergence.csv")
    assert conv and (out / "convergence.svg").is_file()
    assert main(["report", "--config", str(cfg)]) == 0
    assert len(rows(out / "ablation_summary.csv")) == 4 and (out / "report.md").is_file()


def test_ablate_three_fractions(tmp_path):
    cfg = tiny_config(tmp_path, steps=16, fractions="0.0, 0.05, 0.10")
    assert main(["ablate", "--config", str(cfg)]) == 0
    table = rows(tmp_path / "out" / "ablation.csv")
    assert sorted(float(r["outlier_fraction"]) for r in table) == [0.0, 0.05, 0.10]
    assert len(list((tmp_path / "out" / "arms").iterdir())) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_ablate_all_arms_diverge(tmp_path):
    cfg = tiny_config(tmp_path, steps=768, lr=1e300, variants="full, no_norm")
    assert main(["ablate", "--config", str(cfg)]) == 2
    assert all(r["status"] != "ok" for r in rows(tmp_path / "out" / "ablation.csv"))


def test_report_without_inputs(tmp_path):
    assert main(["report", "--seed", "1", "--out", str(tmp_path)]) == 3


# ---------------------------------------------------------------- ingest


def test_ingest_counts(tmp_path, capsys):
    panel = synth_market(30, 756, seed=2)
    write_ohlcv(panel, tmp_path / "p.csv")
    assert main(["ingest", str(tmp_path / "p.csv"), "--out", str(tmp_path / "cache")]) == 0
    assert "30 tickers, 756 days" in capsys.readouterr().out
    assert (tmp_path / "cache" / "panel.csv").is_file()


def test_ingest_missing_file(tmp_path, capsys):
    assert main(["ingest", str(tmp_path / "absent.csv")]) == 3
    assert "absent.csv" in capsys.readouterr().err


def test_ingest_duplicate_row(tmp_path, capsys):
    write_ohlcv(synth_market(2, 10, seed=2), tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    (tmp_path / "p.csv").write_text("\n".join(lines + [lines[3]]) + "\n")
    assert main(["ingest", str(tmp_path / "p.csv"), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    key = lines[3].split(",")
    assert "duplicate" in err and key[0] in err and key[1] in err


def test_no_seed_is_validation_error(capsys):
    assert main(["train"]) == 1
    assert "seed" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "migt.cli", "report", "--seed", "1", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 3 and "ablation.csv" in res.stderr
