"""``migt`` command line: ingest, train, backtest, ablate, report.

Exit codes: 0 success, 1 validation error, 2 training divergence, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .backtest import (BaselineStrategy, PolicyStrategy, backtest_all, read_metrics_table, svg_lines,
                       write_equity_curve, write_metrics_table, write_weight_log)
from .config import ConfigValidationError, RunConfig, dump_config, load_config
from .env import ContractError, PortfolioEnv
from .experiments import (Dataset, ablation_report, make_policy, prepare_dataset, split_dates, write_ablation_table,
                          write_convergence)
from .indicators import IndicatorError
from .market_data import DataError, PanelData, align, load_ohlcv, synth_market, write_ohlcv
from .policy import CheckpointError, ConfigError, load_checkpoint, save_checkpoint
from .ppo import TrainingDiverged, train

logger = logging.getLogger("migt")

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3

CHECKPOINT = "checkpoint.bin"
TRAINING_LOG = "training_log.csv"
RESOLVED = "resolved_config.ini"
PANEL_CACHE = "panel.csv"


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def resolve_config(args: argparse.Namespace) -> RunConfig:
    base = load_config(args.config) if args.config else _default_config(args)
    return base.with_overrides(seed=args.seed, out=args.out)


def _default_config(args: argparse.Namespace) -> RunConfig:
    if args.seed is None:
        raise ConfigValidationError("[run] seed: missing; pass --config or --seed")
    return RunConfig()


def load_panel(config: RunConfig) -> PanelData:
    d = config.data
    if d.synthetic:
        return synth_market(d.synth_assets, d.synth_days, list(d.synth_drift), list(d.synth_volatility), d.synth_seed)
    return load_ohlcv(d.csv)


def build_dataset(config: RunConfig, panel: PanelData | None = None, fraction: float | None = None) -> Dataset:
    panel = load_panel(config) if panel is None else panel
    d = config.data
    if d.has_ranges:
        train_range, test_range = (d.train_start, d.train_end), (d.test_start, d.test_end)
    else:
        if not 0 < d.train_days < panel.n_days:
            raise ConfigValidationError(f"[data] train_days: {d.train_days} must lie inside the {panel.n_days}-day panel")
        train_range, test_range = split_dates(panel, d.train_days)
    frac = d.outlier_fraction if fraction is None else fraction
    return prepare_dataset(panel, train_range, test_range, config.indicators, config.env.window, frac,
                           d.outlier_factors, d.outlier_seed)


def _date_ranges(config: RunConfig, panel: PanelData):
    d = config.data
    if d.has_ranges:
        return (d.train_start, d.train_end), (d.test_start, d.test_end)
    return split_dates(panel, d.train_days)


def _outdir(config: RunConfig) -> Path:
    out = config.out
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(f"cannot create output directory {out}: {exc.strerror}", EXIT_IO) from None
    return out


def _write_svg(path: Path, series: dict, title: str) -> None:
    path.write_text(svg_lines(series, title), encoding="utf-8")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_ingest(args: argparse.Namespace) -> int:
    path = Path(args.csv) if args.csv else None
    if path is None:
        config = resolve_config(args)
        if config.data.synthetic:
            raise ConfigValidationError("[data] csv: ingest needs a CSV path (argument or config)")
        path = Path(config.data.csv)
        out = config.out
    else:
        out = Path(args.out or ".")
    if not path.is_file():
        raise CommandError(f"input file not found: {path}", EXIT_IO)
    panel = load_ohlcv(path)
    aligned, dropped = align(panel)
    for t in dropped:
        print(f"warning: dropped {t} (incomplete history)", file=sys.stderr)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(f"cannot create output directory {out}: {exc.strerror}", EXIT_IO) from None
    write_ohlcv(aligned, out / PANEL_CACHE)
    print(f"{aligned.n_assets} tickers, {aligned.n_days} days ({aligned.dates[0]} .. {aligned.dates[-1]})")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out = _outdir(config)
    (out / RESOLVED).write_text(dump_config(config), encoding="utf-8")
    dataset = build_dataset(config)
    policy = make_policy(dataset, config.attention, config.model.variant, config.seed)
    env = PortfolioEnv(dataset.train, config.env)
    extra = {"tickers": list(dataset.tickers), "seed": config.seed}
    try:
        policy, log = train(env, policy, config.ppo)
    except TrainingDiverged as exc:
        exc.log.write_csv(out / TRAINING_LOG)
        save_checkpoint(exc.policy, out / CHECKPOINT, extra)
        raise CommandError(str(exc), EXIT_DIVERGED) from None
    log.write_csv(out / TRAINING_LOG)
    save_checkpoint(policy, out / CHECKPOINT, extra)
    print(f"trained {config.ppo.total_steps} steps; wrote {out / CHECKPOINT} and {out / TRAINING_LOG}")
    return EXIT_OK


def cmd_backtest(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out = _outdir(config)
    dataset = build_dataset(config)
    strategies = []
    if args.checkpoint:
        ckpt = Path(args.checkpoint)
        if not ckpt.is_file():
            raise CommandError(f"checkpoint not found: {ckpt}", EXIT_IO)
        policy, extra = load_checkpoint(ckpt)
        tickers = extra.get("tickers")
        if tickers is not None and tuple(tickers) != dataset.tickers:
            raise ContractError(f"checkpoint trades {tickers}, panel has {list(dataset.tickers)}")
        if policy.config.n_features != dataset.test.n_features + 2:
            raise ContractError("checkpoint feature count does not match the configured indicators")
        strategies.append(PolicyStrategy(policy))
    kinds = args.baseline or ([] if args.checkpoint else list(config.backtest.baselines))
    strategies += [BaselineStrategy(k) for k in kinds]
    curves = {}

    def emit(res):
        write_equity_curve(res.curve, out / f"equity_{res.name}.csv")
        write_weight_log(res, out / f"weights_{res.name}.csv")
        curves[res.name] = res.curve.ratios
        if args.plot:
            _write_svg(out / f"equity_{res.name}.svg", {res.name: res.curve.ratios}, f"{res.name} equity")

    rows = backtest_all(strategies, dataset.test, config.env, config.metrics, "test", emit)
    write_metrics_table(rows, out / "metrics.csv")
    if args.plot and len(curves) > 1:
        _write_svg(out / "equity_all.svg", curves, "equity curves")
    for r in rows:
        print(f"{r['strategy']:>16s}  cum_return {r['cum_return']:+.4f}  sharpe {r['sharpe']:.3f}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out = _outdir(config)
    (out / RESOLVED).write_text(dump_config(config), encoding="utf-8")
    panel = load_panel(config)
    train_range, test_range = _date_ranges(config, panel)
    ab = config.ablation
    result = ablation_report(panel, train_range, test_range, config.indicators, config.env, config.attention,
                             config.ppo, ab.variants, ab.seeds, ab.fractions, config.data.outlier_factors,
                             config.run.eval_every or config.ppo.total_steps or None, config.metrics, config.data.outlier_seed)
    write_ablation_table(result, out / "ablation.csv")
    write_convergence(result, out / "convergence.csv")
    for r in result.runs:
        arm = out / "arms" / f"{r.variant}_seed{r.seed}_frac{r.fraction!r}"
        arm.mkdir(parents=True, exist_ok=True)
        r.log.write_csv(arm / TRAINING_LOG)
        if r.policy is not None:
            save_checkpoint(r.policy, arm / CHECKPOINT, {"tickers": list(result.datasets[r.fraction].tickers)})
    if args.plot:
        series = {f"{r.variant} s{r.seed} f{r.fraction!r}": [c for _, c in r.curve] for r in result.runs if r.curve}
        if series:
            _write_svg(out / "convergence.svg", series, "test cumulative return vs steps")
    ok = sum(r.ok for r in result.runs)
    print(f"{ok}/{len(result.runs)} arms finished; wrote {out / 'ablation.csv'}")
    if ok == 0:
        raise CommandError("every ablation arm diverged", EXIT_DIVERGED)
    return EXIT_OK


SUMMARY_COLUMNS = ("variant", "outlier_fraction", "arms_ok", "mean_cum_return", "mean_sharpe",
                   "mean_omega", "mean_sortino", "degradation")


def summarize_ablation(path: Path) -> list[dict]:
    """Mean metrics per (variant, fraction); degradation is relative to the same variant's clean arm."""
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    groups: dict[tuple[str, float], list[dict]] = {}
    for r in rows:
        groups.setdefault((r["variant"], float(r["outlier_fraction"])), []).append(r)
    out = []
    for (variant, frac), rs in groups.items():
        ok = [r for r in rs if r["status"] == "ok"]
        mean = {k: float(np.mean([float(r[k]) for r in ok])) if ok else math.nan
                for k in ("cum_return", "sharpe", "omega", "sortino")}
        out.append({"variant": variant, "outlier_fraction": frac, "arms_ok": len(ok),
                    **{f"mean_{k}": v for k, v in mean.items()}})
    clean = {r["variant"]: r["mean_cum_return"] for r in out if r["outlier_fraction"] == 0.0}
    for r in out:
        base = clean.get(r["variant"], math.nan)
        r["degradation"] = (base - r["mean_cum_return"]) / abs(base) if base and np.isfinite(base) else math.nan
    return out


def cmd_report(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out = config.out
    ablation, metrics = out / "ablation.csv", out / "metrics.csv"
    if not ablation.is_file() and not metrics.is_file():
        raise CommandError(f"no ablation.csv or metrics.csv under {out}; run ablate or backtest first", EXIT_IO)
    lines = []
    if ablation.is_file():
        summary = summarize_ablation(ablation)
        with (out / "ablation_summary.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SUMMARY_COLUMNS)
            for r in summary:
                w.writerow([r["variant"], repr(r["outlier_fraction"]), r["arms_ok"]]
                           + [repr(float(r[c])) for c in SUMMARY_COLUMNS[3:]])
        lines.append("| variant | outlier fraction | arms ok | mean cum return | degradation |")
        lines.append("|---|---|---|---|---|")
        lines += [f"| {r['variant']} | {r['outlier_fraction']:g} | {r['arms_ok']} | {r['mean_cum_return']:.4f} "
                  f"| {r['degradation']:.4f} |" for r in summary]
        lines.append("")
    if metrics.is_file():
        lines.append("| strategy | cum return | sharpe | omega | sortino |")
        lines.append("|---|---|---|---|---|")
        lines += [f"| {r['strategy']} | {r['cum_return']:.4f} | {r['sharpe']:.3f} | {r['omega']:.3f} "
                  f"| {r['sortino']:.3f} |" for r in read_metrics_table(metrics)]
        lines.append("")
    (out / "report.md").write_text("\n".join(lines), encoding="utf-8")
    if args.plot and metrics.is_file():
        curves = {}
        for f in sorted(out.glob("equity_*.csv")):
            with f.open(newline="", encoding="utf-8") as fh:
                curves[f.stem[len("equity_"):]] = [float(r["value_ratio"]) for r in csv.DictReader(fh)]
        if curves:
            _write_svg(out / "report_equity.svg", curves, "equity curves")
    print("\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies default to SUPPRESS so they never clobber flags given before the subcommand
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration", **kw)
    common.add_argument("--seed", type=int, help="overrides [run] seed", **kw)
    common.add_argument("--out", help="overrides [run] out directory", **kw)
    common.add_argument("--plot", action="store_true", help="also write SVG charts", **kw)
    common.add_argument("-v", "--verbose", action="store_true", **kw)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="migt", description=__doc__.splitlines()[0],
                                     parents=[_global_flags(suppress=False)])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("ingest", parents=[common], help="validate an OHLCV CSV and cache the aligned panel")
    p.add_argument("csv", nargs="?", help="long-format CSV (defaults to [data] csv)")
    p.set_defaults(func=cmd_ingest)
    p = sub.add_parser("train", parents=[common], help="train one policy")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("backtest", parents=[common], help="backtest a checkpoint and/or baselines on the test range")
    p.add_argument("--checkpoint", help="policy checkpoint file")
    p.add_argument("--baseline", action="append", choices=("best", "equal_weight", "buy_and_hold", "all_cash"),
                   help="baseline to run (repeatable)")
    p.set_defaults(func=cmd_backtest)
    p = sub.add_parser("ablate", parents=[common], help="train every variant x seed x outlier-fraction arm")
    p.set_defaults(func=cmd_ablate)
    p = sub.add_parser("report", parents=[common], help="summarise ablation and metrics tables")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigValidationError, ConfigError, DataError, IndicatorError, ContractError, CheckpointError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
