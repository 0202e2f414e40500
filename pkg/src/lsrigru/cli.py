"""Command-line entry point wiring the full pipeline.

Subcommands: ingest, synth, build-graphs, train, predict, backtest, report,
sweep. Every run writes a manifest listing config, input digests and output
digests. Exit codes: 0 success, 1 validation/usage error, 2 IO error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import pandas as pd

from . import __version__, backtest as bt, marketdata, relgraph, train as tr
from .errors import ArgumentError, LsrigruError
from .train import PanelContext, TrainConfig

logger = logging.getLogger("lsrigru")

SWEEP_AXES = {
    "window": [5, 10, 15, 20, 25],
    "epochs": [1, 2, 3, 4, 5, 6],
    "gat-layers": [1, 2, 3, 4],
    "gru-layers": [1, 2, 3, 4],
}


class _Parser(argparse.ArgumentParser):
    """argparse variant that reports usage problems with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class Manifest:
    """Collects the run record written to <out>/manifest.json."""

    def __init__(self, command: str, out_dir: Path):
        self.command = command
        self.out_dir = out_dir
        self.started = time.perf_counter()
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []
        self.config: dict = {}
        self.seed = None

    def add_input(self, path) -> None:
        self.inputs.append(Path(path))

    def add_output(self, path) -> None:
        self.outputs.append(Path(path))

    def write(self) -> Path:
        record = {
            "tool": "lsrigru",
            "version": __version__,
            "command": self.command,
            "created_utc": datetime.now(timezone.utc).isoformat(),
            "seed": self.seed,
            "config": self.config,
            "inputs": [{"path": str(p), "sha256": _sha256(p)} for p in self.inputs],
            "outputs": [{"path": str(p), "sha256": _sha256(p)} for p in self.outputs],
            "timings": {"total_seconds": time.perf_counter() - self.started},
        }
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / "manifest.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(record, fh, indent=2)
            fh.write("\n")
        return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_range(text: str | None):
    if text is None or text.lower() == "none":
        return None
    try:
        start, end = text.split(":")
    except ValueError as exc:
        raise ArgumentError(f"range must look like 2021-01-04:2021-06-30, got {text!r}") from exc
    return (start.strip(), end.strip())


def _build_train_config(args) -> TrainConfig:
    """Config precedence: CLI flag > config file > built-in default."""
    mapping: dict = {}
    if getattr(args, "config", None):
        mapping.update(tr.load_config_file(args.config))
    flag_keys = ("window", "batch_size", "learning_rate", "epochs", "seed", "ablation",
                 "lookback", "policy", "topk", "gat_sizes", "gru_sizes", "short_mode",
                 "label_horizon")
    for key in flag_keys:
        value = getattr(args, key, None)
        if value is not None:
            mapping[key] = value
    for key in ("train_range", "valid_range", "test_range"):
        value = getattr(args, key, None)
        if value is not None:
            mapping[key] = _parse_range(value)
    return TrainConfig.from_mapping(mapping)


def _config_snapshot(config: TrainConfig) -> dict:
    return tr.parse_config_text(config.to_text())


# -- subcommands -------------------------------------------------------------


def cmd_synth(args) -> int:
    out = _out_dir(args)
    manifest = Manifest("synth", out)
    panel, universe = marketdata.synth_universe(
        args.stocks, args.industries, args.secondaries, args.days, args.seed)
    panel_path = out / "panel.csv"
    marketdata.write_panel_csv(panel, panel_path)
    manifest.add_output(panel_path)
    manifest.seed = args.seed
    manifest.config = {"stocks": args.stocks, "industries": args.industries,
                       "secondaries": args.secondaries, "days": args.days}
    manifest.write()
    logger.info("wrote %s (%d stocks, %d industry nodes)", panel_path,
                universe.num_stocks, universe.num_nodes - universe.num_stocks)
    return 0


def cmd_ingest(args) -> int:
    out = _out_dir(args)
    manifest = Manifest("ingest", out)
    manifest.add_input(args.input)
    schema = {}
    if args.schema:
        for pair in args.schema.split(","):
            field, _, column = pair.partition("=")
            if not column:
                raise ArgumentError(f"schema entries look like field=column, got {pair!r}")
            schema[field.strip()] = column.strip()
    panel = marketdata.ingest_csv(args.input, schema or None)
    panel_path = out / "panel.csv"
    marketdata.write_panel_csv(panel, panel_path)
    manifest.add_output(panel_path)
    manifest.config = {"schema": schema}
    manifest.write()
    return 0


def cmd_build_graphs(args) -> int:
    out = _out_dir(args)
    manifest = Manifest("build-graphs", out)
    manifest.add_input(args.panel)
    panel = marketdata.ingest_csv(args.panel)
    universe = marketdata.Universe.from_panel(panel)
    dates, opens, present = marketdata.node_open_panel(panel, universe, args.short_mode)
    as_of = pd.Timestamp(args.as_of) if args.as_of else pd.Timestamp(dates[-1])

    long_matrix = relgraph.build_long_matrix(universe)
    short_matrix = relgraph.build_short_matrix(dates, opens, present, as_of, args.lookback)
    relgraph.parse_policy(args.policy)

    nodes_path = out / "nodes.csv"
    pd.DataFrame({"index": range(universe.num_nodes),
                  "name": universe.node_names,
                  "kind": [universe.node_kind(i) for i in range(universe.num_nodes)]}
                 ).to_csv(nodes_path, index=False)
    written = [nodes_path]
    for matrix, stem in ((long_matrix, "long"), (short_matrix, "short")):
        dense_path = out / f"{stem}_matrix.csv"
        matrix.to_dense_frame(universe).to_csv(dense_path, index_label="node")
        triples_path = out / f"{stem}_edges.csv"
        matrix.to_triples().to_csv(triples_path, index=False)
        written += [dense_path, triples_path]
    for path in written:
        manifest.add_output(path)
    manifest.config = {"policy": args.policy, "lookback": args.lookback,
                       "as_of": as_of.strftime("%Y-%m-%d"), "short_mode": args.short_mode}
    manifest.write()
    return 0


def _prepare(panel_path, config: TrainConfig):
    panel = marketdata.ingest_csv(panel_path)
    config = tr.resolve_ranges(config, marketdata.panel_dates(panel))
    ctx = PanelContext(panel, config)
    sample_sets = tr.split_chronological(ctx, config.train_range, config.valid_range,
                                         config.test_range)
    return ctx, config, sample_sets


def cmd_train(args) -> int:
    out = _out_dir(args)
    manifest = Manifest("train", out)
    manifest.add_input(args.panel)
    config = _build_train_config(args)
    ctx, config, (train_s, valid_s, _) = _prepare(args.panel, config)
    params, loss_log, rng = tr.train_epochs(config, train_s, ctx, valid_s or None)

    ckpt_path = out / "checkpoint.bin"
    tr.save_checkpoint(ckpt_path, params, config, rng)
    log_path = out / "loss_log.csv"
    pd.DataFrame(loss_log).to_csv(log_path, index=False)
    features_path = out / "features.csv"
    ctx.features.to_csv(features_path)
    for path in (ckpt_path, log_path, features_path):
        manifest.add_output(path)
    if args.plot:
        from .plotting import render_loss_figure

        fig_path = out / "loss_curve.png"
        render_loss_figure(loss_log, fig_path)
        manifest.add_output(fig_path)
    manifest.seed = config.seed
    manifest.config = _config_snapshot(config)
    manifest.write()
    logger.info("trained %d epochs on %d samples, final loss %.6f",
                config.epochs, len(train_s), loss_log[-1]["train_loss"])
    return 0


def cmd_predict(args) -> int:
    out = _out_dir(args)
    manifest = Manifest("predict", out)
    manifest.add_input(args.checkpoint)
    manifest.add_input(args.panel)
    params, config, _ = tr.load_checkpoint(args.checkpoint)
    ctx, config, sample_sets = _prepare(args.panel, config)
    split_index = {"train": 0, "valid": 1, "test": 2}[args.split]
    samples = sample_sets[split_index]
    if not samples:
        raise ArgumentError(f"no samples in the {args.split} split")
    scores = tr.score_samples(params, samples, ctx)
    scores_path = out / "scores.csv"
    scores.to_csv(scores_path, index=False)
    manifest.add_output(scores_path)
    manifest.seed = config.seed
    manifest.config = _config_snapshot(config)
    manifest.write()
    logger.info("scored %d samples into %s", len(scores), scores_path)
    return 0


def _load_benchmark(path) -> pd.Series:
    frame = pd.read_csv(path)
    for col in ("date", "return"):
        if col not in frame.columns:
            raise ArgumentError(f"benchmark CSV missing column {col!r}")
    return pd.Series(frame["return"].to_numpy(dtype=float),
                     index=pd.to_datetime(frame["date"]))


def cmd_backtest(args) -> int:
    out = _out_dir(args)
    manifest = Manifest("backtest", out)
    manifest.add_input(args.scores)
    manifest.add_input(args.prices)
    scores = pd.read_csv(args.scores)
    prices = marketdata.ingest_csv(args.prices)
    benchmark = None
    if args.benchmark:
        manifest.add_input(args.benchmark)
        benchmark = _load_benchmark(args.benchmark)
    ledger = bt.run_bhs(scores, prices, args.topk, benchmark)
    metrics = bt.compute_metrics(ledger)
    ledger_path = out / "ledger.csv"
    ledger.to_frame().to_csv(ledger_path, index=False)
    paths = bt.report(ledger, metrics, out, plot=args.plot)
    for path in [ledger_path] + paths:
        manifest.add_output(path)
    manifest.config = {"topk": args.topk, "plot": args.plot}
    manifest.write()
    logger.info("backtest over %d days: ARR=%.4f ASR=%.4f", len(ledger.days),
                metrics.ARR, metrics.ASR)
    return 0


def cmd_report(args) -> int:
    out = _out_dir(args)
    manifest = Manifest("report", out)
    manifest.add_input(args.ledger)
    ledger = bt.BacktestLedger.from_frame(pd.read_csv(args.ledger))
    metrics = bt.compute_metrics(ledger)
    paths = bt.report(ledger, metrics, out, plot=args.plot)
    for path in paths:
        manifest.add_output(path)
    manifest.config = {"plot": args.plot}
    manifest.write()
    return 0


def _sweep_config(base: TrainConfig, axis: str, value: int) -> TrainConfig:
    from dataclasses import replace

    if axis == "window":
        return replace(base, window=value)
    if axis == "epochs":
        return replace(base, epochs=value)
    if axis == "gat-layers":
        return replace(base, gat_sizes=(30,) * (value - 1) + (15,))
    if axis == "gru-layers":
        return replace(base, gru_sizes=(15,) * (value - 1) + (10,))
    raise ArgumentError(f"unknown sweep axis {axis!r}")


def cmd_sweep(args) -> int:
    out = _out_dir(args)
    manifest = Manifest("sweep", out)
    manifest.add_input(args.panel)
    base = _build_train_config(args)
    rows = []
    for value in SWEEP_AXES[args.axis]:
        started = time.perf_counter()
        config = _sweep_config(base, args.axis, value)
        ctx, config, (train_s, _, test_s) = _prepare(args.panel, config)
        if not train_s or not test_s:
            raise ArgumentError(
                f"{args.axis}={value}: empty train or test sample set, panel too short")
        params, loss_log, _ = tr.train_epochs(config, train_s, ctx)
        scores = tr.score_samples(params, test_s, ctx)
        panel = ctx.panel
        ledger = bt.run_bhs(scores, panel, config.topk)
        metrics = bt.compute_metrics(ledger)
        rows.append({"axis": args.axis, "value": value,
                     **metrics.as_dict(),
                     "final_train_loss": loss_log[-1]["train_loss"],
                     "seconds": time.perf_counter() - started})
        logger.info("sweep %s=%s: ARR=%.4f", args.axis, value, metrics.ARR)
    results_path = out / "sweep_results.csv"
    pd.DataFrame(rows).to_csv(results_path, index=False)
    manifest.add_output(results_path)
    manifest.seed = base.seed
    manifest.config = {**_config_snapshot(base), "axis": args.axis}
    manifest.write()
    return 0


# -- parser ------------------------------------------------------------------


def _add_train_flags(sub) -> None:
    sub.add_argument("--config", help="flat key = value config file")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--window", type=int)
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--batch-size", dest="batch_size", type=int)
    sub.add_argument("--learning-rate", dest="learning_rate", type=float)
    sub.add_argument("--lookback", type=int)
    sub.add_argument("--policy", help="short-graph sparsification: topk:K or threshold:T")
    sub.add_argument("--ablation", choices=tr.ABLATION_MODES)
    sub.add_argument("--topk", type=int, help="portfolio size for the trading loop")
    sub.add_argument("--gat-sizes", dest="gat_sizes")
    sub.add_argument("--gru-sizes", dest="gru_sizes")
    sub.add_argument("--short-mode", dest="short_mode", choices=["opens", "gaps"])
    sub.add_argument("--label-horizon", dest="label_horizon", type=int)
    sub.add_argument("--train-range", dest="train_range", help="start:end dates")
    sub.add_argument("--valid-range", dest="valid_range", help="start:end dates")
    sub.add_argument("--test-range", dest="test_range", help="start:end dates")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lsrigru",
                     description="Relationship-graph stock trend model: data, "
                                 "graphs, training, scoring and backtesting.")
    parser.add_argument("--version", action="version", version=f"lsrigru {__version__}")
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = subs.add_parser("synth", help="generate a synthetic desk-scale panel")
    p.add_argument("--stocks", type=int, default=12)
    p.add_argument("--industries", type=int, default=2)
    p.add_argument("--secondaries", type=int, default=4)
    p.add_argument("--days", type=int, default=120)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("ingest", help="validate a bar CSV into a canonical panel")
    p.add_argument("--input", required=True)
    p.add_argument("--schema", help="comma list of field=column renames")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = subs.add_parser("build-graphs", help="export relationship matrices and edge lists")
    p.add_argument("--panel", required=True)
    p.add_argument("--policy", default=relgraph.DEFAULT_POLICY)
    p.add_argument("--lookback", type=int, default=relgraph.DEFAULT_LOOKBACK)
    p.add_argument("--as-of", dest="as_of", help="short-matrix date, default last panel day")
    p.add_argument("--short-mode", dest="short_mode", choices=["opens", "gaps"],
                   default="opens")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_graphs)

    p = subs.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--panel", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", action="store_true", help="also render the loss curve")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("predict", help="score a split with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--panel", required=True)
    p.add_argument("--split", choices=["train", "valid", "test"], default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = subs.add_parser("backtest", help="run the buy-hold-sell simulation over scores")
    p.add_argument("--scores", required=True)
    p.add_argument("--prices", required=True)
    p.add_argument("--topk", type=int, default=10)
    p.add_argument("--benchmark", help="CSV with date,return columns")
    p.add_argument("--plot", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_backtest)

    p = subs.add_parser("report", help="regenerate report files from a saved ledger")
    p.add_argument("--ledger", required=True)
    p.add_argument("--plot", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = subs.add_parser("sweep", help="sensitivity sweep over one hyperparameter axis")
    p.add_argument("--panel", required=True)
    p.add_argument("--axis", choices=sorted(SWEEP_AXES), required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def _configure_logging() -> None:
    level = os.environ.get("LSRIGRU_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except LsrigruError as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        logger.error("io error: %s", exc)
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
