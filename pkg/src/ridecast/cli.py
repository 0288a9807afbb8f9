"""Command-line entry point: ``ridecast <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import (
    GridSpec,
    Standardizer,
    correlation_profile,
    ingest,
    load_dataset,
    read_orders_csv,
    read_weather_csv,
    save_dataset,
    synthesize,
    synthetic_orders,
    weather_frame,
)
from .evaluate import compare, comparison_table, export_heatmap
from .fclnet import FclNet, FclNetConfig, train
from .forest import ForestConfig, select_features
from .pipeline import RunConfig, StageError, apply_override, load_config, run, run_importance


def _grid(args) -> GridSpec:
    return GridSpec(I=args.rows, J=args.cols)


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise ValueError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_simulate(args) -> None:
    ds = synthesize(_grid(args), args.periods, args.seed, args.scenario, args.split)
    save_dataset(args.out, ds)
    if args.orders_csv:
        synthetic_orders(ds, args.seed).to_csv(args.orders_csv, index=False)
    if args.weather_csv:
        weather_frame(ds).to_csv(args.weather_csv, index=False)
    print(f"wrote {len(ds)} buckets on a {ds.shape[0]}x{ds.shape[1]} grid to {args.out}")


def cmd_ingest(args) -> None:
    ds = ingest(read_orders_csv(args.orders), read_weather_csv(args.weather), _grid(args), args.split)
    save_dataset(args.out, ds)
    print(json.dumps(ds.meta.get("demand_report", {})))


def cmd_correlate(args) -> None:
    ds = load_dataset(args.dataset)
    other = ds.demand if args.variable == "d" else ds.ttr
    text = correlation_profile(ds.demand, other, args.max_lag).to_csv()
    _emit(text, args.out)


def cmd_importance(args) -> None:
    ds = load_dataset(args.dataset)
    cfg = RunConfig(forest=ForestConfig(n_trees=args.trees), importance_window=args.window, seed=args.seed)
    report = run_importance(ds, cfg)
    _emit(report.to_csv(), args.out)
    print(json.dumps(select_features(report, args.threshold, args.coverage)))


def cmd_train(args) -> None:
    ds = load_dataset(args.dataset)
    cfg = FclNetConfig()
    if args.windows:
        windows = {k: int(v) for k, v in (item.split(":") for item in args.windows.split(","))}
        cfg = FclNetConfig.from_windows(windows)
    elif args.demand_only:
        cfg = FclNetConfig.demand_only()
    for k, v in _overrides(args.set).items():
        cfg = apply_override(cfg, k, v)
    model = train(ds, cfg)
    model.save(args.out)
    best = model.log.epochs[model.log.best_epoch - 1] if model.log.epochs else None
    print(f"best epoch {model.log.best_epoch}, validation rmse {best.val_rmse if best else float('nan'):.6f}")


def cmd_evaluate(args) -> None:
    ds = load_dataset(args.dataset)
    targets = np.arange(ds.n_train, len(ds))
    truth = Standardizer.fit(ds).transform(ds)["d"][targets]
    preds = {}
    for path in args.models:
        preds[Path(path).stem] = FclNet.load(path).predict_standardized(ds, targets)
    _emit(comparison_table(compare(preds, truth)), args.out)


def cmd_report(args) -> None:
    ds = load_dataset(args.dataset)
    model = FclNet.load(args.model)
    t = args.time if args.time is not None else int(np.argmax(ds.demand[ds.n_train:].sum(axis=(1, 2)))) + ds.n_train
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_heatmap(ds.demand[t], out / "heatmap_truth")
    export_heatmap(model.predict(ds, t), out / "heatmap_fclnet")
    print(f"heatmaps for bucket {t} ({ds.times[t]}) written to {out}")


def cmd_run(args) -> None:
    cfg = load_config(args.config) if args.config else RunConfig()
    for k, v in _overrides(args.set).items():
        cfg = apply_override(cfg, k, v)
    if args.output:
        cfg = apply_override(cfg, "output_dir", args.output)
    result = run(cfg)
    print(result.table, end="")


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ridecast", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def grid_args(sp):
        sp.add_argument("--rows", type=int, default=7)
        sp.add_argument("--cols", type=int, default=7)
        sp.add_argument("--split", type=float, default=0.7)

    s = sub.add_parser("simulate", help="write a seeded synthetic dataset")
    grid_args(s)
    s.add_argument("--periods", type=int, default=24 * 7 * 8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scenario", default="default")
    s.add_argument("--orders-csv")
    s.add_argument("--weather-csv")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("ingest", help="aggregate order and weather CSVs")
    grid_args(s)
    s.add_argument("--orders", required=True)
    s.add_argument("--weather", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("correlate", help="distance/lag correlation profile")
    s.add_argument("dataset")
    s.add_argument("--variable", choices=("d", "tau"), default="d")
    s.add_argument("--max-lag", type=int, default=4)
    s.add_argument("--out")
    s.set_defaults(func=cmd_correlate)

    s = sub.add_parser("importance", help="spatial forest importance and window selection")
    s.add_argument("dataset")
    s.add_argument("--window", type=int, default=8)
    s.add_argument("--trees", type=int, default=100)
    s.add_argument("--threshold", type=float, default=3.0)
    s.add_argument("--coverage", type=float, default=0.9)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_importance)

    s = sub.add_parser("train", help="train FCL-Net and write a checkpoint")
    s.add_argument("dataset")
    s.add_argument("--demand-only", action="store_true")
    s.add_argument("--windows", help="e.g. d:4,tau:8,h:2,at:2")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="FclNetConfig field override")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="comparison table for checkpoints on the test slice")
    s.add_argument("dataset")
    s.add_argument("models", nargs="+")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="heatmaps of truth and prediction")
    s.add_argument("dataset")
    s.add_argument("model")
    s.add_argument("--time", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("run", help="full pipeline from a run configuration")
    s.add_argument("--config")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--output")
    s.set_defaults(func=cmd_run)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # stage-tag everything else with the subcommand
        print(f"error: [{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
