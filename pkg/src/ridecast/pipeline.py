"""End-to-end runs: data, correlation, importance, training, baselines,
evaluation and reports, driven by one key=value run configuration."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import logging
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .baselines import Arima, CellLstm, FeedForward, HistoricalAverage, MovingAverage, NeuralConfig
from .data import (
    Dataset,
    GridSpec,
    Standardizer,
    correlation_profile,
    ingest,
    load_dataset,
    read_orders_csv,
    read_weather_csv,
    save_dataset,
    synthesize,
)
from .evaluate import compare, comparison_table, export_heatmap
from .fclnet import FclNet, FclNetConfig, input_dimension, train
from .forest import (
    CATEGORIES,
    ForestConfig,
    ImportanceReport,
    aggregate_importance,
    count_feature_dimension,
    fit_spatial,
    select_features,
)

logger = logging.getLogger(__name__)

BASELINES = ("HA", "MA", "ARIMA", "ANN", "LSTM")
HEADLINE = ("Conv-LSTM (demand only)", "FCL-Net (full)", "FCL-Net (selected)")
SEED_STREAMS = ("data", "forest", "conv_lstm", "fclnet_full", "fclnet_selected", "ann", "lstm", "orders")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    orders_path: str = ""
    weather_path: str = ""
    scenario: str = "default"
    periods: int = 24 * 7 * 8
    split_fraction: float = 0.7
    fclnet: FclNetConfig = field(default_factory=FclNetConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)
    importance_window: int = 8
    select_threshold: float = 3.0
    select_coverage: float = 0.9
    selected_windows: dict[str, int] = field(default_factory=dict)
    baselines: tuple[str, ...] = BASELINES
    neural: NeuralConfig = field(default_factory=NeuralConfig)
    arima_order: tuple[int, int, int] = (2, 1, 1)
    ma_window: int = 8
    correlation_lags: int = 4
    output_dir: str = "run"
    seed: int = 0

    def __post_init__(self):
        self.baselines = tuple(self.baselines)
        unknown = set(self.baselines) - set(BASELINES)
        if unknown:
            raise ValueError(f"unknown baselines {sorted(unknown)}")
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must lie in (0, 1)")
        if set(self.selected_windows) - set(CATEGORIES):
            raise ValueError("selected_windows has unknown categories")

    def seeds(self) -> dict[str, int]:
        """Every stage seed, derived from the master seed."""
        ss = np.random.SeedSequence(self.seed)
        return {name: int(child.generate_state(1)[0]) for name, child in zip(SEED_STREAMS, ss.spawn(len(SEED_STREAMS)))}

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["baselines"] = list(self.baselines)
        d["arima_order"] = list(self.arima_order)
        d["fclnet"] = self.fclnet.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d["grid"] = GridSpec(**d.get("grid", {}))
        d["fclnet"] = FclNetConfig.from_dict(d.get("fclnet", {}))
        d["forest"] = ForestConfig(**d.get("forest", {}))
        d["neural"] = NeuralConfig(**d.get("neural", {}))
        if "arima_order" in d:
            d["arima_order"] = tuple(d["arima_order"])
        return cls(**d)


# -- config file -------------------------------------------------------------------


def _coerce(value: str, current: Any, ftype: Any):
    kind = current if current is not None else ftype
    if isinstance(kind, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(kind, int):
        return int(value)
    if isinstance(kind, float):
        return float(value)
    if isinstance(kind, tuple):
        items = [v.strip() for v in value.split(",") if v.strip()]
        if kind and isinstance(kind[0], int):
            return tuple(int(v) for v in items)
        return tuple(items)
    if isinstance(kind, dict):
        out = {}
        for item in value.split(","):
            if item.strip():
                k, v = item.split(":")
                out[k.strip()] = int(v)
        return out
    return value


def apply_override(obj, key: str, value: str):
    """Set dotted ``key`` on a (possibly nested) dataclass, returning the new object."""
    head, _, rest = key.partition(".")
    names = {f.name: f for f in dataclasses.fields(obj)}
    if head not in names:
        raise KeyError(f"unknown config key {key!r}")
    current = getattr(obj, head)
    if rest:
        if not dataclasses.is_dataclass(current):
            raise KeyError(f"{head!r} has no sub-keys")
        new = apply_override(current, rest, value)
    else:
        if dataclasses.is_dataclass(current):
            raise KeyError(f"{key!r} needs a sub-key")
        new = _coerce(value, current, names[head].type)
    return dataclasses.replace(obj, **{head: new})


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines (``#`` comments, dotted keys for nested
    settings such as ``fclnet.max_epochs``)."""
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=("#",))
    cp.optionxform = str
    cp.read_string("[run]\n" + text)
    cfg = base or RunConfig()
    for key, value in cp["run"].items():
        cfg = apply_override(cfg, key, value)
    return cfg


def load_config(path, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = parse_config(Path(path).read_text())
    for k, v in (overrides or {}).items():
        cfg = apply_override(cfg, k, v)
    return cfg


# -- stages ------------------------------------------------------------------------


def _hash(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p if isinstance(p, bytes) else json.dumps(p, sort_keys=True, default=str).encode())
    return h.hexdigest()[:16]


def load_data(cfg: RunConfig, cache_dir: Path | None = None) -> Dataset:
    """Synthesize or ingest the dataset, reusing a content-addressed cache."""
    seeds = cfg.seeds()
    if bool(cfg.orders_path) != bool(cfg.weather_path):
        raise ValueError("orders_path and weather_path must be given together")
    if cfg.orders_path:
        key = _hash(Path(cfg.orders_path).read_bytes(), Path(cfg.weather_path).read_bytes(),
                    cfg.grid.to_dict(), cfg.split_fraction, __version__)
    else:
        key = _hash(cfg.scenario, cfg.periods, seeds["data"], cfg.grid.to_dict(), cfg.split_fraction, __version__)
    path = cache_dir / f"dataset-{key}.npz" if cache_dir else None
    if path is not None and path.exists():
        logger.info("dataset cache hit %s", path.name)
        return load_dataset(path)
    if cfg.orders_path:
        ds = ingest(read_orders_csv(cfg.orders_path), read_weather_csv(cfg.weather_path), cfg.grid,
                    cfg.split_fraction)
    else:
        ds = synthesize(cfg.grid, cfg.periods, seeds["data"], cfg.scenario, cfg.split_fraction)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_dataset(path, ds)
    return ds


def run_correlation(ds: Dataset, max_lag: int = 4) -> dict[str, str]:
    return {
        "demand": correlation_profile(ds.demand, ds.demand, max_lag).to_csv(),
        "ttr": correlation_profile(ds.demand, ds.ttr, max_lag).to_csv(),
    }


def run_importance(ds: Dataset, cfg: RunConfig) -> ImportanceReport:
    """Spatial forests on the standardized training slice."""
    scaler = Standardizer.fit(ds)
    variables = {k: v[:ds.n_train] for k, v in scaler.transform(ds).items()}
    forest_cfg = dataclasses.replace(cfg.forest, seed=cfg.seeds()["forest"])
    sf = fit_spatial(variables, cfg.importance_window, forest_cfg)
    return aggregate_importance(sf)


def headline_configs(cfg: RunConfig, windows: dict[str, int]) -> dict[str, FclNetConfig]:
    """The three headline models: demand-only conv-LSTM, full and selected FCL-Net."""
    seeds = cfg.seeds()
    base = cfg.fclnet
    shared = {f.name: getattr(base, f.name) for f in dataclasses.fields(base)
              if f.name in ("L_d", "L_tau", "L_e", "L_a", "conv_channels", "lstm_units", "kernel_size",
                            "alpha", "batch_size", "learning_rate", "max_epochs", "patience",
                            "val_fraction")}
    return {
        HEADLINE[0]: FclNetConfig.demand_only(K_d=base.K_d, seed=seeds["conv_lstm"], **shared),
        HEADLINE[1]: dataclasses.replace(base, seed=seeds["fclnet_full"]),
        HEADLINE[2]: FclNetConfig.from_windows(windows, seed=seeds["fclnet_selected"], **shared),
    }


def fit_baselines(ds: Dataset, cfg: RunConfig) -> dict[str, Any]:
    seeds = cfg.seeds()
    make: dict[str, Callable[[], Any]] = {
        "HA": HistoricalAverage,
        "MA": lambda: MovingAverage(cfg.ma_window),
        "ARIMA": lambda: Arima(cfg.arima_order),
        "ANN": lambda: FeedForward(dataclasses.replace(cfg.neural, seed=seeds["ann"])),
        "LSTM": lambda: CellLstm(dataclasses.replace(cfg.neural, seed=seeds["lstm"])),
    }
    return {name: make[name]().fit(ds) for name in BASELINES if name in cfg.baselines}


def evaluation_targets(ds: Dataset) -> np.ndarray:
    return np.arange(ds.n_train, len(ds))


# -- orchestration -----------------------------------------------------------------


@dataclass
class RunResult:
    output_dir: Path
    table: str
    windows: dict[str, int]
    models: dict[str, FclNet]
    manifest: dict


def _stage(manifest: dict, name: str, fn: Callable[[], Any]):
    t0 = time.perf_counter()
    try:
        out = fn()
    except Exception as exc:
        manifest["stages"].append({"stage": name, "status": "failed", "error": str(exc)})
        raise StageError(name, exc) from exc
    manifest["stages"].append({"stage": name, "status": "ok", "seconds": round(time.perf_counter() - t0, 3)})
    logger.info("stage %s done in %.1fs", name, time.perf_counter() - t0)
    return out


def run(cfg: RunConfig) -> RunResult:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": cfg.to_dict(),
        "seeds": cfg.seeds(),
        "decisions": {
            "metrics_scale": "standardized demand (training-slice min-max)",
            "importance_normalization": "global across all target-cell forests",
            "mae": "mean absolute error",
        },
        "stages": [],
    }
    try:
        ds = _stage(manifest, "data", lambda: load_data(cfg, out / "cache"))
        manifest["data"] = {"buckets": len(ds), "train": ds.n_train, "grid": list(ds.shape), "meta": ds.meta}

        corr = _stage(manifest, "correlate", lambda: run_correlation(ds, cfg.correlation_lags))
        for name, text in corr.items():
            (out / f"correlation_{name}.csv").write_text(text)

        if cfg.selected_windows:
            windows = dict(cfg.selected_windows)
            manifest["importance"] = "skipped; selected_windows given in config"
        else:
            report = _stage(manifest, "importance", lambda: run_importance(ds, cfg))
            (out / "importance.csv").write_text(report.to_csv())
            windows = select_features(report, cfg.select_threshold, cfg.select_coverage)
        manifest["selected_windows"] = windows

        configs = headline_configs(cfg, windows)
        models: dict[str, FclNet] = {}
        dims = {}
        for k, (name, mcfg) in enumerate(configs.items()):
            models[name] = _stage(manifest, f"train:{name}", lambda mcfg=mcfg: train(ds, mcfg))
            models[name].save(out / f"model_{k}.npz")
            dims[name] = input_dimension(mcfg, ds.shape)
        expected = {
            HEADLINE[0]: count_feature_dimension(ds.shape, {"d": cfg.fclnet.K_d}),
            HEADLINE[1]: count_feature_dimension(ds.shape, configs[HEADLINE[1]].effective_windows()),
            HEADLINE[2]: count_feature_dimension(ds.shape, windows),
        }
        if dims != expected:
            raise StageError("train", ValueError(f"input dimensions {dims} != {expected}"))
        manifest["input_dimensions"] = dims
        manifest["training"] = {name: {"best_epoch": m.log.best_epoch, "epochs": len(m.log.epochs)}
                                for name, m in models.items()}

        baselines = _stage(manifest, "baselines", lambda: fit_baselines(ds, cfg))

        def evaluate_all():
            targets = evaluation_targets(ds)
            truth = Standardizer.fit(ds).transform(ds)["d"][targets]
            preds = {name: b.predict(ds, targets) for name, b in baselines.items()}
            preds.update({name: m.predict_standardized(ds, targets) for name, m in models.items()})
            return targets, compare(preds, truth)

        targets, reports = _stage(manifest, "evaluate", evaluate_all)
        table = comparison_table(reports)
        (out / "comparison.csv").write_text(table)

        def heatmaps():
            busiest = int(targets[np.argmax(ds.demand[targets].sum(axis=(1, 2)))])
            export_heatmap(ds.demand[busiest], out / "heatmap_truth")
            export_heatmap(models[HEADLINE[1]].predict(ds, busiest), out / "heatmap_fclnet")
            return str(ds.times[busiest])

        manifest["heatmap_time"] = _stage(manifest, "report", heatmaps)
    finally:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))
    return RunResult(out, table, windows, models, manifest)
