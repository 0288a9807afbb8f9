"""Ride-order ingestion, grid/hour aggregation, calendar features, min-max
scaling, chronological splitting and seeded synthetic datasets."""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

SPATIAL = ("d", "tau")
CALENDAR = ("h", "w")
WEATHER = ("at", "ah", "as", "aw", "av")
CATEGORIES = SPATIAL + CALENDAR + WEATHER

ORDER_COLUMNS = ("request_time", "travel_distance_km", "travel_time_min", "longitude", "latitude")
WEATHER_COLUMNS = ("time", "temperature_c", "humidity_pct", "state_code", "wind_speed", "visibility")

SCENARIOS = ("default", "demand-only", "lagged")


@dataclass(frozen=True)
class GridSpec:
    lon_min: float = 120.00
    lon_max: float = 120.35
    lat_min: float = 30.15
    lat_max: float = 30.45
    I: int = 7
    J: int = 7
    interval_minutes: int = 60

    def __post_init__(self):
        if not self.lon_min < self.lon_max:
            raise ValueError("lon_min must be below lon_max")
        if not self.lat_min < self.lat_max:
            raise ValueError("lat_min must be below lat_max")
        if self.I < 1 or self.J < 1:
            raise ValueError("grid needs at least one row and column")
        if self.interval_minutes < 1:
            raise ValueError("interval must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.I, self.J)

    def cell_index(self, lon, lat) -> tuple[np.ndarray, np.ndarray]:
        """Row (latitude) and column (longitude) of each point, -1 if outside.

        Cells are half-open ``[low, high)`` except the last row/column, which
        also includes the upper edge.
        """
        lon = np.asarray(lon, dtype=float)
        lat = np.asarray(lat, dtype=float)
        i = self._axis_index(lat, self.lat_min, self.lat_max, self.I)
        j = self._axis_index(lon, self.lon_min, self.lon_max, self.J)
        outside = (i < 0) | (j < 0)
        return np.where(outside, -1, i), np.where(outside, -1, j)

    @staticmethod
    def _axis_index(x: np.ndarray, lo: float, hi: float, n: int) -> np.ndarray:
        step = (hi - lo) / n
        idx = np.floor((x - lo) / step).astype(int)
        idx = np.where(x == hi, n - 1, idx)
        # guard against rounding at interior edges: an edge value belongs to the higher cell
        edges = lo + step * np.arange(n + 1)
        idx = np.where((idx < n) & (idx >= 0) & (x >= edges[np.clip(idx + 1, 0, n)]) & (x != hi),
                       idx + 1, idx)
        idx = np.where((idx >= 0) & (idx < n) & (x < edges[np.clip(idx, 0, n)]), idx - 1, idx)
        return np.where((x < lo) | (x > hi) | ~np.isfinite(x), -1, idx)

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass(frozen=True)
class OrderRecord:
    requesting_time: np.datetime64
    travel_distance: float
    travel_time: float
    longitude: float
    latitude: float


@dataclass
class GridSeries:
    """Uniformly spaced timestamps with one I x J matrix per bucket."""

    times: np.ndarray
    values: np.ndarray
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.ndim != 3 or len(self.values) != len(self.times):
            raise ValueError("values must be (T, I, J) aligned with times")
        if len(self.times) > 1:
            steps = np.diff(self.times.astype("datetime64[s]").astype(np.int64))
            if (steps <= 0).any() or (steps != steps[0]).any():
                raise ValueError("timestamps must be strictly increasing and uniformly spaced")

    def __len__(self) -> int:
        return len(self.times)


@dataclass
class ExogenousSeries:
    times: np.ndarray
    h: np.ndarray
    w: np.ndarray
    weather: np.ndarray  # (T, 5): at, ah, as, aw, av

    def __post_init__(self):
        if not np.isin(self.h, (0, 1, 2)).all():
            raise ValueError("time-of-day class must be 0, 1 or 2")
        if not np.isin(self.w, (0, 1)).all():
            raise ValueError("day-of-week flag must be 0 or 1")
        if not np.isin(self.weather[:, 2], (1, 2, 3, 4, 5)).all():
            raise ValueError("weather state must be in 1..5")


# -- time helpers ------------------------------------------------------------


def hour_of_day(times) -> np.ndarray:
    t = np.asarray(times).astype("datetime64[h]").astype(np.int64)
    return t % 24


def day_of_week(timestamp) -> int:
    """1 for Saturday or Sunday, else 0."""
    return int(weekend_flags(np.asarray([timestamp], dtype="datetime64[s]"))[0])


def weekend_flags(times) -> np.ndarray:
    days = np.asarray(times).astype("datetime64[D]").astype(np.int64)
    weekday = (days + 3) % 7  # Monday == 0; the epoch was a Thursday
    return (weekday >= 5).astype(int)


def bucket_times(start, periods: int, interval_minutes: int = 60) -> np.ndarray:
    start = np.datetime64(start, "m")
    return (start + np.arange(periods) * np.timedelta64(interval_minutes, "m")).astype("datetime64[s]")


# -- ingestion ---------------------------------------------------------------


def read_orders_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path)
    missing = set(ORDER_COLUMNS) - set(df.columns)
    if missing:
        raise ValueError(f"orders file lacks columns {sorted(missing)}")
    df["request_time"] = pd.to_datetime(df["request_time"])
    return df


def read_weather_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path)
    missing = set(WEATHER_COLUMNS) - set(df.columns)
    if missing:
        raise ValueError(f"weather file lacks columns {sorted(missing)}")
    df["time"] = pd.to_datetime(df["time"])
    return df


def orders_frame(records: Sequence[OrderRecord]) -> pd.DataFrame:
    return pd.DataFrame({
        "request_time": pd.to_datetime([r.requesting_time for r in records]),
        "travel_distance_km": [r.travel_distance for r in records],
        "travel_time_min": [r.travel_time for r in records],
        "longitude": [r.longitude for r in records],
        "latitude": [r.latitude for r in records],
    })


def _locate(orders: pd.DataFrame, spec: GridSpec, times: np.ndarray | None):
    if isinstance(orders, (list, tuple)):
        orders = orders_frame(orders)
    n_in = len(orders)
    req = orders["request_time"].to_numpy().astype("datetime64[s]")
    dist = orders["travel_distance_km"].to_numpy(dtype=float)
    i, j = spec.cell_index(orders["longitude"].to_numpy(), orders["latitude"].to_numpy())
    step = np.timedelta64(spec.interval_minutes * 60, "s")
    if times is None:
        if n_in == 0:
            return None
        start = req.min().astype("datetime64[h]").astype("datetime64[s]")
        stop = req.max()
        periods = int((stop - start) // step) + 1
        times = start + np.arange(periods) * step
    t = ((req - times[0]) // step).astype(np.int64) if len(times) else np.zeros(0, int)
    bad_distance = ~(dist > 0)
    outside = (i < 0) | (j < 0)
    out_of_range = (t < 0) | (t >= len(times))
    keep = ~(bad_distance | outside | out_of_range)
    report = {
        "orders_in": int(n_in),
        "retained": int(keep.sum()),
        "dropped_nonpositive_distance": int(bad_distance.sum()),
        "dropped_outside_grid": int((outside & ~bad_distance).sum()),
        "dropped_outside_time_range": int((out_of_range & ~outside & ~bad_distance).sum()),
    }
    return orders[keep], t[keep], i[keep], j[keep], times, report


def aggregate_demand(orders, spec: GridSpec, times: np.ndarray | None = None) -> GridSeries:
    """Count requests per (bucket, cell). Out-of-grid and zero-distance orders
    are dropped and counted in ``report``."""
    located = _locate(orders, spec, times)
    if located is None:
        return GridSeries(np.zeros(0, "datetime64[s]"), np.zeros((0, spec.I, spec.J)),
                          {"orders_in": 0, "retained": 0})
    _, t, i, j, times, report = located
    counts = np.zeros((len(times), spec.I, spec.J))
    np.add.at(counts, (t, i, j), 1.0)
    if report["retained"] < report["orders_in"]:
        logger.info("dropped %d of %d orders", report["orders_in"] - report["retained"], report["orders_in"])
    return GridSeries(times, counts, report)


def aggregate_ttr(orders, spec: GridSpec, times: np.ndarray | None = None) -> GridSeries:
    """Mean travel-time rate (min/km) per (bucket, cell).

    Empty cells take the bucket's network-wide mean rate over all its orders;
    a bucket with no orders at all takes the overall mean rate.
    """
    located = _locate(orders, spec, times)
    if located is None:
        return GridSeries(np.zeros(0, "datetime64[s]"), np.zeros((0, spec.I, spec.J)))
    kept, t, i, j, times, report = located
    rate = kept["travel_time_min"].to_numpy(dtype=float) / kept["travel_distance_km"].to_numpy(dtype=float)
    T = len(times)
    sums = np.zeros((T, spec.I, spec.J))
    counts = np.zeros((T, spec.I, spec.J))
    np.add.at(sums, (t, i, j), rate)
    np.add.at(counts, (t, i, j), 1.0)
    bucket_sum = sums.sum(axis=(1, 2))
    bucket_n = counts.sum(axis=(1, 2))
    overall = rate.mean() if len(rate) else 0.0
    bucket_mean = np.where(bucket_n > 0, bucket_sum / np.maximum(bucket_n, 1), overall)
    empty = counts == 0
    values = np.where(empty, bucket_mean[:, None, None], sums / np.maximum(counts, 1))
    report = dict(report, imputed_cells=int(empty.sum()), empty_buckets=int((bucket_n == 0).sum()))
    return GridSeries(times, values, report)


def align_weather(weather: pd.DataFrame, times: np.ndarray, max_fill: int = 3) -> np.ndarray:
    """Join hourly weather rows to bucket times; gaps up to ``max_fill`` hours
    are forward-filled, longer gaps raise."""
    w = weather.copy()
    w["time"] = pd.to_datetime(w["time"]).dt.floor("h")
    w = w.drop_duplicates("time", keep="last").set_index("time").sort_index()
    cols = list(WEATHER_COLUMNS[1:])
    idx = pd.DatetimeIndex(pd.to_datetime(times)).floor("h")
    joined = w.reindex(idx)[cols]
    filled = joined.ffill(limit=max_fill)
    if filled.isna().any().any():
        missing = filled.index[filled.isna().any(axis=1)]
        raise ValueError(f"weather missing for {len(missing)} buckets beyond a {max_fill}-hour fill, "
                         f"first at {missing[0]}")
    out = filled.to_numpy(dtype=float)
    return out


# -- calendar ----------------------------------------------------------------


@dataclass(frozen=True)
class TimeOfDayClasses:
    """Hour -> class (2 peak, 1 off-peak, 0 sleep), separately for weekdays and weekends."""

    weekday: tuple[int, ...]
    weekend: tuple[int, ...]

    def classify(self, times) -> np.ndarray:
        hours = hour_of_day(times)
        wk = weekend_flags(times)
        table = np.array([self.weekday, self.weekend])
        return table[wk, hours]

    def to_dict(self) -> dict:
        return {"weekday": list(self.weekday), "weekend": list(self.weekend)}


def _rank_hours(hours: np.ndarray, totals: np.ndarray) -> tuple[int, ...]:
    present = np.unique(hours)
    if len(present) < 24:
        raise ValueError(f"only {len(present)} distinct hours observed; need all 24")
    means = np.array([totals[hours == h].mean() for h in range(24)])
    # highest mean first; equal means keep the earlier hour first
    order = sorted(range(24), key=lambda h: (-means[h], h))
    classes = [0] * 24
    for rank, h in enumerate(order):
        classes[h] = 2 if rank < 8 else (1 if rank < 16 else 0)
    return tuple(classes)


def classify_time_of_day(times, demand: np.ndarray) -> TimeOfDayClasses:
    """Rank the 24 hours by mean network demand of the supplied (training) slice."""
    times = np.asarray(times)
    totals = np.asarray(demand, dtype=float).reshape(len(times), -1).sum(axis=1)
    hours = hour_of_day(times)
    wk = weekend_flags(times)
    if not (wk == 0).any() or not (wk == 1).any():
        raise ValueError("training slice must contain both weekdays and weekends")
    return TimeOfDayClasses(_rank_hours(hours[wk == 0], totals[wk == 0]),
                            _rank_hours(hours[wk == 1], totals[wk == 1]))


# -- scaling and splitting -----------------------------------------------------


def minmax_standardize(x, bounds: tuple[float, float] | None = None):
    """Map ``x`` affinely so ``bounds`` become (0, 1).

    With ``bounds=None`` they are taken from ``x`` itself (pass the training
    slice). Values outside the bounds are not clipped. A degenerate range maps
    everything to 0.
    """
    x = np.asarray(x, dtype=float)
    if bounds is None:
        bounds = (float(np.min(x)), float(np.max(x)))
    lo, hi = bounds
    if hi == lo:
        return np.zeros_like(x), (lo, hi)
    return (x - lo) / (hi - lo), (lo, hi)


def inverse_minmax(x, bounds: tuple[float, float]) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    lo, hi = bounds
    if hi == lo:
        return np.full_like(x, lo)
    return x * (hi - lo) + lo


def split_index(T: int, fraction: float) -> int:
    if not 0 < fraction < 1:
        raise ValueError("split fraction must lie strictly between 0 and 1")
    n = int(math.floor(fraction * T + 1e-9))
    if n < 1 or n >= T:
        raise ValueError(f"series of length {T} too short to split at {fraction}")
    return n


def chronological_split(series, fraction: float = 0.7):
    """First floor(fraction * T) buckets train, the rest test."""
    if isinstance(series, GridSeries):
        n = split_index(len(series), fraction)
        return (GridSeries(series.times[:n], series.values[:n]),
                GridSeries(series.times[n:], series.values[n:]))
    n = split_index(len(series), fraction)
    return series[:n], series[n:]


# -- assembled dataset ---------------------------------------------------------


@dataclass
class Dataset:
    """Aligned raw variables on a common hourly index plus the train/test cut."""

    times: np.ndarray
    demand: np.ndarray
    ttr: np.ndarray
    weather: np.ndarray
    h: np.ndarray
    w: np.ndarray
    grid: GridSpec
    n_train: int
    time_of_day: TimeOfDayClasses
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.times)

    @property
    def shape(self) -> tuple[int, int]:
        return self.demand.shape[1:]

    def variables(self) -> dict[str, np.ndarray]:
        out = {"d": self.demand, "tau": self.ttr, "h": self.h.astype(float), "w": self.w.astype(float)}
        for k, name in enumerate(WEATHER):
            out[name] = self.weather[:, k]
        return out

    def demand_series(self) -> GridSeries:
        return GridSeries(self.times, self.demand)

    def ttr_series(self) -> GridSeries:
        return GridSeries(self.times, self.ttr)

    def exogenous(self) -> ExogenousSeries:
        return ExogenousSeries(self.times, self.h, self.w, self.weather)


def assemble(times, demand, ttr, weather, grid: GridSpec, train_fraction: float = 0.7,
             meta: dict | None = None) -> Dataset:
    times = np.asarray(times).astype("datetime64[s]")
    demand = np.asarray(demand, dtype=float)
    ttr = np.asarray(ttr, dtype=float)
    weather = np.asarray(weather, dtype=float)
    GridSeries(times, demand)
    if ttr.shape != demand.shape or len(weather) != len(times):
        raise ValueError("demand, ttr and weather must be aligned")
    if (demand < 0).any():
        raise ValueError("demand must be non-negative")
    n_train = split_index(len(times), train_fraction)
    tod = classify_time_of_day(times[:n_train], demand[:n_train])
    return Dataset(times, demand, ttr, weather, tod.classify(times), weekend_flags(times),
                   grid, n_train, tod, dict(meta or {}))


def ingest(orders, weather: pd.DataFrame, spec: GridSpec, train_fraction: float = 0.7) -> Dataset:
    demand = aggregate_demand(orders, spec)
    ttr = aggregate_ttr(orders, spec, demand.times)
    wx = align_weather(weather, demand.times)
    meta = {"source": "orders", "demand_report": demand.report, "ttr_report": ttr.report}
    return assemble(demand.times, demand.values, ttr.values, wx, spec, train_fraction, meta)


class Standardizer:
    """Per-variable min-max bounds fitted on the training slice only."""

    def __init__(self, bounds: dict[str, tuple[float, float]]):
        self.bounds = dict(bounds)

    @classmethod
    def fit(cls, dataset: Dataset) -> "Standardizer":
        n = dataset.n_train
        bounds = {}
        for name, arr in dataset.variables().items():
            train = arr[:n]
            bounds[name] = (float(train.min()), float(train.max()))
        return cls(bounds)

    def transform(self, dataset: Dataset) -> dict[str, np.ndarray]:
        return {name: minmax_standardize(arr, self.bounds[name])[0]
                for name, arr in dataset.variables().items()}

    def scale(self, name: str, x) -> np.ndarray:
        return minmax_standardize(x, self.bounds[name])[0]

    def inverse(self, name: str, x) -> np.ndarray:
        return inverse_minmax(x, self.bounds[name])

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in self.bounds.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls({k: (float(v[0]), float(v[1])) for k, v in d.items()})


def save_dataset(path, ds: Dataset) -> None:
    meta = {
        "grid": ds.grid.to_dict(),
        "n_train": ds.n_train,
        "time_of_day": ds.time_of_day.to_dict(),
        "meta": ds.meta,
    }
    with open(path, "wb") as fh:
        np.savez(fh, times=ds.times.astype("datetime64[s]").astype(np.int64), demand=ds.demand,
                 ttr=ds.ttr, weather=ds.weather, h=ds.h, w=ds.w,
                 meta=np.array(json.dumps(meta, default=str)))


def load_dataset(path) -> Dataset:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        tod = meta["time_of_day"]
        return Dataset(
            times=z["times"].astype("datetime64[s]"),
            demand=z["demand"], ttr=z["ttr"], weather=z["weather"], h=z["h"], w=z["w"],
            grid=GridSpec(**meta["grid"]), n_train=int(meta["n_train"]),
            time_of_day=TimeOfDayClasses(tuple(tod["weekday"]), tuple(tod["weekend"])),
            meta=meta.get("meta", {}),
        )


# -- synthetic data ------------------------------------------------------------


def _smooth(field: np.ndarray, passes: int = 1) -> np.ndarray:
    """3x3 binomial blur over the last two axes with edge replication."""
    out = field
    w = np.array([0.25, 0.5, 0.25])
    for _ in range(passes):
        p = np.pad(out, [(0, 0)] * (out.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
        rows = w[0] * p[..., :-2, :] + w[1] * p[..., 1:-1, :] + w[2] * p[..., 2:, :]
        out = w[0] * rows[..., :-2] + w[1] * rows[..., 1:-1] + w[2] * rows[..., 2:]
    return out


def _standard_field(rng: np.random.Generator, T: int, I: int, J: int, passes: int = 1) -> np.ndarray:
    f = _smooth(rng.standard_normal((T, I, J)), passes)
    # per-cell scaling: edge replication otherwise leaves border cells noisier
    return (f - f.mean(axis=0)) / f.std(axis=0)


def daily_profile(hours: np.ndarray, weekend: np.ndarray) -> np.ndarray:
    """Relative demand by hour: two commuting peaks on weekdays, one broad
    afternoon peak on weekends, lowest around 4 AM."""
    h = np.asarray(hours, dtype=float)
    day = 1.0 / (1.0 + np.exp(-(h - 6.5) * 1.5)) * (1.0 / (1.0 + np.exp((h - 23.0) * 1.2)))
    weekday = 0.15 + 0.55 * day + 1.1 * np.exp(-(h - 8.5) ** 2 / 3.0) + 1.2 * np.exp(-(h - 18.5) ** 2 / 5.0)
    weekend_p = 0.2 + 0.5 * day + 1.1 * np.exp(-(h - 14.5) ** 2 / 14.0)
    return np.where(np.asarray(weekend) == 1, weekend_p, weekday)


def _weather(rng: np.random.Generator, times: np.ndarray) -> np.ndarray:
    T = len(times)
    hours = hour_of_day(times)
    n_days = T // 24 + 2
    daily = np.zeros(n_days)
    for k in range(1, n_days):
        daily[k] = 0.8 * daily[k - 1] + rng.normal(0.0, 2.5)
    day = np.arange(T) // 24
    at = 17.0 + daily[day] + 5.0 * np.sin(2 * np.pi * (hours - 9) / 24.0) + rng.normal(0.0, 0.4, T)

    def ar(scale, rho=0.9):
        x = np.zeros(T)
        for t in range(1, T):
            x[t] = rho * x[t - 1] + rng.normal(0.0, scale)
        return x

    ah = np.clip(65.0 + ar(3.0), 15.0, 100.0)
    aw = np.abs(3.0 + ar(0.6))
    av = np.clip(12.0 + ar(1.0), 0.5, 30.0)
    state = np.empty(T)
    s = 5
    for t in range(T):
        if rng.random() < 0.08:
            s = int(np.clip(s + rng.choice([-1, 1]), 1, 5))
        state[t] = s
    return np.column_stack([at, ah, state, aw, av])


def synthesize(spec: GridSpec, T: int = 24 * 7 * 6, seed: int = 0, scenario: str = "default",
               train_fraction: float = 0.7, start: str = "2015-11-02T00:00",
               peak_demand: float = 40.0) -> Dataset:
    """Seeded synthetic ride-order dataset on ``spec``'s grid.

    Scenarios
    ---------
    default
        Weekday double-peak / weekend single-peak daily profile, a central
        hotspot, a spatially diffusing persistent anomaly, a lagged
        temperature effect, and congestion shocks that raise the travel-time
        rate at t-1 and suppress demand at t. Humidity, weather state, wind
        and visibility are pure noise.
    demand-only
        Demand follows its own spatio-temporal dynamics without a daily
        profile; travel-time rate and weather are independent of demand.
    lagged
        No daily profile or weather effect; demand depends on its own lag
        (persistent anomaly) and on the lag-1 congestion shock seen in the
        travel-time rate.
    """
    if T < 200:
        raise ValueError("synthesize needs at least 200 buckets")
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    rng = np.random.default_rng(seed)
    I, J = spec.I, spec.J
    times = bucket_times(start, T, spec.interval_minutes)
    hours = hour_of_day(times)
    weekend = weekend_flags(times)

    ii, jj = np.mgrid[0:I, 0:J].astype(float)
    ci, cj = (I - 1) / 2.0, (J - 1) / 2.0
    spread = max(0.9, 0.25 * max(I, J))
    base = 0.12 + np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2 * spread ** 2))
    base += 0.35 * np.exp(-((ii - 0.25 * (I - 1)) ** 2 + (jj - 0.8 * (J - 1)) ** 2) / 2.0)
    base /= base.max()

    weather = _weather(rng, times)
    shock = _standard_field(rng, T, I, J, passes=1)
    innov = _standard_field(rng, T, I, J, passes=1)
    rho = 0.95 if scenario == "demand-only" else 0.85
    sigma = 0.12
    anomaly = np.zeros((T, I, J))
    for t in range(1, T):
        prev = anomaly[t - 1]
        diffused = 0.6 * prev + 0.4 * _smooth(prev[None])[0]
        anomaly[t] = rho * diffused + sigma * innov[t]

    shock_prev = np.concatenate([np.zeros((1, I, J)), shock[:-1]])
    if scenario == "default":
        temp_prev = np.concatenate([[weather[0, 0]], weather[:-1, 0]])
        temp_effect = np.exp(0.25 * (temp_prev - 17.0) / 5.0)
        level = daily_profile(hours, weekend)[:, None, None] * temp_effect[:, None, None]
        lam = base * (level * np.exp(anomaly) - 0.6 * shock_prev)
    elif scenario == "lagged":
        lam = base * (np.exp(2.0 * anomaly) - 0.35 * shock_prev + 0.2)
    else:
        lam = base * np.exp(2.0 * anomaly)
    lam = peak_demand * np.maximum(lam, 0.02 * base)
    demand = rng.poisson(lam).astype(float)

    if scenario == "demand-only":
        ttr = 2.0 + 0.3 * base + 0.5 * _standard_field(rng, T, I, J) + 0.05 * rng.standard_normal((T, I, J))
    else:
        congestion = lam / lam.max()
        ttr = 2.0 + 0.3 * base + 0.6 * congestion + 0.5 * shock + 0.05 * rng.standard_normal((T, I, J))
    ttr = np.maximum(ttr, 0.2)
    meta = {"source": "synthetic", "scenario": scenario, "seed": seed}
    return assemble(times, demand, ttr, weather, spec, train_fraction, meta)


def synthetic_orders(ds: Dataset, seed: int = 0) -> pd.DataFrame:
    """Expand a dataset's counts into individual order rows whose per-cell
    rates equal the dataset's travel-time rate."""
    rng = np.random.default_rng(seed)
    spec = ds.grid
    t_idx, i_idx, j_idx = np.nonzero(ds.demand > 0)
    counts = ds.demand[t_idx, i_idx, j_idx].astype(int)
    t = np.repeat(t_idx, counts)
    i = np.repeat(i_idx, counts)
    j = np.repeat(j_idx, counts)
    n = len(t)
    step_s = spec.interval_minutes * 60
    offsets = rng.integers(0, step_s, n)
    req = ds.times[t] + offsets.astype("timedelta64[s]")
    dlat = (spec.lat_max - spec.lat_min) / spec.I
    dlon = (spec.lon_max - spec.lon_min) / spec.J
    lat = spec.lat_min + (i + rng.uniform(0.05, 0.95, n)) * dlat
    lon = spec.lon_min + (j + rng.uniform(0.05, 0.95, n)) * dlon
    dist = np.round(rng.lognormal(np.log(5.0), 0.5, n), 3) + 0.1
    rate = ds.ttr[t, i, j]
    return pd.DataFrame({
        "request_time": pd.to_datetime(req),
        "travel_distance_km": dist,
        "travel_time_min": rate * dist,
        "longitude": lon,
        "latitude": lat,
    })


def weather_frame(ds: Dataset) -> pd.DataFrame:
    df = pd.DataFrame(ds.weather, columns=list(WEATHER_COLUMNS[1:]))
    df.insert(0, "time", pd.to_datetime(ds.times))
    df["state_code"] = df["state_code"].astype(int)
    return df


# -- correlation analysis --------------------------------------------------------


def pearson(y, z) -> float:
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    if y.shape != z.shape or y.size < 2:
        raise ValueError("pearson needs two equal-length series of at least 2 points")
    dy = y - y.mean()
    dz = z - z.mean()
    denom = math.sqrt(float(dy @ dy) * float(dz @ dz))
    if denom == 0:
        raise ValueError("zero variance")
    return float(dy @ dz) / denom


@dataclass
class CorrelationProfile:
    distance_bins: np.ndarray
    lags: np.ndarray
    mean: np.ndarray  # (n_bins, n_lags)
    pairs: np.ndarray  # pair counts per cell of ``mean``
    excluded_cells: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("distance," + ",".join(f"lag{k}" for k in self.lags) + "\n")
        for b, row in zip(self.distance_bins, self.mean):
            buf.write(f"{b:g}," + ",".join("" if np.isnan(v) else f"{v:.6f}" for v in row) + "\n")
        buf.write(f"# excluded zero-variance cells: {self.excluded_cells}\n")
        return buf.getvalue()


def correlation_profile(target: np.ndarray, explanatory: np.ndarray, max_lag: int = 4,
                        bin_width: float = 1.0) -> CorrelationProfile:
    """Mean Pearson correlation between the target at t in cell (i', j') and
    the explanatory variable at t-k in cell (i, j), grouped by the distance
    between cell centres (in cell units, bins of ``bin_width``) and by lag."""
    target = np.asarray(target, dtype=float)
    explanatory = np.asarray(explanatory, dtype=float)
    if target.shape != explanatory.shape or target.ndim != 3:
        raise ValueError("series must be aligned (T, I, J) arrays")
    T, I, J = target.shape
    if max_lag < 1 or max_lag >= T - 1:
        raise ValueError("max_lag out of range")
    ii, jj = np.mgrid[0:I, 0:J]
    pos = np.column_stack([ii.ravel(), jj.ravel()]).astype(float)
    dist = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
    bins = np.rint(dist / bin_width).astype(int)
    n_bins = bins.max() + 1
    mean = np.full((n_bins, max_lag), np.nan)
    pairs = np.zeros((n_bins, max_lag), dtype=int)
    excluded: set[tuple[str, int]] = set()
    Y_all = target.reshape(T, -1)
    Z_all = explanatory.reshape(T, -1)
    for k in range(1, max_lag + 1):
        Y = Y_all[k:]
        Z = Z_all[:-k]
        dy = Y - Y.mean(0)
        dz = Z - Z.mean(0)
        sy = np.sqrt((dy ** 2).sum(0))
        sz = np.sqrt((dz ** 2).sum(0))
        okY = sy > 0
        okZ = sz > 0
        excluded.update(("target", c) for c in np.nonzero(~okY)[0])
        excluded.update(("explanatory", c) for c in np.nonzero(~okZ)[0])
        corr = (dy[:, okY] / sy[okY]).T @ (dz[:, okZ] / sz[okZ])
        b = bins[np.ix_(okY, okZ)]
        for d in range(n_bins):
            sel = b == d
            if sel.any():
                mean[d, k - 1] = corr[sel].mean()
                pairs[d, k - 1] = int(sel.sum())
    return CorrelationProfile(np.arange(n_bins) * bin_width, np.arange(1, max_lag + 1),
                              mean, pairs, len(excluded))
