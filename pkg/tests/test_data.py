import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ridecast.data import (
    SCENARIOS,
    GridSeries,
    GridSpec,
    OrderRecord,
    Standardizer,
    aggregate_demand,
    aggregate_ttr,
    align_weather,
    assemble,
    bucket_times,
    chronological_split,
    classify_time_of_day,
    correlation_profile,
    day_of_week,
    hour_of_day,
    ingest,
    inverse_minmax,
    load_dataset,
    minmax_standardize,
    orders_frame,
    pearson,
    read_orders_csv,
    read_weather_csv,
    save_dataset,
    split_index,
    synthesize,
    synthetic_orders,
    weather_frame,
    weekend_flags,
)

SMALL = GridSpec(I=3, J=4)


@pytest.fixture(scope="module")
def small_ds():
    return synthesize(SMALL, T=24 * 7 * 3, seed=5)


def order(ts, lon, lat, dist=2.0, minutes=6.0):
    return OrderRecord(np.datetime64(ts), dist, minutes, lon, lat)


class TestGridSpec:
    def test_cell_index_oracle(self):
        spec = GridSpec(0.0, 1.0, 0.0, 2.0, I=4, J=5)
        rng = np.random.default_rng(0)
        lon = rng.uniform(-0.2, 1.2, 500)
        lat = rng.uniform(-0.2, 2.2, 500)
        i, j = spec.cell_index(lon, lat)
        for k in range(500):
            inside = 0 <= lon[k] <= 1 and 0 <= lat[k] <= 2
            if not inside:
                assert (i[k], j[k]) == (-1, -1)
                continue
            assert i[k] == min(int(lat[k] / 0.5), 3)
            assert j[k] == min(int(lon[k] / 0.2), 4)

    def test_boundaries(self):
        spec = GridSpec(0.0, 1.0, 0.0, 1.0, I=2, J=2)
        i, j = spec.cell_index([0.0, 0.5, 1.0, 1.0000001], [0.0, 0.5, 1.0, 0.5])
        assert list(i) == [0, 1, 1, -1]
        assert list(j) == [0, 1, 1, -1]

    def test_interior_edges_go_to_higher_cell(self):
        spec = GridSpec()
        step = (spec.lon_max - spec.lon_min) / spec.J
        edges = spec.lon_min + step * np.arange(1, spec.J)
        _, j = spec.cell_index(edges, np.full(len(edges), 30.2))
        assert list(j) == list(range(1, spec.J))

    def test_invalid(self):
        with pytest.raises(ValueError):
            GridSpec(lon_min=1.0, lon_max=0.0)
        with pytest.raises(ValueError):
            GridSpec(I=0)


class TestTime:
    def test_calendar(self):
        assert day_of_week("2015-11-07T10:00") == 1  # Saturday
        assert day_of_week("2015-11-09T00:00") == 0  # Monday
        assert hour_of_day(np.array(["2015-11-02T13:30"], dtype="datetime64[s]"))[0] == 13

    def test_weekend_flags_match_pandas(self):
        times = bucket_times("2015-11-02", 24 * 14)
        expected = (pd.DatetimeIndex(times).dayofweek >= 5).astype(int)
        np.testing.assert_array_equal(weekend_flags(times), expected)


class TestAggregation:
    def test_counts_oracle(self):
        rng = np.random.default_rng(1)
        spec = GridSpec(0.0, 1.0, 0.0, 1.0, I=3, J=3)
        n = 400
        minutes = rng.integers(0, 5 * 60, n)
        records = [order(np.datetime64("2020-01-01T00:00") + np.timedelta64(int(m), "m"),
                         rng.uniform(-0.1, 1.1), rng.uniform(-0.1, 1.1),
                         dist=float(rng.choice([0.0, 1.5, 3.0]))) for m in minutes]
        series = aggregate_demand(records, spec)
        expected = np.zeros((5, 3, 3))
        for r in records:
            i, j = spec.cell_index(r.longitude, r.latitude)
            if r.travel_distance > 0 and i >= 0:
                t = int((r.requesting_time - np.datetime64("2020-01-01T00:00")) // np.timedelta64(1, "h"))
                expected[t, int(i), int(j)] += 1
        np.testing.assert_array_equal(series.values, expected)
        rep = series.report
        assert rep["retained"] == int(expected.sum())
        assert rep["orders_in"] == rep["retained"] + rep["dropped_nonpositive_distance"] + rep["dropped_outside_grid"]

    def test_empty_input(self):
        series = aggregate_demand(orders_frame([]), SMALL)
        assert len(series) == 0

    def test_ttr_mean_and_imputation(self):
        spec = GridSpec(0.0, 1.0, 0.0, 1.0, I=1, J=2)
        records = [
            order("2020-01-01T00:10", 0.2, 0.5, dist=2.0, minutes=4.0),   # rate 2
            order("2020-01-01T00:20", 0.3, 0.5, dist=1.0, minutes=4.0),   # rate 4
            order("2020-01-01T01:10", 0.8, 0.5, dist=1.0, minutes=10.0),  # rate 10
            order("2020-01-01T03:10", 0.8, 0.5, dist=1.0, minutes=1.0),   # rate 1
        ]
        s = aggregate_ttr(records, spec)
        assert s.values.shape == (4, 1, 2)
        np.testing.assert_allclose(s.values[0, 0], [3.0, 3.0])  # empty cell takes bucket mean
        np.testing.assert_allclose(s.values[1, 0], [10.0, 10.0])
        np.testing.assert_allclose(s.values[2, 0], [17.0 / 4, 17.0 / 4])  # empty bucket, overall mean
        assert s.report["imputed_cells"] == 5
        assert s.report["empty_buckets"] == 1

    def test_orders_round_trip(self, small_ds, tmp_path):
        orders = synthetic_orders(small_ds, seed=2)
        path = tmp_path / "orders.csv"
        orders.to_csv(path, index=False)
        wpath = tmp_path / "weather.csv"
        weather_frame(small_ds).to_csv(wpath, index=False)
        ds = ingest(read_orders_csv(path), read_weather_csv(wpath), SMALL)
        first, last = np.nonzero(small_ds.demand.sum(axis=(1, 2)))[0][[0, -1]]
        np.testing.assert_array_equal(ds.demand, small_ds.demand[first:last + 1])
        occupied = small_ds.demand[first:last + 1] > 0
        np.testing.assert_allclose(ds.ttr[occupied], small_ds.ttr[first:last + 1][occupied], rtol=1e-9)
        np.testing.assert_allclose(ds.weather, small_ds.weather[first:last + 1])

    def test_missing_columns(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            read_orders_csv(p)
        with pytest.raises(ValueError):
            read_weather_csv(p)


class TestWeather:
    def frame(self, hours):
        return pd.DataFrame({
            "time": pd.to_datetime("2020-01-01") + pd.to_timedelta(hours, unit="h"),
            "temperature_c": np.asarray(hours, dtype=float),
            "humidity_pct": 50.0, "state_code": 1, "wind_speed": 2.0, "visibility": 10.0,
        })

    def test_short_gap_filled(self):
        times = bucket_times("2020-01-01", 6)
        out = align_weather(self.frame([0, 1, 5]), times)
        np.testing.assert_array_equal(out[:, 0], [0, 1, 1, 1, 1, 5])

    def test_long_gap_raises(self):
        with pytest.raises(ValueError, match="weather missing"):
            align_weather(self.frame([0, 6]), bucket_times("2020-01-01", 7))


class TestTimeOfDay:
    def test_ranking(self):
        times = bucket_times("2015-11-02", 24 * 14)
        hours = hour_of_day(times)
        demand = hours.astype(float).reshape(-1, 1, 1)
        tod = classify_time_of_day(times, demand)
        assert tod.weekday == tuple([0] * 8 + [1] * 8 + [2] * 8)
        assert tod.weekend == tod.weekday

    def test_ties_prefer_earlier_hour(self):
        times = bucket_times("2015-11-02", 24 * 7)
        tod = classify_time_of_day(times, np.ones((len(times), 1, 1)))
        assert tod.weekday == tuple([2] * 8 + [1] * 8 + [0] * 8)

    def test_needs_weekends(self):
        times = bucket_times("2015-11-02", 24 * 5)
        with pytest.raises(ValueError):
            classify_time_of_day(times, np.ones((len(times), 1, 1)))


class TestScaling:
    def test_minmax(self):
        z, b = minmax_standardize([2.0, 4.0, 6.0])
        np.testing.assert_array_equal(z, [0.0, 0.5, 1.0])
        assert b == (2.0, 6.0)

    def test_constant(self):
        z, _ = minmax_standardize([3.0, 3.0])
        np.testing.assert_array_equal(z, 0.0)
        np.testing.assert_array_equal(inverse_minmax(z, (3.0, 3.0)), 3.0)

    def test_out_of_range_not_clipped(self):
        z, _ = minmax_standardize([-1.0, 3.0], (0.0, 2.0))
        np.testing.assert_array_equal(z, [-0.5, 1.5])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=30))
    def test_round_trip(self, xs):
        x = np.array(xs)
        z, b = minmax_standardize(x)
        if b[0] != b[1]:
            np.testing.assert_allclose(inverse_minmax(z, b), x, atol=1e-6 * max(1.0, np.abs(x).max()))
            assert z.min() >= 0.0 and z.max() <= 1.0


class TestSplit:
    @pytest.mark.parametrize("T,frac,n", [(10, 0.7, 7), (1344, 0.7, 940), (3, 0.5, 1)])
    def test_index(self, T, frac, n):
        assert split_index(T, frac) == n

    @pytest.mark.parametrize("T,frac", [(1, 0.5), (10, 0.0), (10, 1.0), (2, 0.4)])
    def test_invalid(self, T, frac):
        with pytest.raises(ValueError):
            split_index(T, frac)

    def test_series_split_is_chronological(self):
        times = bucket_times("2020-01-01", 20)
        s = GridSeries(times, np.zeros((20, 1, 1)))
        train, test = chronological_split(s, 0.7)
        assert len(train) == 14 and len(test) == 6
        assert train.times.max() < test.times.min()

    def test_uneven_spacing_rejected(self):
        times = bucket_times("2020-01-01", 4)
        times[2] += np.timedelta64(60, "s")
        with pytest.raises(ValueError):
            GridSeries(times, np.zeros((4, 1, 1)))


class TestDataset:
    def test_leakage_invariance(self, small_ds):
        n = small_ds.n_train
        perturbed_demand = small_ds.demand.copy()
        perturbed_demand[n:] = perturbed_demand[n:] * 7 + 100
        perturbed_ttr = small_ds.ttr.copy()
        perturbed_ttr[n:] += 50.0
        perturbed_weather = small_ds.weather.copy()
        perturbed_weather[n:, 0] -= 80.0
        other = assemble(small_ds.times, perturbed_demand, perturbed_ttr, perturbed_weather, SMALL)
        assert other.time_of_day == small_ds.time_of_day
        assert Standardizer.fit(other).bounds == Standardizer.fit(small_ds).bounds

    def test_standardized_train_range(self, small_ds):
        v = Standardizer.fit(small_ds).transform(small_ds)
        for name, arr in v.items():
            train = arr[:small_ds.n_train]
            assert train.min() == 0.0 or train.max() == 0.0
            assert train.max() <= 1.0

    def test_standardizer_round_trip(self, small_ds):
        sc = Standardizer.fit(small_ds)
        again = Standardizer.from_dict(sc.to_dict())
        assert again.bounds == sc.bounds
        np.testing.assert_allclose(sc.inverse("d", sc.scale("d", small_ds.demand)), small_ds.demand,
                                   atol=1e-12)

    def test_save_load(self, small_ds, tmp_path):
        path = tmp_path / "ds.npz"
        save_dataset(path, small_ds)
        back = load_dataset(path)
        for name in ("times", "demand", "ttr", "weather", "h", "w"):
            np.testing.assert_array_equal(getattr(back, name), getattr(small_ds, name))
        assert back.grid == small_ds.grid
        assert back.n_train == small_ds.n_train
        assert back.time_of_day == small_ds.time_of_day

    def test_negative_demand_rejected(self, small_ds):
        bad = small_ds.demand.copy()
        bad[0, 0, 0] = -1
        with pytest.raises(ValueError):
            assemble(small_ds.times, bad, small_ds.ttr, small_ds.weather, SMALL)


class TestSynthesize:
    @pytest.mark.parametrize("scenario", SCENARIOS)
    def test_shapes_and_ranges(self, scenario):
        ds = synthesize(SMALL, T=300, seed=3, scenario=scenario)
        assert ds.demand.shape == (300, 3, 4)
        assert (ds.demand >= 0).all() and np.all(ds.demand == np.round(ds.demand))
        assert (ds.ttr > 0).all()
        assert set(np.unique(ds.weather[:, 2])) <= {1, 2, 3, 4, 5}
        ds.exogenous()

    def test_seeded(self):
        a = synthesize(SMALL, T=250, seed=9)
        b = synthesize(SMALL, T=250, seed=9)
        c = synthesize(SMALL, T=250, seed=10)
        np.testing.assert_array_equal(a.demand, b.demand)
        assert not np.array_equal(a.demand, c.demand)

    def test_invalid(self):
        with pytest.raises(ValueError):
            synthesize(SMALL, T=50)
        with pytest.raises(ValueError):
            synthesize(SMALL, T=300, scenario="nope")


class TestCorrelation:
    def test_pearson(self):
        assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
        assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
        with pytest.raises(ValueError):
            pearson([1, 1, 1], [1, 2, 3])

    def test_profile_oracle(self):
        rng = np.random.default_rng(4)
        y = rng.normal(size=(40, 3, 3))
        z = rng.normal(size=(40, 3, 3))
        z[:, 2, 2] = 1.0  # zero variance, excluded
        prof = correlation_profile(y, z, max_lag=2)
        sums, counts = {}, {}
        for k in (1, 2):
            for a in range(9):
                for b in range(9):
                    ia, ja, ib, jb = a // 3, a % 3, b // 3, b % 3
                    if (ib, jb) == (2, 2):
                        continue
                    d = round(math.hypot(ia - ib, ja - jb))
                    r = pearson(y[k:, ia, ja], z[:-k, ib, jb])
                    sums[d, k] = sums.get((d, k), 0.0) + r
                    counts[d, k] = counts.get((d, k), 0) + 1
        for (d, k), s in sums.items():
            assert prof.mean[d, k - 1] == pytest.approx(s / counts[d, k], abs=1e-12)
            assert prof.pairs[d, k - 1] == counts[d, k]
        assert prof.excluded_cells == 1
        assert "lag1,lag2" in prof.to_csv()
