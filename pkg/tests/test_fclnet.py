import numpy as np
import pytest

from ridecast.data import GridSpec, Standardizer, assemble, bucket_times, synthesize
from ridecast.fclnet import (
    FclNet,
    FclNetConfig,
    FclNetParams,
    forward,
    input_dimension,
    load_checkpoint,
    loss,
    make_windows,
    train,
    train_val_targets,
)
from ridecast.forest import count_feature_dimension
from ridecast.tensor import Tensor, grad_check

TINY = dict(K_d=2, K_tau=2, K_e=2, K_a=2, L_d=1, L_tau=1, L_e=1, L_a=1, conv_channels=2, lstm_units=3)


def random_inputs(rng, config, grid, batch=None):
    lead = () if batch is None else (batch,)
    return (rng.uniform(size=lead + (config.K_d,) + grid),
            rng.uniform(size=lead + (config.K_tau,) + grid),
            rng.uniform(size=lead + (config.K_e, len(config.calendar_vars))),
            rng.uniform(size=lead + (config.K_a, len(config.weather_vars))))


def set_fusion(params, **values):
    for name, v in values.items():
        getattr(params, name).data[...] = v


@pytest.fixture(scope="module")
def tiny_ds():
    return synthesize(GridSpec(I=3, J=3), T=24 * 7 * 2, seed=4)


@pytest.fixture(scope="module")
def tiny_model(tiny_ds):
    return train(tiny_ds, FclNetConfig(**TINY, max_epochs=3, batch_size=64))


class TestConfig:
    def test_defaults_valid(self):
        cfg = FclNetConfig()
        assert cfg.L_d == 2 and cfg.conv_channels == 8 and cfg.lstm_units == 16

    @pytest.mark.parametrize("field,value", [("K_d", 0), ("L_tau", 0), ("alpha", -1.0), ("kernel_size", 2),
                                             ("val_fraction", 1.0)])
    def test_invalid(self, field, value):
        with pytest.raises(ValueError):
            FclNetConfig(**{field: value})

    def test_round_trip(self):
        cfg = FclNetConfig.from_windows({"d": 4, "tau": 8, "h": 2, "at": 2})
        assert FclNetConfig.from_dict(cfg.to_dict()) == cfg
        assert cfg.calendar_vars == ("h",) and cfg.weather_vars == ("at",)

    def test_input_dimension_matches_feature_count(self):
        full = FclNetConfig()
        selected = FclNetConfig.from_windows({"d": 4, "tau": 8, "h": 2, "at": 2})
        assert input_dimension(full, (7, 7)) == 840
        assert input_dimension(selected, (7, 7)) == count_feature_dimension((7, 7), selected.effective_windows()) == 592

    def test_demand_only(self):
        cfg = FclNetConfig.demand_only()
        assert cfg.effective_windows() == {"d": 8}


class TestForward:
    def test_zero_weights_give_uniform_two(self):
        cfg = FclNetConfig(**TINY)
        params = FclNetParams.build(cfg, (3, 3), rng=None)
        out = forward(*random_inputs(np.random.default_rng(0), cfg, (3, 3)), params, cfg)
        np.testing.assert_array_equal(out.data, np.full((3, 3), 2.0))

    def test_shape_contract(self):
        cfg = FclNetConfig(**TINY)
        params = FclNetParams.build(cfg, (7, 7), np.random.default_rng(0))
        out = forward(*random_inputs(np.random.default_rng(1), cfg, (7, 7)), params, cfg)
        assert out.shape == (7, 7)

    def test_branch_isolation(self):
        cfg = FclNetConfig(**TINY)
        rng = np.random.default_rng(2)
        params = FclNetParams.build(cfg, (3, 3), rng)
        set_fusion(params, W_u=1.0, W_v=0.0, W_p=0.0, W_q=0.0)
        d, v, e, a = random_inputs(rng, cfg, (3, 3))
        base = forward(d, v, e, a, params, cfg).data
        _, v2, e2, a2 = random_inputs(rng, cfg, (3, 3))
        np.testing.assert_array_equal(forward(d, v2, e2, a2, params, cfg).data, base)
        demand_only = FclNetConfig.demand_only(**{k: v for k, v in TINY.items()})
        solo = FclNetParams(params.grid, params.demand, params.W_ux, params.b_u, params.W_u)
        np.testing.assert_array_equal(forward(d, None, None, None, solo, demand_only).data, base)

    def test_calendar_branch_is_spatially_uniform(self):
        cfg = FclNetConfig(**TINY)
        rng = np.random.default_rng(3)
        params = FclNetParams.build(cfg, (3, 3), rng)
        set_fusion(params, W_u=0.0, W_v=0.0, W_p=1.0, W_q=0.0)
        out = forward(*random_inputs(rng, cfg, (3, 3)), params, cfg).data
        np.testing.assert_allclose(out, out[0, 0], atol=1e-15)

    def test_batch_matches_single(self):
        cfg = FclNetConfig(**TINY)
        rng = np.random.default_rng(4)
        params = FclNetParams.build(cfg, (3, 3), rng)
        inputs = random_inputs(rng, cfg, (3, 3), batch=4)
        batched = forward(*inputs, params, cfg).data
        for b in range(4):
            single = forward(*(x[b] for x in inputs), params, cfg).data
            np.testing.assert_allclose(batched[b], single, atol=1e-12)

    def test_window_mismatch(self):
        cfg = FclNetConfig(**TINY)
        params = FclNetParams.build(cfg, (3, 3), np.random.default_rng(0))
        d, v, e, a = random_inputs(np.random.default_rng(0), cfg, (3, 3))
        with pytest.raises(ValueError):
            forward(d[:1], v, e, a, params, cfg)
        with pytest.raises(ValueError):
            forward(d, v, e[:, :1], a, params, cfg)

    def test_fusion_shape_checked(self):
        cfg = FclNetConfig(**TINY)
        params = FclNetParams.build(cfg, (3, 3), np.random.default_rng(0))
        with pytest.raises(ValueError):
            FclNetParams((3, 4), params.demand, params.W_ux, params.b_u, params.W_u)

    def test_end_to_end_gradient(self):
        cfg = FclNetConfig(**TINY)
        rng = np.random.default_rng(5)
        params = FclNetParams.build(cfg, (3, 3), rng)
        inputs = random_inputs(rng, cfg, (3, 3))
        target = rng.uniform(size=(3, 3))
        err = grad_check(lambda: loss(forward(*inputs, params, cfg), target, params, 0.01),
                         params.parameters(), eps=1e-5)
        assert err < 1e-4


class TestLoss:
    def test_perfect_fit(self):
        assert loss(Tensor(np.ones((2, 2))), np.ones((2, 2)), [], 0.0).item() == 0.0

    def test_pure_penalty(self):
        assert loss(Tensor(np.ones((2, 2))), np.ones((2, 2)), [Tensor(np.array(2.0))], 0.1).item() \
            == pytest.approx(0.4)

    def test_unit_error(self):
        assert loss(Tensor([[0.0, 0.0]]), [[1.0, 0.0]], [], 0.0).item() == 1.0

    def test_batch_mean(self):
        pred = Tensor(np.zeros((2, 1, 2)))
        assert loss(pred, np.array([[[1.0, 0.0]], [[1.0, 1.0]]]), [], 0.0).item() == 1.5

    def test_errors(self):
        with pytest.raises(ValueError):
            loss(Tensor(np.zeros((2, 2))), np.zeros((2, 3)), [], 0.0)
        with pytest.raises(ValueError):
            loss(Tensor(np.zeros((2, 2))), np.zeros((2, 2)), [], -1.0)

    def test_penalty_excludes_biases(self):
        cfg = FclNetConfig(**TINY)
        params = FclNetParams.build(cfg, (3, 3), np.random.default_rng(0))
        names = [n for n, t in params.named_tensors().items() if any(t is w for w in params.weights())]
        assert "W_u" in names and "demand.0.W_xi" in names
        assert not any(n.rsplit(".", 1)[-1].startswith("b_") for n in names)


class TestWindows:
    def test_alignment(self, tiny_ds):
        cfg = FclNetConfig(**TINY)
        v = Standardizer.fit(tiny_ds).transform(tiny_ds)
        w = make_windows(v, [10], cfg)
        np.testing.assert_array_equal(w.demand[0], v["d"][8:10])
        np.testing.assert_array_equal(w.ttr[0], v["tau"][8:10])
        np.testing.assert_array_equal(w.calendar[0, :, 0], v["h"][9:11])
        np.testing.assert_array_equal(w.weather[0, :, 0], v["at"][8:10])
        np.testing.assert_array_equal(w.target[0], v["d"][10])

    def test_var_windows_zero_old_steps(self, tiny_ds):
        cfg = FclNetConfig.from_windows({"d": 2, "h": 3, "w": 1})
        v = Standardizer.fit(tiny_ds).transform(tiny_ds)
        w = make_windows(v, [20], cfg)
        np.testing.assert_array_equal(w.calendar[0, :2, 1], 0.0)
        assert w.calendar[0, 2, 1] == v["w"][20]

    def test_missing_history(self, tiny_ds):
        v = Standardizer.fit(tiny_ds).transform(tiny_ds)
        with pytest.raises(ValueError):
            make_windows(v, [1], FclNetConfig(**TINY))

    def test_validation_is_last_tenth(self):
        tr, val = train_val_targets(100, FclNetConfig(**TINY))
        assert tr[0] == 2 and val[-1] == 99
        assert len(val) == 10 and tr[-1] < val[0]


class TestTraining:
    def test_log_and_best_restore(self, tiny_model, tiny_ds):
        log = tiny_model.log
        assert len(log.epochs) == 3
        assert all(np.isfinite([e.train_loss, e.val_loss]).all() for e in log.epochs)
        best = min(e.val_rmse for e in log.epochs)
        assert log.epochs[log.best_epoch - 1].val_rmse == best

    def test_seeded(self, tiny_ds):
        cfg = FclNetConfig(**TINY, max_epochs=1, batch_size=64)
        a, b = train(tiny_ds, cfg), train(tiny_ds, cfg)
        assert a.log.epochs[0].train_loss == b.log.epochs[0].train_loss

    def test_zero_learning_rate(self, tiny_ds):
        cfg = FclNetConfig(**TINY, max_epochs=2, batch_size=128, learning_rate=0.0)
        model = train(tiny_ds, cfg)
        fresh = FclNetParams.build(cfg, (3, 3), np.random.default_rng(cfg.seed))
        for (name, t), f in zip(model.params.named_tensors().items(), fresh.parameters()):
            np.testing.assert_array_equal(t.data, f.data, err_msg=name)

    def test_constant_demand_is_learned(self):
        times = bucket_times("2015-11-02", 24 * 9)
        demand = np.full((len(times), 2, 2), 5.0)
        rng = np.random.default_rng(0)
        weather = np.column_stack([rng.normal(15, 3, len(times)), np.full(len(times), 60.0),
                                   np.ones(len(times)), np.full(len(times), 3.0), np.full(len(times), 10.0)])
        ds = assemble(times, demand, rng.uniform(1, 3, demand.shape), weather, GridSpec(I=2, J=2))
        cfg = FclNetConfig(**TINY, max_epochs=50, batch_size=16, learning_rate=0.01, patience=50)
        model = train(ds, cfg)
        assert min(e.train_rmse for e in model.log.epochs) < 0.01

    def test_large_alpha_shrinks_weights(self, tiny_ds):
        norms = []
        for alpha in (0.0, 1e3):
            cfg = FclNetConfig(**TINY, max_epochs=2, batch_size=64, alpha=alpha, learning_rate=0.01)
            model = train(tiny_ds, cfg)
            norms.append(sum(float((w.data ** 2).sum()) for w in model.params.weights()))
        assert norms[1] < norms[0]

    def test_insufficient_history(self, tiny_ds):
        with pytest.raises(ValueError):
            train_val_targets(3, FclNetConfig(**TINY))


class TestPrediction:
    def test_shape_and_clip(self, tiny_model, tiny_ds):
        pred = tiny_model.predict(tiny_ds, tiny_ds.n_train)
        assert pred.shape == (3, 3)
        assert (pred >= 0).all()

    def test_inverse_composition(self, tiny_model, tiny_ds):
        targets = np.arange(tiny_ds.n_train, tiny_ds.n_train + 5)
        z = tiny_model.predict_standardized(tiny_ds, targets)
        direct = tiny_model.predict_many(tiny_ds, targets)
        np.testing.assert_array_equal(direct, np.maximum(tiny_model.scaler.inverse("d", z), 0.0))

    def test_checkpoint_round_trip(self, tiny_model, tiny_ds, tmp_path):
        path = tmp_path / "model.npz"
        tiny_model.save(path)
        back = FclNet.load(path)
        targets = np.arange(tiny_ds.n_train, len(tiny_ds))
        np.testing.assert_array_equal(back.predict_many(tiny_ds, targets), tiny_model.predict_many(tiny_ds, targets))
        assert back.config == tiny_model.config
        assert back.grid_spec == tiny_model.grid_spec

    def test_checkpoint_rejects_mismatch(self, tiny_model, tmp_path):
        path = tmp_path / "model.npz"
        tiny_model.save(path)
        with np.load(path) as z:
            arrays = dict(z)
        del arrays["W_q"]
        bad = tmp_path / "bad.npz"
        np.savez(bad, **arrays)
        with pytest.raises(ValueError):
            load_checkpoint(bad)
