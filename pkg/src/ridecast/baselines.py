"""Benchmark predictors: historical average, moving average, ARIMA, a
one-hidden-layer network and a per-cell LSTM.

Every model works on standardized demand, is fitted on the training slice
only, and predicts (n, I, J) arrays for a set of target indices.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.signal import lfilter
from scipy.special import comb

from .data import CALENDAR, WEATHER, Dataset, Standardizer, hour_of_day, weekend_flags
from .forest import FeatureLayout
from .layers import LstmCellParams, glorot, lstm_forward
from .optim import TrainingLog, train_loop
from .tensor import Tensor, affine, mul, sigmoid, tensor_sum

logger = logging.getLogger(__name__)

CELL_VARIABLES = ("d", "tau") + CALENDAR + WEATHER


# -- historical and moving averages ------------------------------------------------


def ha_fit_predict(train_times, train_demand, test_times) -> np.ndarray:
    """Mean training demand at the same hour of day and weekday/weekend class,
    per cell; unseen combinations fall back to the cell's training mean."""
    train_demand = np.asarray(train_demand, dtype=float)
    key_train = weekend_flags(train_times) * 24 + hour_of_day(train_times)
    key_test = weekend_flags(test_times) * 24 + hour_of_day(test_times)
    cell_mean = train_demand.mean(axis=0)
    table = np.empty((48,) + train_demand.shape[1:])
    for k in range(48):
        sel = key_train == k
        table[k] = train_demand[sel].mean(axis=0) if sel.any() else cell_mean
    return table[key_test]


def ma_predict(history, window: int = 8) -> np.ndarray:
    """Mean of the last ``window`` entries along the first axis."""
    history = np.asarray(history, dtype=float)
    if window < 1:
        raise ValueError("window must be positive")
    if len(history) < window:
        raise ValueError(f"need {window} past values, have {len(history)}")
    return history[-window:].mean(axis=0)


# -- ARIMA -------------------------------------------------------------------------


@dataclass
class ArimaModel:
    order: tuple[int, int, int]
    ar: np.ndarray
    ma: np.ndarray
    const: float = 0.0
    fallback: bool = False


def difference(x: np.ndarray, d: int) -> np.ndarray:
    for _ in range(d):
        x = np.diff(x)
    return x


def _lagmat(y: np.ndarray, lags: int, start: int) -> np.ndarray:
    return np.column_stack([y[start - k:len(y) - k] for k in range(1, lags + 1)]) if lags else np.zeros((len(y) - start, 0))


def _lstsq(A: np.ndarray, b: np.ndarray, cond_limit: float = 1e10):
    if A.shape[1] == 0:
        return np.zeros(0)
    s = np.linalg.svd(A, compute_uv=False)
    if s[-1] <= 0 or s[0] / s[-1] > cond_limit:
        return None
    return np.linalg.lstsq(A, b, rcond=None)[0]


def _fit_ar(y: np.ndarray, p: int, with_const: bool):
    start = p
    X = _lagmat(y, p, start)
    if with_const:
        X = np.column_stack([np.ones(len(X)), X])
    beta = _lstsq(X, y[start:])
    if beta is None:
        beta = np.linalg.lstsq(X, y[start:], rcond=None)[0] if X.shape[1] else np.zeros(0)
    c = float(beta[0]) if with_const else 0.0
    return c, np.asarray(beta[1:] if with_const else beta, dtype=float)


def arima_fit(series, order: tuple[int, int, int] = (2, 1, 1)) -> ArimaModel:
    """Two-stage least squares: a long autoregression supplies residual
    estimates, then AR and MA coefficients are fitted jointly. Differenced
    series are modelled without a constant. A near-singular second stage or a
    non-invertible MA part falls back to pure AR(p)."""
    p, d, q = order
    x = np.asarray(series, dtype=float)
    if min(order) < 0:
        raise ValueError("orders must be non-negative")
    if len(x) < 10 * max(1, p + d + q):
        raise ValueError(f"series of length {len(x)} too short for order {order}")
    y = difference(x, d)
    with_const = d == 0
    if q == 0:
        c, ar = _fit_ar(y, p, with_const)
        return ArimaModel(order, ar, np.zeros(0), c)
    m = max(p + q, min(20, len(y) // 10))
    c_long, ar_long = _fit_ar(y, m, with_const)
    e = np.zeros_like(y)
    e[m:] = y[m:] - c_long - _lagmat(y, m, m) @ ar_long
    start = m + q
    X = np.column_stack([_lagmat(y, p, start), _lagmat(e, q, start)])
    if with_const:
        X = np.column_stack([np.ones(len(X)), X])
    beta = _lstsq(X, y[start:])
    if beta is not None:
        c = float(beta[0]) if with_const else 0.0
        b = beta[1:] if with_const else beta
        ar, ma = b[:p], b[p:]
        roots = np.roots(np.r_[1.0, ma][::-1]) if q else np.zeros(0)
        # invertible when the MA polynomial 1 + sum(theta_j z^j) has all roots outside the unit circle
        if np.all(np.isfinite(b)) and (len(roots) == 0 or np.all(np.abs(roots) > 1.0)):
            return ArimaModel(order, np.asarray(ar), np.asarray(ma), c)
    logger.info("ARIMA%s second stage unusable; falling back to AR(%d)", order, p)
    c, ar = _fit_ar(y, p, with_const)
    return ArimaModel(order, ar, np.zeros(q), c, fallback=True)


def arima_residuals(model: ArimaModel, x: np.ndarray) -> np.ndarray:
    """One-step innovations of the differenced series (pre-sample values 0)."""
    y = difference(np.asarray(x, dtype=float), model.order[1])
    u = lfilter(np.r_[1.0, -model.ar], [1.0], y) - model.const
    return lfilter([1.0], np.r_[1.0, model.ma], u)


def arima_in_sample(model: ArimaModel, x) -> np.ndarray:
    """One-step forecasts of x[t] from x[:t] for every t >= d (entry t-d)."""
    x = np.asarray(x, dtype=float)
    return x[model.order[1]:] - arima_residuals(model, x)


def arima_forecast(model: ArimaModel, history) -> float:
    """One-step-ahead forecast following ``history``."""
    x = np.asarray(history, dtype=float)
    p, d, q = model.order
    if len(x) <= d:
        raise ValueError("history shorter than the differencing order")
    y = difference(x, d)
    e = arima_residuals(model, x)
    y_next = model.const
    y_next += sum(model.ar[i] * y[-1 - i] for i in range(len(model.ar)) if i < len(y))
    y_next += sum(model.ma[j] * e[-1 - j] for j in range(len(model.ma)) if j < len(e))
    # undo the differencing: sum_k (-1)^k C(d, k) x_{T+1-k} = y_next
    x_next = y_next - sum((-1) ** k * comb(d, k, exact=True) * x[-k] for k in range(1, d + 1))
    return float(x_next)


# -- neural baselines ----------------------------------------------------------------


@dataclass
class NeuralConfig:
    hidden: int = 64
    window: int = 8
    alpha: float = 1e-4
    batch_size: int = 32
    learning_rate: float = 1e-3
    max_epochs: int = 200
    patience: int = 10
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.hidden < 1 or self.window < 1 or self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("invalid network configuration")


def _penalty(weights, alpha):
    total = None
    for w in weights:
        term = tensor_sum(mul(w, w))
        total = term if total is None else total + term
    return mul(total, alpha)


def _is_bias(name: str) -> bool:
    return name.rsplit(".", 1)[-1].startswith("b")


def _fit(params: dict[str, Tensor], predict, X, y, X_val, y_val, cfg: NeuralConfig,
         rng: np.random.Generator) -> TrainingLog:
    weights = [t for name, t in params.items() if not _is_bias(name)]
    plist = list(params.values())

    def batch_loss(idx):
        pred = predict(X[idx])
        diff = pred - Tensor(y[idx])
        obj = mul(tensor_sum(mul(diff, diff)), 1.0 / len(idx))
        if cfg.alpha > 0:
            obj = obj + _penalty(weights, cfg.alpha)
        return obj, float((diff.data ** 2).sum()), len(idx)

    def evaluate():
        sse = 0.0
        for s in range(0, len(X_val), 4096):
            sse += float(((predict(X_val[s:s + 4096]).data - y_val[s:s + 4096]) ** 2).sum())
        return sse / len(X_val), math.sqrt(sse / len(X_val))

    if cfg.max_epochs == 0:
        return TrainingLog()
    return train_loop(plist, len(X), batch_loss, evaluate, batch_size=cfg.batch_size,
                      learning_rate=cfg.learning_rate, max_epochs=cfg.max_epochs,
                      patience=cfg.patience, rng=rng)


def _chrono_val(n: int, fraction: float) -> int:
    return max(1, int(math.ceil(fraction * n)))


@dataclass
class AnnModel:
    W1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    log: TrainingLog = field(default_factory=TrainingLog)

    def named_tensors(self) -> dict[str, Tensor]:
        return {"W1": self.W1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def forward(self, X) -> Tensor:
        hidden = sigmoid(affine(self.W1, Tensor(np.asarray(X, dtype=float)), self.b1))
        out = affine(self.w2, hidden, self.b2)
        return out.reshape(out.shape[:-1])

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.concatenate([self.forward(X[s:s + 4096]).data for s in range(0, len(X), 4096)]) \
            if len(X) else np.zeros(0)


def ann_fit(X, y, config: NeuralConfig | None = None) -> AnnModel:
    """Sigmoid hidden layer with a linear scalar readout; the last
    ``val_fraction`` of rows (in the given order) is held out for early stopping."""
    cfg = config or NeuralConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    rng = np.random.default_rng(cfg.seed)
    p = X.shape[1]
    model = AnnModel(Tensor(glorot((cfg.hidden, p), rng), True, "W1"),
                     Tensor(np.zeros(cfg.hidden), True, "b1"),
                     Tensor(glorot((1, cfg.hidden), rng), True, "w2"),
                     Tensor(np.zeros(1), True, "b2"))
    n_val = _chrono_val(len(X), cfg.val_fraction)
    model.log = _fit(model.named_tensors(), model.forward, X[:-n_val], y[:-n_val],
                     X[-n_val:], y[-n_val:], cfg, rng)
    return model


def ann_predict(model: AnnModel, X) -> np.ndarray:
    return model.predict(X)


@dataclass
class LstmBaselineModel:
    cell: LstmCellParams
    w: Tensor
    b: Tensor
    log: TrainingLog = field(default_factory=TrainingLog)

    def named_tensors(self) -> dict[str, Tensor]:
        out = {f"cell.{k}": v for k, v in self.cell.named_tensors().items()}
        out.update({"w": self.w, "b": self.b})
        return out

    def forward(self, X) -> Tensor:
        X = np.asarray(X, dtype=float)
        hs = lstm_forward([Tensor(X[:, s]) for s in range(X.shape[1])], self.cell)
        out = affine(self.w, hs[-1], self.b)
        return out.reshape(out.shape[:-1])

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.concatenate([self.forward(X[s:s + 4096]).data for s in range(0, len(X), 4096)]) \
            if len(X) else np.zeros(0)


def lstm_baseline_fit(X, y, config: NeuralConfig | None = None, units: int = 16) -> LstmBaselineModel:
    """Single LSTM layer over (n, steps, variables) windows plus a scalar readout."""
    cfg = config or NeuralConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 3:
        raise ValueError("LSTM inputs must be (samples, steps, variables)")
    rng = np.random.default_rng(cfg.seed)
    model = LstmBaselineModel(LstmCellParams.build(X.shape[2], units, rng),
                              Tensor(glorot((1, units), rng), True, "w"),
                              Tensor(np.zeros(1), True, "b"))
    n_val = _chrono_val(len(X), cfg.val_fraction)
    model.log = _fit(model.named_tensors(), model.forward, X[:-n_val], y[:-n_val], X[-n_val:], y[-n_val:], cfg, rng)
    return model


def lstm_baseline_predict(model: LstmBaselineModel, X) -> np.ndarray:
    return model.predict(X)


# -- per-cell sample construction ---------------------------------------------------


def cell_features(variables: Mapping[str, np.ndarray], targets, window: int = 8) -> np.ndarray:
    """Flat per-cell features for every (target, cell): all nine variables at
    their look-back lags, no neighbouring cells. Shape (n, I*J, p)."""
    d = np.asarray(variables["d"])
    T, I, J = d.shape
    layout = FeatureLayout.build((1, 1), {c: window for c in CELL_VARIABLES})
    out = np.empty((len(targets), I * J, layout.size))
    for i in range(I):
        for j in range(J):
            local = dict(variables)
            local["d"] = variables["d"][:, i:i + 1, j:j + 1]
            local["tau"] = variables["tau"][:, i:i + 1, j:j + 1]
            out[:, i * J + j] = layout.matrix(local, targets)
    return out


def cell_sequences(variables: Mapping[str, np.ndarray], targets, window: int = 8) -> np.ndarray:
    """Per-cell input sequences, oldest first, shape (n, I*J, window, 9).

    Step s carries d, tau and weather at t-window+s and the calendar
    one step later, so the final step includes the target's own calendar."""
    targets = np.asarray(targets, dtype=int)
    d = np.asarray(variables["d"])
    T, I, J = d.shape
    if len(targets) and targets.min() < window:
        raise ValueError(f"targets need {window} steps of history")
    lagged = targets[:, None] + np.arange(-window, 0)[None, :]  # (n, window)
    out = np.empty((len(targets), I * J, window, len(CELL_VARIABLES)))
    out[..., 0] = d[lagged].reshape(len(targets), window, -1).transpose(0, 2, 1)
    out[..., 1] = np.asarray(variables["tau"])[lagged].reshape(len(targets), window, -1).transpose(0, 2, 1)
    for k, v in enumerate(CALENDAR + WEATHER, start=2):
        shift = 1 if v in CALENDAR else 0
        out[..., k] = np.asarray(variables[v])[lagged + shift][:, None, :]
    return out


# -- common model interface ---------------------------------------------------------


class Baseline:
    """Fit on a dataset's training slice; predict standardized demand."""

    name = "baseline"

    def fit(self, dataset: Dataset) -> "Baseline":
        self.scaler = Standardizer.fit(dataset)
        self._fit(dataset, self.scaler.transform(dataset))
        return self

    def predict(self, dataset: Dataset, targets) -> np.ndarray:
        return self._predict(dataset, self.scaler.transform(dataset), np.asarray(targets, dtype=int))

    def min_history(self) -> int:
        return 0

    def _fit(self, dataset, variables):
        raise NotImplementedError

    def _predict(self, dataset, variables, targets):
        raise NotImplementedError


class HistoricalAverage(Baseline):
    name = "HA"

    def _fit(self, dataset, variables):
        n = dataset.n_train
        self.table_times = dataset.times[:n]
        self.train_demand = variables["d"][:n]

    def _predict(self, dataset, variables, targets):
        return ha_fit_predict(self.table_times, self.train_demand, dataset.times[targets])


class MovingAverage(Baseline):
    name = "MA"

    def __init__(self, window: int = 8):
        self.window = window

    def min_history(self) -> int:
        return self.window

    def _fit(self, dataset, variables):
        pass

    def _predict(self, dataset, variables, targets):
        d = variables["d"]
        if len(targets) and targets.min() < self.window:
            raise ValueError(f"targets need {self.window} steps of history")
        c = np.concatenate([np.zeros((1,) + d.shape[1:]), np.cumsum(d, axis=0)])
        return (c[targets] - c[targets - self.window]) / self.window


class Arima(Baseline):
    name = "ARIMA"

    def __init__(self, order: tuple[int, int, int] = (2, 1, 1)):
        self.order = tuple(order)

    def min_history(self) -> int:
        return self.order[1] + 1

    def _fit(self, dataset, variables):
        d = variables["d"][:dataset.n_train]
        I, J = d.shape[1:]
        self.models = [arima_fit(d[:, i, j], self.order) for i in range(I) for j in range(J)]

    def _predict(self, dataset, variables, targets):
        d = variables["d"]
        T, I, J = d.shape
        out = np.empty((len(targets), I, J))
        dd = self.order[1]
        if len(targets) and targets.min() < dd + 1:
            raise ValueError("targets need history beyond the differencing order")
        for c, model in enumerate(self.models):
            series = d[:, c // J, c % J]
            fc = arima_in_sample(model, series)  # fc[k] forecasts series[k + dd]
            out[:, c // J, c % J] = fc[targets - dd]
        return out


class _NeuralCellBaseline(Baseline):
    def __init__(self, config: NeuralConfig | None = None):
        self.config = config or NeuralConfig()

    def min_history(self) -> int:
        return self.config.window

    def _samples(self, variables, targets):
        raise NotImplementedError

    def _train_targets(self, dataset):
        return np.arange(self.config.window, dataset.n_train)

    def _fit(self, dataset, variables):
        targets = self._train_targets(dataset)
        X = self._samples(variables, targets)
        y = variables["d"][targets].reshape(len(targets), -1)
        # rows are time-major so the held-out tail is the most recent period
        self.model = self._fit_model(X.reshape((-1,) + X.shape[2:]), y.reshape(-1))

    def _predict(self, dataset, variables, targets):
        X = self._samples(variables, targets)
        pred = self.model.predict(X.reshape((-1,) + X.shape[2:]))
        return pred.reshape((len(targets),) + dataset.shape)


class FeedForward(_NeuralCellBaseline):
    name = "ANN"

    def _samples(self, variables, targets):
        return cell_features(variables, targets, self.config.window)

    def _fit_model(self, X, y):
        return ann_fit(X, y, self.config)


class CellLstm(_NeuralCellBaseline):
    name = "LSTM"

    def __init__(self, config: NeuralConfig | None = None, units: int = 16):
        super().__init__(config)
        self.units = units

    def _samples(self, variables, targets):
        return cell_sequences(variables, targets, self.config.window)

    def _fit_model(self, X, y):
        return lstm_baseline_fit(X, y, self.config, self.units)
