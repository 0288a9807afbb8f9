"""FCL-Net: conv-LSTM branches for demand and travel-time rate, LSTM branches
for calendar and weather features, fused cell-wise by learned weight matrices."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .data import CALENDAR, WEATHER, Dataset, GridSpec, Standardizer
from .layers import (
    ConvLstmCellParams,
    LstmCellParams,
    convlstm_forward,
    glorot,
    lstm_forward,
    repeat_scalar,
)
from .optim import TrainingLog, train_loop
from .tensor import Tensor, affine, conv2d, mul, reshape, sigmoid, tensor_sum

CHECKPOINT_VERSION = 1


@dataclass
class FclNetConfig:
    K_d: int = 8
    K_tau: int = 8
    K_e: int = 8
    K_a: int = 8
    L_d: int = 2
    L_tau: int = 2
    L_e: int = 1
    L_a: int = 1
    conv_channels: int = 8
    lstm_units: int = 16
    kernel_size: int = 3
    alpha: float = 1e-4
    batch_size: int = 32
    learning_rate: float = 1e-3
    max_epochs: int = 200
    patience: int = 10
    val_fraction: float = 0.1
    seed: int = 0
    use_ttr: bool = True
    calendar_vars: tuple[str, ...] = CALENDAR
    weather_vars: tuple[str, ...] = WEATHER
    # per-variable windows shorter than their branch window; older steps are zeroed
    var_windows: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.calendar_vars = tuple(self.calendar_vars)
        self.weather_vars = tuple(self.weather_vars)
        self.var_windows = dict(self.var_windows)
        for name in ("K_d", "K_tau", "K_e", "K_a", "L_d", "L_tau", "L_e", "L_a",
                     "conv_channels", "lstm_units", "batch_size", "max_epochs", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if set(self.calendar_vars) - set(CALENDAR) or set(self.weather_vars) - set(WEATHER):
            raise ValueError("unknown calendar or weather variable")
        for v, k in self.var_windows.items():
            if k > self.window(v) or k < 1:
                raise ValueError(f"window for {v} must lie in 1..{self.window(v)}")

    @property
    def use_calendar(self) -> bool:
        return len(self.calendar_vars) > 0

    @property
    def use_weather(self) -> bool:
        return len(self.weather_vars) > 0

    def window(self, var: str) -> int:
        """Branch window that ``var`` is fed through."""
        if var == "d":
            return self.K_d
        if var == "tau":
            return self.K_tau
        if var in CALENDAR:
            return self.K_e
        if var in WEATHER:
            return self.K_a
        raise KeyError(var)

    def effective_windows(self) -> dict[str, int]:
        """Variables fed to the model and the number of lags each contributes."""
        out = {"d": self.K_d}
        if self.use_ttr:
            out["tau"] = self.K_tau
        for v in self.calendar_vars + self.weather_vars:
            out[v] = self.var_windows.get(v, self.window(v))
        return out

    def history_needed(self) -> int:
        """Smallest target index with a full look-back window."""
        need = self.K_d
        if self.use_ttr:
            need = max(need, self.K_tau)
        if self.use_weather:
            need = max(need, self.K_a)
        if self.use_calendar:
            need = max(need, self.K_e - 1)
        return need

    def to_dict(self) -> dict:
        d = asdict(self)
        d["calendar_vars"] = list(self.calendar_vars)
        d["weather_vars"] = list(self.weather_vars)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "FclNetConfig":
        return cls(**dict(d))

    @classmethod
    def demand_only(cls, **kw) -> "FclNetConfig":
        """Plain stacked conv-LSTM on the demand history."""
        return cls(use_ttr=False, calendar_vars=(), weather_vars=(), **kw)

    @classmethod
    def from_windows(cls, windows: Mapping[str, int], **kw) -> "FclNetConfig":
        """Config feeding exactly the variables in ``windows`` with those lags."""
        if "d" not in windows:
            raise ValueError("the demand history is always required")
        cal = tuple(v for v in CALENDAR if v in windows)
        wx = tuple(v for v in WEATHER if v in windows)
        K_e = max((windows[v] for v in cal), default=1)
        K_a = max((windows[v] for v in wx), default=1)
        var_windows = {v: windows[v] for v in cal if windows[v] < K_e}
        var_windows.update({v: windows[v] for v in wx if windows[v] < K_a})
        return cls(K_d=windows["d"], K_tau=windows.get("tau", 1), K_e=K_e, K_a=K_a,
                   use_ttr="tau" in windows, calendar_vars=cal, weather_vars=wx,
                   var_windows=var_windows, **kw)


def input_dimension(config: FclNetConfig, grid: tuple[int, int]) -> int:
    """Scalar inputs per observation; equals the forest feature count for the
    same variable set."""
    I, J = grid
    return sum(k * (I * J if v in ("d", "tau") else 1) for v, k in config.effective_windows().items())


@dataclass
class FclNetParams:
    grid: tuple[int, int]
    demand: list[ConvLstmCellParams]
    W_ux: Tensor
    b_u: Tensor
    W_u: Tensor
    ttr: list[ConvLstmCellParams] | None = None
    W_vx: Tensor | None = None
    b_v: Tensor | None = None
    W_v: Tensor | None = None
    calendar: list[LstmCellParams] | None = None
    w_p: Tensor | None = None
    b_p: Tensor | None = None
    W_p: Tensor | None = None
    weather: list[LstmCellParams] | None = None
    w_q: Tensor | None = None
    b_q: Tensor | None = None
    W_q: Tensor | None = None

    def __post_init__(self):
        for name in ("W_u", "W_v", "W_p", "W_q"):
            m = getattr(self, name)
            if m is not None and m.shape != tuple(self.grid):
                raise ValueError(f"{name} has shape {m.shape}, grid is {tuple(self.grid)}")

    @classmethod
    def build(cls, config: FclNetConfig, grid: tuple[int, int],
              rng: np.random.Generator | None = None) -> "FclNetParams":
        """Glorot-initialised parameters; ``rng=None`` gives all-zero branches
        and all-one fusion matrices."""
        grid = tuple(int(g) for g in grid)
        C, U, k = config.conv_channels, config.lstm_units, config.kernel_size
        n_branches = 1 + config.use_ttr + config.use_calendar + config.use_weather

        def tensor(shape, name, init="glorot"):
            if rng is None:
                data = np.ones(shape) if init == "fusion" else np.zeros(shape)
            elif init == "glorot":
                data = glorot(shape, rng)
            elif init == "fusion":
                data = np.full(shape, 1.0 / n_branches)
            else:
                data = np.zeros(shape)
            return Tensor(data, requires_grad=True, name=name)

        def conv_stack(n_layers):
            return [ConvLstmCellParams.build(grid, 1 if l == 0 else C, C, k, rng) for l in range(n_layers)]

        def lstm_stack(n_layers, n_in):
            return [LstmCellParams.build(n_in if l == 0 else U, U, rng) for l in range(n_layers)]

        kw = dict(grid=grid, demand=conv_stack(config.L_d), W_ux=tensor((k, k, C, 1), "W_ux"),
                  b_u=tensor((1,), "b_u", "zero"), W_u=tensor(grid, "W_u", "fusion"))
        if config.use_ttr:
            kw.update(ttr=conv_stack(config.L_tau), W_vx=tensor((k, k, C, 1), "W_vx"),
                      b_v=tensor((1,), "b_v", "zero"), W_v=tensor(grid, "W_v", "fusion"))
        if config.use_calendar:
            kw.update(calendar=lstm_stack(config.L_e, len(config.calendar_vars)),
                      w_p=tensor((1, U), "w_p"), b_p=tensor((1,), "b_p", "zero"),
                      W_p=tensor(grid, "W_p", "fusion"))
        if config.use_weather:
            kw.update(weather=lstm_stack(config.L_a, len(config.weather_vars)),
                      w_q=tensor((1, U), "w_q"), b_q=tensor((1,), "b_q", "zero"),
                      W_q=tensor(grid, "W_q", "fusion"))
        return cls(**kw)

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for branch in ("demand", "ttr", "calendar", "weather"):
            cells = getattr(self, branch)
            if cells is None:
                continue
            for l, cell in enumerate(cells):
                for name, t in cell.named_tensors().items():
                    out[f"{branch}.{l}.{name}"] = t
        for name in ("W_ux", "b_u", "W_u", "W_vx", "b_v", "W_v", "w_p", "b_p", "W_p", "w_q", "b_q", "W_q"):
            t = getattr(self, name)
            if t is not None:
                out[name] = t
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def weights(self) -> list[Tensor]:
        """Every multiplicative parameter (fusion matrices included), no biases."""
        return [t for name, t in self.named_tensors().items() if not name.rsplit(".", 1)[-1].startswith("b_")]


# -- forward pass ------------------------------------------------------------------


def _batch(x, ndim: int, what: str) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=float)
    if x.ndim == ndim - 1:
        return x[None]
    if x.ndim != ndim:
        raise ValueError(f"{what} window has {x.ndim} axes")
    return x


def _conv_branch(window: np.ndarray, cells, W_out: Tensor, b_out: Tensor) -> Tensor:
    seq = [Tensor(window[:, k, :, :, None]) for k in range(window.shape[1])]
    for cell in cells:
        seq = convlstm_forward(seq, cell)
    out = sigmoid(conv2d(seq[-1], W_out, b_out))
    return reshape(out, out.shape[:-1])


def _lstm_branch(window: np.ndarray, cells, w: Tensor, b: Tensor, grid) -> Tensor:
    seq = [Tensor(window[:, k, :]) for k in range(window.shape[1])]
    for cell in cells:
        seq = lstm_forward(seq, cell)
    s = sigmoid(affine(w, seq[-1], b))
    field_ = repeat_scalar(s, *grid)
    return reshape(field_, field_.shape[:-1])


def forward(demand_window, ttr_window, calendar_window, weather_window,
            params: FclNetParams, config: FclNetConfig) -> Tensor:
    """Fused prediction in standardized units.

    Windows are oldest-first: demand (K_d, I, J), ttr (K_tau, I, J), calendar
    (K_e, n_calendar_vars) ending at the target time, weather (K_a,
    n_weather_vars) ending one step earlier. A leading batch axis is allowed
    on all of them, giving an output of shape (B, I, J) instead of (I, J).
    Branches disabled in ``config`` take ``None``.
    """
    grid = tuple(params.grid)
    d = _batch(demand_window, 4, "demand")
    batched = np.ndim(demand_window.data if isinstance(demand_window, Tensor) else demand_window) == 4
    if d.shape[1:] != (config.K_d,) + grid:
        raise ValueError(f"demand window {d.shape[1:]} != {(config.K_d,) + grid}")
    out = mul(params.W_u, _conv_branch(d, params.demand, params.W_ux, params.b_u))
    if config.use_ttr:
        v = _batch(ttr_window, 4, "ttr")
        if v.shape[1:] != (config.K_tau,) + grid or len(v) != len(d):
            raise ValueError(f"ttr window {v.shape[1:]} != {(config.K_tau,) + grid}")
        out = out + mul(params.W_v, _conv_branch(v, params.ttr, params.W_vx, params.b_v))
    if config.use_calendar:
        e = _batch(calendar_window, 3, "calendar")
        if e.shape[1:] != (config.K_e, len(config.calendar_vars)) or len(e) != len(d):
            raise ValueError(f"calendar window {e.shape[1:]} != {(config.K_e, len(config.calendar_vars))}")
        out = out + mul(params.W_p, _lstm_branch(e, params.calendar, params.w_p, params.b_p, grid))
    if config.use_weather:
        a = _batch(weather_window, 3, "weather")
        if a.shape[1:] != (config.K_a, len(config.weather_vars)) or len(a) != len(d):
            raise ValueError(f"weather window {a.shape[1:]} != {(config.K_a, len(config.weather_vars))}")
        out = out + mul(params.W_q, _lstm_branch(a, params.weather, params.w_q, params.b_q, grid))
    return out if batched else reshape(out, grid)


def loss(pred, target, params, alpha: float) -> Tensor:
    """Squared Frobenius error (averaged over a leading batch axis, if any)
    plus ``alpha`` times the squared norm of every non-bias weight.

    ``params`` is an :class:`FclNetParams` or a plain sequence of weight tensors.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred - Tensor(target)
    err = tensor_sum(mul(diff, diff))
    if pred.ndim == 3:
        err = mul(err, 1.0 / pred.shape[0])
    weights = params.weights() if isinstance(params, FclNetParams) else list(params)
    if alpha > 0 and weights:
        penalty = None
        for w in weights:
            term = tensor_sum(mul(w, w))
            penalty = term if penalty is None else penalty + term
        err = err + mul(penalty, alpha)
    return err


# -- windows -----------------------------------------------------------------------


@dataclass
class Windows:
    """Batched model inputs for a set of target indices."""

    targets: np.ndarray
    demand: np.ndarray
    ttr: np.ndarray | None
    calendar: np.ndarray | None
    weather: np.ndarray | None
    target: np.ndarray

    def take(self, idx) -> "Windows":
        pick = lambda a: None if a is None else a[idx]
        return Windows(self.targets[idx], self.demand[idx], pick(self.ttr), pick(self.calendar),
                       pick(self.weather), self.target[idx])

    def __len__(self) -> int:
        return len(self.targets)


def _lagged(x: np.ndarray, targets: np.ndarray, K: int, end_offset: int) -> np.ndarray:
    """Stack x[t - K + 1 - end_offset .. t - end_offset] for each target t."""
    idx = targets[:, None] + np.arange(-K + 1, 1)[None, :] - end_offset
    return x[idx]


def make_windows(variables: Mapping[str, np.ndarray], targets, config: FclNetConfig) -> Windows:
    """Observation windows for targets ``t``: demand, ttr and weather cover
    t-K..t-1, the calendar covers t-K_e+1..t."""
    targets = np.asarray(targets, dtype=int)
    if len(targets) and targets.min() < config.history_needed():
        raise ValueError(f"target {targets.min()} lacks {config.history_needed()} steps of history")
    if len(targets) and targets.max() >= len(variables["d"]):
        raise ValueError("target index beyond the series")
    demand = _lagged(variables["d"], targets, config.K_d, 1)
    ttr = _lagged(variables["tau"], targets, config.K_tau, 1) if config.use_ttr else None

    def vector_window(names, K, end_offset):
        cols = []
        for v in names:
            w = _lagged(variables[v], targets, K, end_offset)
            keep = config.var_windows.get(v, K)
            if keep < K:
                w = w.copy()
                w[:, :K - keep] = 0.0
            cols.append(w)
        return np.stack(cols, axis=-1)

    calendar = vector_window(config.calendar_vars, config.K_e, 0) if config.use_calendar else None
    weather = vector_window(config.weather_vars, config.K_a, 1) if config.use_weather else None
    return Windows(targets, demand, ttr, calendar, weather, variables["d"][targets])


def forward_windows(w: Windows, params: FclNetParams, config: FclNetConfig) -> Tensor:
    return forward(w.demand, w.ttr, w.calendar, w.weather, params, config)


# -- model object ------------------------------------------------------------------


@dataclass
class FclNet:
    """Trained parameters plus everything needed to predict in demand units."""

    config: FclNetConfig
    params: FclNetParams
    scaler: Standardizer
    grid_spec: GridSpec | None = None
    log: TrainingLog | None = None

    @property
    def grid(self) -> tuple[int, int]:
        return tuple(self.params.grid)

    def predict_standardized(self, dataset: Dataset | Mapping[str, np.ndarray], targets,
                             batch_size: int = 256) -> np.ndarray:
        variables = self.scaler.transform(dataset) if isinstance(dataset, Dataset) else dataset
        targets = np.atleast_1d(np.asarray(targets, dtype=int))
        out = []
        for s in range(0, len(targets), batch_size):
            w = make_windows(variables, targets[s:s + batch_size], self.config)
            out.append(forward_windows(w, self.params, self.config).data)
        return np.concatenate(out) if out else np.zeros((0,) + self.grid)

    def predict(self, dataset: Dataset, t: int) -> np.ndarray:
        """Demand forecast for bucket ``t`` (I x J, demand units, clipped at 0)."""
        return self.predict_many(dataset, [t])[0]

    def predict_many(self, dataset: Dataset, targets) -> np.ndarray:
        z = self.predict_standardized(dataset, targets)
        return np.maximum(self.scaler.inverse("d", z), 0.0)

    def save(self, path) -> None:
        save_checkpoint(path, self)

    @classmethod
    def load(cls, path) -> "FclNet":
        return load_checkpoint(path)


def save_checkpoint(path, model: FclNet) -> None:
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "fclnet",
        "config": model.config.to_dict(),
        "grid": list(model.grid),
        "grid_spec": model.grid_spec.to_dict() if model.grid_spec else None,
        "bounds": model.scaler.to_dict(),
    }
    arrays = {name: t.data for name, t in model.params.named_tensors().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> FclNet:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format_version") != CHECKPOINT_VERSION or meta.get("kind") != "fclnet":
            raise ValueError(f"unsupported checkpoint {meta.get('kind')} v{meta.get('format_version')}")
        config = FclNetConfig.from_dict(meta["config"])
        params = FclNetParams.build(config, tuple(meta["grid"]), rng=None)
        named = params.named_tensors()
        stored = set(z.files) - {"__meta__"}
        if stored != set(named):
            raise ValueError(f"checkpoint tensors do not match the config: {sorted(stored ^ set(named))}")
        for name, t in named.items():
            arr = z[name]
            if arr.shape != t.shape:
                raise ValueError(f"{name}: stored shape {arr.shape}, expected {t.shape}")
            t.data = arr.astype(np.float64, copy=True)
    spec = GridSpec(**meta["grid_spec"]) if meta.get("grid_spec") else None
    return FclNet(config, params, Standardizer.from_dict(meta["bounds"]), spec)


# -- training ----------------------------------------------------------------------


def train_val_targets(n_train: int, config: FclNetConfig) -> tuple[np.ndarray, np.ndarray]:
    """Chronological train/validation targets inside the training slice."""
    first = config.history_needed()
    targets = np.arange(first, n_train)
    if len(targets) < 2:
        raise ValueError(f"training slice of {n_train} buckets is too short for a "
                         f"{first}-step look-back")
    n_val = max(1, int(math.ceil(config.val_fraction * len(targets))))
    return targets[:-n_val], targets[-n_val:]


def squared_error(w: Windows, params: FclNetParams, config: FclNetConfig, batch_size: int = 256) -> float:
    total = 0.0
    for s in range(0, len(w), batch_size):
        part = w.take(slice(s, s + batch_size))
        total += float(((forward_windows(part, params, config).data - part.target) ** 2).sum())
    return total


def train(dataset: Dataset, config: FclNetConfig) -> FclNet:
    """Fit FCL-Net on the training slice of ``dataset``; the returned model
    holds the best-validation parameters and carries the epoch log."""
    scaler = Standardizer.fit(dataset)
    variables = scaler.transform(dataset)
    tr_targets, val_targets = train_val_targets(dataset.n_train, config)
    train_w = make_windows(variables, tr_targets, config)
    val_w = make_windows(variables, val_targets, config)
    rng = np.random.default_rng(config.seed)
    params = FclNetParams.build(config, dataset.shape, rng)
    cells = int(np.prod(dataset.shape))

    def batch_loss(idx):
        part = train_w.take(idx)
        pred = forward_windows(part, params, config)
        sse = float(((pred.data - part.target) ** 2).sum())
        return loss(pred, part.target, params, config.alpha), sse, part.target.size

    def evaluate():
        sse = squared_error(val_w, params, config)
        return sse / len(val_w), math.sqrt(sse / (len(val_w) * cells))

    log = train_loop(params.parameters(), len(train_w), batch_loss, evaluate,
                     batch_size=config.batch_size, learning_rate=config.learning_rate,
                     max_epochs=config.max_epochs, patience=config.patience, rng=rng)
    return FclNet(config, params, scaler, dataset.grid, log)
