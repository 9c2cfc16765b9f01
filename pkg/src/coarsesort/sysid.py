"""Recurrent one-step predictor of the joint's sensor-axis velocity.

A single-layer LSTM reads [s, rpm, T, u] per control step and predicts
the sensor velocity at the next step. Training is truncated BPTT over
fixed-length windows with Adam and global-norm clipping.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, TrainingDiverged
from .optim import Adam, clip_by_global_norm
from .plant import (
    ChirpSpec,
    DatasetLog,
    JointPlantParams,
    JointState,
    collect_dataset,
    sensor_velocity,
    step,
)

logger = logging.getLogger(__name__)

INPUT_COLUMNS = ("s", "rpm", "T", "u")
N_INPUTS = len(INPUT_COLUMNS)
GATES = ("input", "forget", "cell", "output")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# --------------------------------------------------------------------------
# model


@dataclass
class LstmPredictor:
    """LSTM cell + linear head, with input and target normalization baked in.

    Weight layout: ``W_x`` is N_INPUTS × 4H and ``W_h`` is H × 4H with gate
    blocks ordered input, forget, cell candidate, output.
    """

    W_x: np.ndarray
    W_h: np.ndarray
    b: np.ndarray
    w_out: np.ndarray
    b_out: float
    input_mean: np.ndarray
    input_std: np.ndarray
    target_mean: float = 0.0
    target_std: float = 1.0
    loss_history: list[float] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def hidden_size(self) -> int:
        return self.W_h.shape[0]

    def params(self) -> dict:
        return {"W_x": self.W_x, "W_h": self.W_h, "b": self.b, "w_out": self.w_out,
                "b_out": np.atleast_1d(np.asarray(self.b_out, dtype=float))}

    def with_params(self, params: dict) -> "LstmPredictor":
        return LstmPredictor(params["W_x"].copy(), params["W_h"].copy(), params["b"].copy(),
                             params["w_out"].copy(), float(np.ravel(params["b_out"])[0]),
                             self.input_mean.copy(), self.input_std.copy(), self.target_mean,
                             self.target_std, list(self.loss_history), dict(self.meta))

    def init_state(self):
        return np.zeros(self.hidden_size), np.zeros(self.hidden_size)

    def normalize_inputs(self, x):
        return (np.asarray(x, dtype=float) - self.input_mean) / self.input_std

    def to_json(self) -> dict:
        return {
            "kind": "lstm_predictor",
            "inputs": list(INPUT_COLUMNS),
            "W_x": self.W_x.tolist(),
            "W_h": self.W_h.tolist(),
            "b": self.b.tolist(),
            "w_out": self.w_out.tolist(),
            "b_out": self.b_out,
            "input_mean": self.input_mean.tolist(),
            "input_std": self.input_std.tolist(),
            "target_mean": self.target_mean,
            "target_std": self.target_std,
            "loss_history": list(self.loss_history),
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, d: dict) -> "LstmPredictor":
        if d.get("kind") != "lstm_predictor":
            raise InvalidInputError("not a predictor model file")
        arr = lambda k: np.array(d[k], dtype=float)
        return cls(arr("W_x"), arr("W_h"), arr("b"), arr("w_out"), float(d["b_out"]),
                   arr("input_mean"), arr("input_std"), float(d["target_mean"]),
                   float(d["target_std"]), list(d.get("loss_history", [])), d.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "LstmPredictor":
        return cls.from_json(json.loads(Path(path).read_text()))


def init_predictor(hidden_size=32, seed=0, input_mean=None, input_std=None,
                   target_mean=0.0, target_std=1.0) -> LstmPredictor:
    """Uniform ±1/sqrt(H) init, forget-gate bias 1, zero head.

    With a zero head the untrained model outputs the target mean.
    """
    rng = np.random.default_rng(seed)
    H = hidden_size
    k = 1.0 / np.sqrt(H)
    W_x = rng.uniform(-k, k, (N_INPUTS, 4 * H))
    W_h = rng.uniform(-k, k, (H, 4 * H))
    b = np.zeros(4 * H)
    b[H : 2 * H] = 1.0
    mean = np.zeros(N_INPUTS) if input_mean is None else np.asarray(input_mean, float)
    std = np.ones(N_INPUTS) if input_std is None else np.asarray(input_std, float)
    return LstmPredictor(W_x, W_h, b, np.zeros(H), 0.0, mean, std, float(target_mean), float(target_std))


# --------------------------------------------------------------------------
# cell and sequence passes (normalized units)


def cell_forward(p: dict, x, h, c):
    """One LSTM step on a batch. ``x`` B×D, ``h``/``c`` B×H."""
    H = h.shape[-1]
    z = x @ p["W_x"] + h @ p["W_h"] + p["b"]
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H : 2 * H])
    g = np.tanh(z[..., 2 * H : 3 * H])
    o = sigmoid(z[..., 3 * H :])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (x, h, c, i, f, g, o, tc)


def cell_backward(p: dict, cache, dh, dc):
    """Backprop one step; returns (dz, dx, dh_prev, dc_prev)."""
    x, h_prev, c_prev, i, f, g, o, tc = cache
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    dg = dc * i
    df = dc * c_prev
    dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)], axis=-1)
    return dz, dz @ p["W_x"].T, dz @ p["W_h"].T, dc * f


def sequence_forward(p: dict, X, h0=None, c0=None):
    """Run a B×T×D batch; returns normalized outputs B×T and the caches."""
    B, T, _ = X.shape
    H = p["W_h"].shape[0]
    h = np.zeros((B, H)) if h0 is None else h0
    c = np.zeros((B, H)) if c0 is None else c0
    hs = np.empty((B, T, H))
    caches = []
    for t in range(T):
        h, c, cache = cell_forward(p, X[:, t], h, c)
        hs[:, t] = h
        caches.append(cache)
    y = hs @ p["w_out"] + p["b_out"][0]
    return y, (hs, caches)


def sequence_backward(p: dict, X, state, dy):
    """Gradients of sum(dy * y) with respect to every parameter."""
    hs, caches = state
    B, T, _ = X.shape
    H = p["W_h"].shape[0]
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    grads["w_out"] = np.einsum("bt,bth->h", dy, hs)
    grads["b_out"] = np.array([dy.sum()])
    dhs = dy[..., None] * p["w_out"]
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    dzs = np.empty((B, T, 4 * H))
    for t in range(T - 1, -1, -1):
        dz, _, dh, dc = cell_backward(p, caches[t], dhs[:, t] + dh, dc)
        dzs[:, t] = dz
    h_prev = np.concatenate([np.zeros((B, 1, H)), hs[:, :-1]], axis=1)
    grads["W_x"] = np.einsum("btd,btk->dk", X, dzs)
    grads["W_h"] = np.einsum("bth,btk->hk", h_prev, dzs)
    grads["b"] = dzs.sum(axis=(0, 1))
    return grads


def window_loss_and_grads(p: dict, X, Y, burn_in: int = 0):
    """Mean squared error over steps ``burn_in:`` of each window, and its gradient."""
    y, state = sequence_forward(p, X)
    mask = np.zeros(Y.shape)
    mask[:, burn_in:] = 1.0
    n = mask.sum()
    err = (y - Y) * mask
    loss = float(np.sum(err * err) / n)
    grads = sequence_backward(p, X, state, 2.0 * err / n)
    return loss, grads


# --------------------------------------------------------------------------
# data


def log_arrays(log: DatasetLog):
    """Raw inputs for rows 0..N-2 and next-row sensor velocity targets."""
    X = np.stack([log.col(c) for c in INPUT_COLUMNS], axis=1)[:-1]
    Y = log.sensor_vel[1:]
    return X, Y


def _as_logs(data) -> list[DatasetLog]:
    logs = [data] if isinstance(data, DatasetLog) else list(data)
    if not logs:
        raise InvalidInputError("no training logs given")
    return logs


def make_windows(X, Y, window_len: int, stride: int):
    n = len(Y)
    if n < window_len:
        return np.zeros((0, window_len, X.shape[1])), np.zeros((0, window_len))
    starts = list(range(0, n - window_len + 1, stride))
    if starts[-1] != n - window_len:
        starts.append(n - window_len)
    idx = np.asarray(starts)[:, None] + np.arange(window_len)
    return X[idx], Y[idx]


def canonical_training_logs(params: JointPlantParams, segment_s: float = 60.0,
                            starts=(0.55, 0.82, 0.41, 0.69), amp_end: float = 0.6,
                            seed: int = 0) -> list[DatasetLog]:
    """Chirp segments chained on one warm-up curve, each from a different rest position.

    A single chirp drifts over only a fraction of the stroke, so the
    segments start at several positions to cover the sensor range. The
    start order is shuffled so oil temperature and position stay
    decorrelated.
    """
    spec = ChirpSpec(amp_end=amp_end, duration=segment_s)
    return [
        collect_dataset(params, spec, segment_s, start_L=L0, t0=i * segment_s, seed=seed + i)
        for i, L0 in enumerate(starts)
    ]


# --------------------------------------------------------------------------
# training


@dataclass
class PredictorConfig:
    hidden_size: int = 32
    window_len: int = 64
    stride: int = 16
    burn_in: int = 16
    batch: int = 32
    epochs: int = 40
    lr: float = 3e-3
    lr_final: float = 3e-4
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.window_len < 2 or not 0 <= self.burn_in < self.window_len:
            raise InvalidInputError("need window_len >= 2 and 0 <= burn_in < window_len")


def train_predictor(data, config: PredictorConfig = PredictorConfig(), init: LstmPredictor | None = None,
                    time_budget_s: float | None = None) -> LstmPredictor:
    """Fit the predictor on one log or a list of logs.

    The learning rate decays geometrically from ``lr`` to ``lr_final``.
    ``init`` warm-starts from an existing model and keeps its normalization.
    """
    logs = _as_logs(data)
    Xs, Ys = [], []
    for log in logs:
        if len(log) - 1 < config.window_len:
            raise InvalidInputError(
                f"log with {len(log)} rows is shorter than one window of {config.window_len} steps"
            )
        X, Y = log_arrays(log)
        Xs.append(X)
        Ys.append(Y)
    X_all, Y_all = np.concatenate(Xs), np.concatenate(Ys)
    if not (np.all(np.isfinite(X_all)) and np.all(np.isfinite(Y_all))):
        raise InvalidInputError("training logs contain non-finite values")

    if init is None:
        std = X_all.std(axis=0)
        std[std < 1e-12] = 1.0
        y_std = float(Y_all.std())
        model = init_predictor(config.hidden_size, config.seed, X_all.mean(axis=0), std,
                               float(Y_all.mean()), y_std if y_std > 1e-12 else 1.0)
    else:
        model = init.with_params(init.params())
    wx, wy = [], []
    for X, Y in zip(Xs, Ys):
        a, b = make_windows(model.normalize_inputs(X), (Y - model.target_mean) / model.target_std,
                            config.window_len, config.stride)
        wx.append(a)
        wy.append(b)
    WX, WY = np.concatenate(wx), np.concatenate(wy)

    params = {k: v.copy() for k, v in model.params().items()}
    opt = Adam(params, lr=config.lr)
    rng = np.random.default_rng(config.seed + 1)
    n_batches = int(np.ceil(len(WX) / config.batch))
    total = max(1, config.epochs * n_batches)
    decay = (config.lr_final / config.lr) ** (1.0 / total) if config.lr_final else 1.0
    history = list(model.loss_history) if init is not None else []
    t_start = time.monotonic()
    it = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(WX))
        ep_loss = 0.0
        for bi in range(n_batches):
            sel = order[bi * config.batch : (bi + 1) * config.batch]
            loss, grads = window_loss_and_grads(params, WX[sel], WY[sel], config.burn_in)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"predictor loss became {loss} in epoch {epoch}")
            clip_by_global_norm(grads, config.clip_norm)
            opt.step(params, grads, lr=config.lr * decay**it)
            it += 1
            ep_loss += loss * len(sel)
        ep_loss /= len(WX)
        history.append(ep_loss)
        logger.info("predictor epoch %d loss %.5f", epoch, ep_loss)
        if time_budget_s is not None and time.monotonic() - t_start > time_budget_s:
            logger.warning("predictor training stopped at the %.0f s budget", time_budget_s)
            break
    out = model.with_params(params)
    out.loss_history = history
    out.meta = {"config": asdict(config), "n_windows": int(len(WX)), "epochs_run": len(history)}
    return out


# --------------------------------------------------------------------------
# inference


def predict_step(model: LstmPredictor, hidden, x):
    """Advance one step from raw inputs [s, rpm, T, u].

    Returns the predicted sensor velocity at the next step and the new
    hidden state ``(h, c)``.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (N_INPUTS,) or not np.all(np.isfinite(x)):
        raise InvalidInputError(f"predictor input must be {N_INPUTS} finite values")
    h, c = model.init_state() if hidden is None else hidden
    h, c, _ = cell_forward(model.params(), model.normalize_inputs(x), h, c)
    y = float(h @ model.w_out + model.b_out)
    return y * model.target_std + model.target_mean, (h, c)


@dataclass
class Rollout:
    velocity: np.ndarray  # velocity[k] predicted for step k+1
    sensor: np.ndarray  # sensor[0] is the start, sensor[k+1] follows command k


def rollout(model: LstmPredictor, commands, s0: float, dt: float, rpm, temperature,
            mode: str = "free", sensor=None, hidden=None) -> Rollout:
    """Multi-step prediction driven by ``commands``.

    ``mode="teacher"`` feeds the measured ``sensor`` series back in;
    ``mode="free"`` integrates the model's own velocity estimates.
    ``rpm`` and ``temperature`` are scalars or per-step arrays.
    """
    commands = np.asarray(commands, dtype=float)
    n = len(commands)
    rpm = np.broadcast_to(np.asarray(rpm, dtype=float), (n,))
    temperature = np.broadcast_to(np.asarray(temperature, dtype=float), (n,))
    if mode == "teacher":
        if sensor is None or len(sensor) < n:
            raise InvalidInputError("teacher forcing needs a measured sensor series")
    elif mode != "free":
        raise InvalidInputError(f"unknown rollout mode {mode!r}")
    vel = np.empty(n)
    s_pred = np.empty(n + 1)
    s_pred[0] = s0
    s = s0
    for k in range(n):
        s_in = float(sensor[k]) if mode == "teacher" else s
        v, hidden = predict_step(model, hidden, (s_in, rpm[k], temperature[k], commands[k]))
        vel[k] = v
        s = s_in + v * dt
        s_pred[k + 1] = s
    return Rollout(vel, s_pred)


class PlantOracle:
    """Exact next-step velocities from re-simulating the plant; an evaluation reference."""

    def __init__(self, params: JointPlantParams):
        self.params = params

    def predict_log(self, log: DatasetLog) -> np.ndarray:
        r = log.data[0]
        row = dict(zip(("t", "u", "h", "v", "L", "theta", "omega", "s", "T", "rpm"), r))
        state = JointState(**{k: float(v) for k, v in row.items()})
        out = np.empty(len(log) - 1)
        for k in range(len(log) - 1):
            state = step(state, float(log.u[k]), log.dt, self.params)
            out[k] = sensor_velocity(state.theta, state.omega, self.params)
        return out


@dataclass
class EvalReport:
    max_abs_error: float
    rmse: float
    n_steps: int
    t: np.ndarray
    predicted: np.ndarray
    actual: np.ndarray

    def to_json(self) -> dict:
        return {"max_abs_error": self.max_abs_error, "rmse": self.rmse, "n_steps": self.n_steps}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("t", "predicted", "actual", "error"))
        for t, p, a in zip(self.t, self.predicted, self.actual):
            w.writerow((repr(float(t)), repr(float(p)), repr(float(a)), repr(float(p - a))))
        return buf.getvalue()

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))
        (out_dir / "series.csv").write_text(self.to_csv())


def predict_log(model, log: DatasetLog, override: dict | None = None) -> np.ndarray:
    """Teacher-forced next-step predictions over a log.

    ``override`` maps an input column name to a constant, e.g. ``{"T": 0.0}``.
    Objects with a ``predict_log`` method are used directly.
    """
    if hasattr(model, "predict_log"):
        return np.asarray(model.predict_log(log))
    X, _ = log_arrays(log)
    X = X.copy()
    for name, value in (override or {}).items():
        X[:, INPUT_COLUMNS.index(name)] = value
    p = model.params()
    Xn = model.normalize_inputs(X)
    h, c = model.init_state()
    ys = np.empty(len(X))
    for k in range(len(X)):
        h, c, _ = cell_forward(p, Xn[k], h, c)
        ys[k] = h @ model.w_out + model.b_out
    return ys * model.target_std + model.target_mean


def evaluate_predictor(model, log: DatasetLog, override: dict | None = None) -> EvalReport:
    """Teacher-forced one-step error of predicted against actual sensor velocity."""
    if len(log) < 2:
        raise InvalidInputError("evaluation log needs at least two rows")
    pred = predict_log(model, log, override)
    actual = log.sensor_vel[1:]
    err = pred - actual
    return EvalReport(float(np.max(np.abs(err))), float(np.sqrt(np.mean(err**2))), len(err),
                      log.t[1:], pred, actual)


# --------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_gate: dict
    n_checked: int
    passed: bool
    tolerance: float

    def to_json(self) -> dict:
        return asdict(self)


def gradient_check_recurrent(model: LstmPredictor, X, Y, epsilon: float = 1e-5, n_params: int = 120,
                             seed: int = 0, tolerance: float = 1e-4, gradient_fn=None,
                             burn_in: int = 0) -> GradCheckReport:
    """Compare BPTT gradients with central differences on one window.

    ``X`` holds normalized inputs (T×D) and ``Y`` normalized targets (T).
    Parameters are sampled evenly across the four gate blocks and the
    head. ``gradient_fn(params, X, Y)`` replaces the analytic gradient,
    which lets tests inject faults.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim == 2:
        X, Y = X[None], Y[None]
    if X.shape[1] < 2:
        raise InvalidInputError("gradient check needs a window of at least two steps")
    params = {k: v.astype(float).copy() for k, v in model.params().items()}
    if gradient_fn is None:
        grads = window_loss_and_grads(params, X, Y, burn_in)[1]
    else:
        grads = gradient_fn(params, X, Y)
    H = params["W_h"].shape[0]
    rng = np.random.default_rng(seed)

    groups = {}
    for gi, gate in enumerate(GATES):
        cols = slice(gi * H, (gi + 1) * H)
        cand = []
        for name in ("W_x", "W_h", "b"):
            block = np.zeros(params[name].shape, dtype=bool)
            block[..., cols] = True
            cand += [(name, idx) for idx in zip(*np.nonzero(block))]
        groups[gate] = cand
    groups["head"] = [("w_out", (j,)) for j in range(H)] + [("b_out", (0,))]
    # even share per group; groups too small for their share hand the
    # remainder to the larger ones
    quota = {}
    left, names = n_params, sorted(groups, key=lambda g: len(groups[g]))
    for i, name in enumerate(names):
        quota[name] = min(len(groups[name]), left // (len(names) - i))
        left -= quota[name]
    picks = []
    for name, cand in groups.items():
        sel = rng.choice(len(cand), size=quota[name], replace=False)
        picks += [(name, cand[j]) for j in sorted(sel)]

    def loss_at():
        return window_loss_and_grads(params, X, Y, burn_in)[0]

    per_gate = {g: 0.0 for g in groups}
    worst = 0.0
    for group, (pname, idx) in picks:
        orig = params[pname][idx]
        params[pname][idx] = orig + epsilon
        lp = loss_at()
        params[pname][idx] = orig - epsilon
        lm = loss_at()
        params[pname][idx] = orig
        num = (lp - lm) / (2 * epsilon)
        ana = float(grads[pname][idx])
        rel = abs(num - ana) / max(abs(num) + abs(ana), 1e-7)
        per_gate[group] = max(per_gate[group], rel)
        worst = max(worst, rel)
    return GradCheckReport(worst, per_gate, len(picks), worst <= tolerance, tolerance)


def gradcheck_window(model: LstmPredictor, log: DatasetLog, start: int = 0, length: int = 32):
    """Normalized (X, Y) for one window of ``log``."""
    X, Y = log_arrays(log)
    X = model.normalize_inputs(X[start : start + length])
    Y = (Y[start : start + length] - model.target_mean) / model.target_std
    return X, Y
