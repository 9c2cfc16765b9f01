"""Pick planning, trajectories, joint controllers and marker-based state estimation.

Everything here works on the joint's sensor axis: positions are encoder
readings in rad and velocities their time derivative.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError, TrainingDiverged
from .matclass import MaterialClass, material_from_name
from .optim import Adam, clip_by_global_norm
from .plant import (
    JointPlantParams,
    JointState,
    MarkerCamera,
    joint_angle,
    render_markers,
    rest_state,
    sensor_from_joint,
    sensor_velocity,
    step,
    warmup_temperature,
)
from .sysid import LstmPredictor, cell_backward, cell_forward

logger = logging.getLogger(__name__)

FAILED_PICK_RMSE = 0.2


def workspace(p: JointPlantParams, margin_frac: float = 0.1) -> tuple[float, float]:
    """Sensor-axis interval reachable while staying ``margin_frac`` of the stroke off each end stop."""
    m = margin_frac * (p.actuator_max - p.actuator_min)
    lo = float(sensor_from_joint(joint_angle(p.actuator_min + m, p), p))
    hi = float(sensor_from_joint(joint_angle(p.actuator_max - m, p), p))
    return lo, hi


# --------------------------------------------------------------------------
# planning


@dataclass(frozen=True)
class Strategy:
    priority: tuple[MaterialClass, ...]
    min_area: int = 1
    min_confidence: float = 0.0

    def __post_init__(self):
        if not self.priority:
            raise InvalidInputError("strategy needs at least one class in its priority list")
        pr = tuple(material_from_name(m) for m in self.priority)
        if len(set(pr)) != len(pr):
            raise InvalidInputError("priority list repeats a class")
        if MaterialClass.Unlabeled in pr:
            raise InvalidInputError("Unlabeled cannot be picked")
        object.__setattr__(self, "priority", pr)

    def to_json(self) -> dict:
        return {"priority": [m.name for m in self.priority], "min_area": self.min_area,
                "min_confidence": self.min_confidence}

    @classmethod
    def from_json(cls, d: dict) -> "Strategy":
        return cls(tuple(d["priority"]), int(d.get("min_area", 1)), float(d.get("min_confidence", 0.0)))

    @classmethod
    def load(cls, path) -> "Strategy":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class PickTarget:
    material: MaterialClass
    centroid_px: tuple[float, float]
    area_px: int
    target_sensor_pos: float

    def to_json(self) -> dict:
        return {"material": self.material.name, "centroid_px": list(self.centroid_px),
                "area_px": self.area_px, "target_sensor_pos": self.target_sensor_pos}


_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def plan_pick_sequence(label_map, confidence_map, strategy: Strategy,
                       sensor_span: tuple[float, float] = (-0.6, 0.6)) -> list[PickTarget]:
    """Connected components of prioritized classes, ordered for picking.

    Order is (priority rank, area descending, centroid x, centroid y). The
    centroid column maps linearly onto ``sensor_span``.
    """
    labels = np.asarray(label_map)
    conf = np.asarray(confidence_map, dtype=float)
    if labels.shape != conf.shape or labels.ndim != 2:
        raise InvalidInputError("label and confidence maps must be 2-D with equal shapes")
    w = labels.shape[1]
    lo, hi = sensor_span
    keyed = []
    for rank, material in enumerate(strategy.priority):
        mask = (labels == int(material)) & (conf >= strategy.min_confidence)
        comp, n = ndimage.label(mask, structure=_FOUR_CONNECTED)
        if n == 0:
            continue
        idx = np.arange(1, n + 1)
        areas = ndimage.sum_labels(mask, comp, idx).astype(int)
        cents = ndimage.center_of_mass(mask, comp, idx)
        for area, (cy, cx) in zip(areas, cents):
            if area < strategy.min_area:
                continue
            frac = cx / (w - 1) if w > 1 else 0.5
            target = lo + frac * (hi - lo)
            keyed.append(((rank, -int(area), float(cx), float(cy)),
                          PickTarget(material, (float(cx), float(cy)), int(area), float(target))))
    keyed.sort(key=lambda kv: kv[0])
    return [t for _, t in keyed]


def drop_position(material: MaterialClass, sensor_span: tuple[float, float] = (-0.6, 0.6)) -> float:
    """Fixed per-material drop point, classes spread evenly over the span."""
    lo, hi = sensor_span
    n = len([m for m in MaterialClass if m >= 0])
    return lo + (int(material) + 0.5) / n * (hi - lo)


# --------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    t: np.ndarray
    pos: np.ndarray
    vel: np.ndarray
    dt: float

    @property
    def duration(self) -> float:
        return float(self.t[-1])

    def __len__(self):
        return len(self.t)

    def padded(self, n: int) -> "Trajectory":
        """Extend by holding the final position to ``n`` samples."""
        if n <= len(self):
            return self
        extra = n - len(self)
        return Trajectory(
            np.arange(n) * self.dt,
            np.concatenate([self.pos, np.full(extra, self.pos[-1])]),
            np.concatenate([self.vel, np.zeros(extra)]),
            self.dt,
        )


def gen_trajectory(current_pos: float, target_pos: float, vmax: float, amax: float,
                   dt: float = 0.01) -> Trajectory:
    """Sampled rest-to-rest trapezoid (triangular for short moves).

    Uses the fewest samples whose capped ramp covers the distance, then
    scales the velocity samples down to hit it exactly, so they never
    exceed ``vmax`` or change by more than ``amax*dt`` per step.
    Positions are the running sum of velocity times dt.
    """
    if vmax <= 0 or amax <= 0 or dt <= 0:
        raise InvalidInputError("vmax, amax and dt must be positive")
    d = float(target_pos - current_pos)
    dist = abs(d)
    if dist == 0.0:
        return Trajectory(np.zeros(1), np.array([float(current_pos)]), np.zeros(1), dt)
    da = amax * dt
    # smallest sample count whose capped ramp can cover the distance
    n = 2
    while True:
        k = np.arange(n + 1)
        ramp = np.minimum(k, n - k) * da
        if dt * np.minimum(ramp, vmax).sum() >= dist - 1e-15:
            break
        n = max(n + 1, int(n * 1.05))
    # back off to the minimal n by bisection between n/1.05 and n
    lo_n = max(2, int(n / 1.05) - 1)
    while lo_n < n:
        mid = (lo_n + n) // 2
        k = np.arange(mid + 1)
        ramp = np.minimum(k, mid - k) * da
        if dt * np.minimum(ramp, vmax).sum() >= dist - 1e-15:
            n = mid
        else:
            lo_n = mid + 1
    k = np.arange(n + 1)
    vel = np.minimum(np.minimum(k, n - k) * da, vmax)
    # shrink uniformly so the samples cover the distance exactly; scale <= 1
    vel = vel * (dist / (dt * vel.sum()))
    pos = current_pos + math.copysign(1.0, d) * dt * np.cumsum(vel)
    return Trajectory(k * dt, pos, math.copysign(1.0, d) * vel, dt)


def random_trajectories(n: int, seed: int, span: tuple[float, float], vmax: float = 0.5,
                        amax: float = 0.5, dt: float = 0.01, min_dist: float = 0.1) -> list[Trajectory]:
    """Trapezoids between random start and goal positions inside ``span``."""
    rng = np.random.default_rng(seed)
    out = []
    lo, hi = span
    while len(out) < n:
        a, b = rng.uniform(lo, hi, 2)
        if abs(b - a) < min_dist:
            continue
        out.append(gen_trajectory(float(a), float(b), vmax, amax, dt))
    return out


def canonical_trajectory(dt: float = 0.01) -> Trajectory:
    """1 rad rest-to-rest move at 0.5 rad/s and 0.5 rad/s², centred on zero."""
    return gen_trajectory(-0.5, 0.5, 0.5, 0.5, dt)


# --------------------------------------------------------------------------
# state estimation


@dataclass(frozen=True)
class EstimatedJointState:
    sensor_pos: float
    velocity: float
    timestamp: float


def angle_from_markers(m1, m2) -> float:
    dx = m2[0] - m1[0]
    dy = m2[1] - m1[1]
    if dx == 0 and dy == 0:
        raise InvalidInputError("markers coincide; angle undefined")
    return -math.atan2(dy, dx)


class MarkerEstimator:
    """Sensor position from marker pairs, velocity from a smoothed causal central difference.

    The raw velocity at sample k is (s_k - s_{k-2}) / (t_k - t_{k-2})
    (a backward difference while only two samples exist), low-passed as
    v = alpha*raw + (1 - alpha)*v_prev.
    """

    def __init__(self, params: JointPlantParams, alpha: float = 0.5):
        if not 0 < alpha <= 1:
            raise InvalidInputError("alpha must lie in (0, 1]")
        self.params = params
        self.alpha = alpha
        self.reset()

    def reset(self):
        self._hist: list[tuple[float, float]] = []
        self._v = 0.0

    def update(self, t: float, m1, m2) -> EstimatedJointState:
        theta = angle_from_markers(m1, m2)
        s = float(sensor_from_joint(theta, self.params))
        self._hist.append((t, s))
        self._hist = self._hist[-3:]
        if len(self._hist) >= 2:
            t0, s0 = self._hist[0]
            raw = (s - s0) / (t - t0)
            self._v = raw if len(self._hist) == 2 and self._v == 0.0 else (
                self.alpha * raw + (1 - self.alpha) * self._v)
        return EstimatedJointState(s, self._v, t)


def estimate_joint_state(marker_history, params: JointPlantParams, alpha: float = 0.5) -> EstimatedJointState:
    """Estimate from a sequence of (t, marker1, marker2) samples; returns the latest state."""
    if len(marker_history) == 0:
        raise InvalidInputError("no marker samples")
    est = MarkerEstimator(params, alpha)
    out = None
    for t, m1, m2 in marker_history:
        out = est.update(float(t), m1, m2)
    return out


class DirectState:
    """Reads the plant's own encoder and analytic sensor velocity."""

    def __init__(self, params: JointPlantParams):
        self.params = params

    def reset(self):
        pass

    def observe(self, state: JointState) -> EstimatedJointState:
        return EstimatedJointState(state.s, float(sensor_velocity(state.theta, state.omega, self.params)), state.t)


class MarkerState:
    """Renders noiseless markers from the true joint angle and estimates from them."""

    def __init__(self, params: JointPlantParams, camera: MarkerCamera = MarkerCamera(), alpha: float = 0.5):
        self.camera = camera
        self.est = MarkerEstimator(params, alpha)

    def reset(self):
        self.est.reset()

    def observe(self, state: JointState) -> EstimatedJointState:
        m1, m2 = render_markers(state, self.camera)
        return self.est.update(state.t, m1, m2)


def make_state_source(kind: str, params: JointPlantParams):
    if kind == "Direct":
        return DirectState(params)
    if kind == "Markers":
        return MarkerState(params)
    raise InvalidInputError(f"unknown state source {kind!r}")


# --------------------------------------------------------------------------
# controllers


@dataclass(frozen=True)
class PidGains:
    kp: float = 20.0
    ki: float = 60.0
    kd: float = 0.3
    integral_clamp: float = 0.05
    output_clamp: float = 1.0

    def __post_init__(self):
        if self.integral_clamp <= 0 or self.output_clamp <= 0:
            raise InvalidInputError("clamps must be positive")


class PidController:
    def __init__(self, gains: PidGains = PidGains()):
        self.gains = gains
        self.reset()

    def reset(self):
        self._integral = 0.0
        self._prev_err = None

    def command(self, est: EstimatedJointState, refs: np.ndarray, dt: float) -> float:
        g = self.gains
        e = float(refs[0]) - est.sensor_pos
        self._integral = min(g.integral_clamp, max(-g.integral_clamp, self._integral + e * dt))
        de = 0.0 if self._prev_err is None else (e - self._prev_err) / dt
        self._prev_err = e
        u = g.kp * e + g.ki * self._integral + g.kd * de
        return min(g.output_clamp, max(-g.output_clamp, u))


@dataclass
class PolicyModel:
    """Tanh MLP mapping (s, v, next K reference offsets) to a valve command in [-1, 1]."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    lookahead: int = 5
    scales: tuple = (1.0, 0.5, 0.05)  # position, velocity, reference offset
    loss_history: list[float] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def params(self) -> dict:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def with_params(self, p: dict) -> "PolicyModel":
        return replace(self, W1=p["W1"].copy(), b1=p["b1"].copy(), W2=p["W2"].copy(), b2=p["b2"].copy(),
                       loss_history=list(self.loss_history), meta=dict(self.meta))

    def features(self, s, v, refs):
        """``s``, ``v`` shape (B,), ``refs`` (B, K) -> scaled features (B, 2+K)."""
        s = np.asarray(s, dtype=float)
        ps, vs, rs = self.scales
        return np.concatenate([(s / ps)[:, None], (np.asarray(v) / vs)[:, None],
                               (np.asarray(refs) - s[:, None]) / rs], axis=1)

    def forward(self, f):
        z1 = np.tanh(f @ self.W1 + self.b1)
        u = np.tanh(z1 @ self.W2 + self.b2)[:, 0]
        return u, z1

    def act(self, s: float, v: float, refs) -> float:
        refs = np.asarray(refs, dtype=float)
        if not (np.isfinite(s) and np.isfinite(v) and np.all(np.isfinite(refs))):
            raise InvalidInputError("policy inputs must be finite")
        u, _ = self.forward(self.features(np.array([s]), np.array([v]), refs[None, : self.lookahead]))
        return float(u[0])

    def to_json(self) -> dict:
        return {"kind": "policy", "W1": self.W1.tolist(), "b1": self.b1.tolist(), "W2": self.W2.tolist(),
                "b2": self.b2.tolist(), "lookahead": self.lookahead, "scales": list(self.scales),
                "loss_history": list(self.loss_history), "meta": self.meta}

    @classmethod
    def from_json(cls, d: dict) -> "PolicyModel":
        if d.get("kind") != "policy":
            raise InvalidInputError("not a policy file")
        a = lambda k: np.array(d[k], dtype=float)
        return cls(a("W1"), a("b1"), a("W2"), a("b2"), int(d["lookahead"]), tuple(d["scales"]),
                   list(d.get("loss_history", [])), d.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "PolicyModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def init_policy(lookahead: int = 5, hidden: int = 32, seed: int = 0, out_scale: float = 1.0) -> PolicyModel:
    rng = np.random.default_rng(seed)
    d = 2 + lookahead
    W1 = rng.normal(0.0, 1.0 / np.sqrt(d), (d, hidden))
    W2 = rng.normal(0.0, out_scale / np.sqrt(hidden), (hidden, 1))
    return PolicyModel(W1, np.zeros(hidden), W2, np.zeros(1), lookahead)


class PolicyController:
    def __init__(self, policy: PolicyModel):
        self.policy = policy

    def reset(self):
        pass

    def command(self, est: EstimatedJointState, refs: np.ndarray, dt: float) -> float:
        return self.policy.act(est.sensor_pos, est.velocity, refs[1 : 1 + self.policy.lookahead])


# --------------------------------------------------------------------------
# policy optimization through the frozen predictor


@dataclass
class ControllerTrainConfig:
    lookahead: int = 5
    hidden: int = 32
    iterations: int = 200
    batch: int = 16
    lr: float = 3e-3
    lr_final: float = 3e-4
    clip_norm: float = 1.0
    lambda_cmd: float = 1e-5
    mu_smooth: float = 1e-4
    warmup_steps: int = 20
    hold_s: float = 0.5
    seed: int = 0
    vmax: float = 0.5
    amax: float = 0.5
    temperature_range: tuple = (20.0, 60.0)
    init_out_scale: float = 1.0
    ref_scale: float = 0.05


def _ref_windows(ref: np.ndarray, k: int, K: int) -> np.ndarray:
    """Reference samples k+1..k+K, holding the last value past the end."""
    n = ref.shape[1]
    idx = np.minimum(np.arange(k + 1, k + 1 + K), n - 1)
    return ref[:, idx]


def _predictor_warm_state(pred: LstmPredictor, s0, T, rpm, steps: int):
    """Hidden state after ``steps`` zero-command inputs at the start position."""
    P = pred.params()
    B = len(s0)
    h = np.zeros((B, pred.hidden_size))
    c = np.zeros((B, pred.hidden_size))
    x = pred.normalize_inputs(np.stack([s0, rpm, T, np.zeros(B)], axis=1))
    for _ in range(steps):
        h, c, _ = cell_forward(P, x, h, c)
    return h, c


def simulate_policy(policy_params: dict, policy: PolicyModel, pred: LstmPredictor, ref: np.ndarray,
                    T: np.ndarray, rpm: np.ndarray, dt: float, cfg: ControllerTrainConfig,
                    need_grad: bool = True):
    """Free-running closed loop of policy and predictor over reference batch ``ref`` (B×N).

    Returns (loss, grads, sensor trajectory B×N). ``ref[:, 0]`` is the
    start position; the loss sums over steps 1..N-1 and is averaged over
    the batch.
    """
    P = pred.params()
    B, N = ref.shape
    K = policy.lookahead
    ps, vs, rs = policy.scales
    W1, b1, W2, b2 = policy_params["W1"], policy_params["b1"], policy_params["W2"], policy_params["b2"]
    s = ref[:, 0].copy()
    v = np.zeros(B)
    u_prev = np.zeros(B)
    h, c = _predictor_warm_state(pred, s, T, rpm, cfg.warmup_steps)
    traj = np.empty((B, N))
    traj[:, 0] = s
    tape = []
    loss = 0.0
    for k in range(N - 1):
        r = _ref_windows(ref, k, K)
        f = np.concatenate([(s / ps)[:, None], (v / vs)[:, None], (r - s[:, None]) / rs], axis=1)
        z1 = np.tanh(f @ W1 + b1)
        u = np.tanh(z1 @ W2 + b2)[:, 0]
        x = np.stack([(s - pred.input_mean[0]) / pred.input_std[0],
                      (rpm - pred.input_mean[1]) / pred.input_std[1],
                      (T - pred.input_mean[2]) / pred.input_std[2],
                      (u - pred.input_mean[3]) / pred.input_std[3]], axis=1)
        h, c, cache = cell_forward(P, x, h, c)
        v_new = (h @ P["w_out"] + P["b_out"][0]) * pred.target_std + pred.target_mean
        s_new = s + v_new * dt
        e = s_new - ref[:, k + 1]
        loss += float(np.sum(e * e + cfg.lambda_cmd * u * u + cfg.mu_smooth * (u - u_prev) ** 2))
        if need_grad:
            tape.append((f, z1, u, u_prev, cache, e))
        s, v, u_prev = s_new, v_new, u
        traj[:, k + 1] = s
    loss /= B
    if not need_grad:
        return loss, None, traj

    g = {k: np.zeros_like(val) for k, val in policy_params.items()}
    H = pred.hidden_size
    ds = np.zeros(B)  # d loss / d s_new of the step being processed
    dv = np.zeros(B)
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    du_next = np.zeros(B)
    for k in range(N - 2, -1, -1):
        f, z1, u, u_prev, cache, e = tape[k]
        ds = ds + 2.0 * e / B
        dv = dv + ds * dt
        dh = dh + np.outer(dv * pred.target_std, P["w_out"])
        _, dx, dh, dc = cell_backward(P, cache, dh, dc)
        ds_prev = ds + dx[:, 0] / pred.input_std[0]
        du = dx[:, 3] / pred.input_std[3] + du_next
        du += (2.0 * cfg.lambda_cmd * u + 2.0 * cfg.mu_smooth * (u - u_prev)) / B
        du_next = -2.0 * cfg.mu_smooth * (u - u_prev) / B
        da2 = du * (1.0 - u * u)
        g["W2"] += z1.T @ da2[:, None]
        g["b2"] += da2.sum(keepdims=True)
        da1 = (da2[:, None] @ W2.T) * (1.0 - z1 * z1)
        g["W1"] += f.T @ da1
        g["b1"] += da1.sum(axis=0)
        df = da1 @ W1.T
        ds_prev = ds_prev + df[:, 0] / ps - df[:, 2:].sum(axis=1) / rs
        dv = df[:, 1] / vs
        ds = ds_prev
    return loss, g, traj


def _trajectory_batch(trajs, n: int) -> np.ndarray:
    return np.stack([t.padded(n).pos[:n] for t in trajs])


def train_controller(predictor: LstmPredictor, params: JointPlantParams,
                     config: ControllerTrainConfig = ControllerTrainConfig(),
                     sampler=None, dt: float = 0.01) -> PolicyModel:
    """Optimize a policy by backpropagating tracking loss through free-running predictor rollouts.

    ``sampler(rng, n)`` returns n trajectories; the default draws random
    trapezoids over the plant workspace. The plant itself is only used for
    the workspace bounds and nominal engine speed.
    """
    if config.lookahead < 1:
        raise InvalidInputError("lookahead must be at least 1")
    span = workspace(params)
    if sampler is None:
        def sampler(rng, n):
            return random_trajectories(n, int(rng.integers(2**31)), span, config.vmax, config.amax, dt)
    policy = init_policy(config.lookahead, config.hidden, config.seed, config.init_out_scale)
    policy.scales = (1.0, 0.5, config.ref_scale)
    p = {k: v.copy() for k, v in policy.params().items()}
    opt = Adam(p, lr=config.lr)
    rng = np.random.default_rng(config.seed + 1)
    decay = (config.lr_final / config.lr) ** (1.0 / max(1, config.iterations)) if config.lr_final else 1.0
    hold = int(round(config.hold_s / dt))
    history = []
    for it in range(config.iterations):
        trajs = sampler(rng, config.batch)
        n = max(len(t) for t in trajs) + hold
        if n < config.lookahead + 1:
            n = config.lookahead + 1
        ref = _trajectory_batch(trajs, n)
        T = rng.uniform(*config.temperature_range, config.batch)
        rpm = np.full(config.batch, params.engine_rpm)
        loss, g, _ = simulate_policy(p, policy, predictor, ref, T, rpm, dt, config)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"controller loss became {loss} at iteration {it}")
        clip_by_global_norm(g, config.clip_norm)
        opt.step(p, g, lr=config.lr * decay**it)
        history.append(loss / n)
        if it % 50 == 0:
            logger.info("controller iteration %d loss/step %.3e", it, loss / n)
    out = policy.with_params(p)
    out.loss_history = history
    out.meta = {"config": asdict(config), "predictor_meta": predictor.meta.get("config", {})}
    return out


# --------------------------------------------------------------------------
# closed loop on the plant


@dataclass
class FollowLog:
    t: np.ndarray
    ref: np.ndarray
    s: np.ndarray  # true encoder reading
    s_est: np.ndarray
    v_est: np.ndarray
    u: np.ndarray

    @property
    def rmse(self) -> float:
        return float(np.sqrt(np.mean((self.s - self.ref) ** 2)))


def follow(params: JointPlantParams, trajectory: Trajectory, controller, state: JointState | None = None,
           source=None, rng=None) -> tuple[FollowLog, JointState]:
    """Track ``trajectory`` on the plant; returns the log and the final plant state.

    At sample k the controller sees the state estimate and the reference
    samples from k on; its command is held for one step. The log holds
    one row per trajectory sample and the plant advances once per row.
    """
    dt = trajectory.dt
    if state is None:
        L = _length_for_sensor(trajectory.pos[0], params)
        state = rest_state(params, L)
    source = DirectState(params) if source is None else source
    controller.reset()
    n = len(trajectory)
    cols = {k: np.empty(n) for k in ("t", "s", "s_est", "v_est", "u")}
    lookahead = 8
    for k in range(n):
        est = source.observe(state)
        idx = np.minimum(np.arange(k, k + 1 + lookahead), n - 1)
        u = float(controller.command(est, trajectory.pos[idx], dt)) if n > 1 else 0.0
        u = min(1.0, max(-1.0, u))
        cols["t"][k], cols["s"][k], cols["s_est"][k], cols["v_est"][k], cols["u"][k] = (
            state.t, state.s, est.sensor_pos, est.velocity, u)
        state = step(replace(state, u=u), u, dt, params, rng)
    return FollowLog(cols["t"], trajectory.pos.copy(), cols["s"], cols["s_est"], cols["v_est"], cols["u"]), state


def _length_for_sensor(s: float, p: JointPlantParams) -> float:
    from scipy.optimize import brentq

    f = lambda L: float(sensor_from_joint(joint_angle(L, p), p)) - s
    lo, hi = p.actuator_min, p.actuator_max
    if f(lo) > 0 or f(hi) < 0:
        raise InvalidInputError(f"sensor position {s} outside the reachable range")
    return brentq(f, lo, hi, xtol=1e-14)


def pid_follow(params: JointPlantParams, trajectory: Trajectory, gains: PidGains = PidGains(),
               state: JointState | None = None, seed: int = 0, source=None):
    """PID tracking on the sensor axis; returns (log, rmse)."""
    log, _ = follow(params, trajectory, PidController(gains), state, source, np.random.default_rng(seed))
    return log, log.rmse


def policy_follow(params: JointPlantParams, trajectory: Trajectory, policy: PolicyModel,
                  state: JointState | None = None, seed: int = 0, source=None):
    log, _ = follow(params, trajectory, PolicyController(policy), state, source, np.random.default_rng(seed))
    return log, log.rmse


# --------------------------------------------------------------------------
# episodes


@dataclass
class PickResult:
    index: int
    target: PickTarget
    drop_pos: float
    rmse: float
    completed: bool
    duration_s: float

    def to_json(self) -> dict:
        return {"index": self.index, **self.target.to_json(), "drop_sensor_pos": self.drop_pos,
                "rmse": self.rmse, "completed": self.completed, "duration_s": self.duration_s}


@dataclass
class EpisodeReport:
    picks: list[PickResult]
    controller: str
    estimator: str
    seed: int
    total_time_s: float
    params_hash: str
    steps: list[tuple] = field(default_factory=list)  # (t, pick, phase, ref, s, s_est, v_est, u)

    @property
    def n_completed(self) -> int:
        return sum(p.completed for p in self.picks)

    @property
    def success(self) -> bool:
        return all(p.completed for p in self.picks)

    def to_json(self) -> dict:
        return {
            "controller": self.controller,
            "estimator": self.estimator,
            "seed": self.seed,
            "params_hash": self.params_hash,
            "n_picks": len(self.picks),
            "n_completed": self.n_completed,
            "success": self.success,
            "total_time_s": self.total_time_s,
            "picks": [p.to_json() for p in self.picks],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("t", "pick", "phase", "ref", "s", "s_est", "v_est", "u"))
        for row in self.steps:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
        return buf.getvalue()

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "episode.json").write_text(self.dumps())
        (out_dir / "episode_steps.csv").write_text(self.to_csv())


@dataclass(frozen=True)
class EpisodeConfig:
    vmax: float = 0.5
    amax: float = 0.5
    dt: float = 0.01
    failed_rmse: float = FAILED_PICK_RMSE
    settle_s: float = 0.3


def run_episode(params: JointPlantParams, targets: list[PickTarget], controller="PID",
                estimator: str = "Direct", seed: int = 0, config: EpisodeConfig = EpisodeConfig(),
                gains: PidGains = PidGains(), policy: PolicyModel | None = None,
                span: tuple[float, float] | None = None) -> EpisodeReport:
    """Execute the pick list: move to each target, then to its drop position.

    The plant starts at rest at mid-stroke and stays continuous across
    picks. Each move is a trapezoid followed by a short settle hold.
    """
    span = workspace(params) if span is None else span
    if controller == "PID":
        ctrl = PidController(gains)
    elif controller == "Policy":
        if policy is None:
            raise InvalidInputError("Policy controller requested without a policy model")
        ctrl = PolicyController(policy)
    else:
        raise InvalidInputError(f"unknown controller {controller!r}")
    source = make_state_source(estimator, params)
    rng = np.random.default_rng(seed)
    state = rest_state(params)
    settle = int(round(config.settle_s / config.dt))
    results, steps = [], []
    t_start = state.t
    for i, target in enumerate(targets):
        errs = []
        t0 = state.t
        for phase, goal in (("approach", target.target_sensor_pos), ("drop", drop_position(target.material, span))):
            traj = gen_trajectory(_start_pos(state, steps), goal,
                                  config.vmax, config.amax, config.dt)
            traj = traj.padded(len(traj) + settle)
            log, state = follow(params, traj, ctrl, state, source, rng)
            errs.append(log.s - log.ref)
            steps.extend((float(t), i, phase, float(r), float(s), float(se), float(ve), float(u))
                         for t, r, s, se, ve, u in zip(log.t, log.ref, log.s, log.s_est, log.v_est, log.u))
        e = np.concatenate(errs)
        rmse = float(np.sqrt(np.mean(e**2)))
        results.append(PickResult(i, target, drop_position(target.material, span), rmse,
                                  rmse <= config.failed_rmse, float(state.t - t0)))
    return EpisodeReport(results, controller, estimator, seed, float(state.t - t_start), params.digest(), steps)


def _start_pos(state: JointState, steps) -> float:
    # trajectories start from the last reference once the joint has moved, so
    # small residual tracking errors do not jump the reference
    return steps[-1][3] if steps else state.s
