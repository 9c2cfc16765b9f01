"""Synthetic single-joint hydraulic plant.

Valve command -> dead zone -> play-operator hysteresis -> temperature and
engine-speed dependent flow gain -> first-order valve lag -> cylinder
length -> joint angle through a law-of-cosines linkage -> encoder reading
on a nonlinear parallel-kinematic axis.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

LOG_COLUMNS = ("t", "u", "h", "v", "L", "theta", "omega", "s", "T", "rpm")


@dataclass(frozen=True)
class JointPlantParams:
    dead_zone_pos: float = 0.10
    dead_zone_neg: float = 0.12
    hysteresis_width: float = 0.03
    gain_g0: float = 0.25
    temp_coeff: float = 0.008
    temp_ref: float = 40.0
    engine_nominal_rpm: float = 1500.0
    engine_rpm: float = 1500.0
    lag_tau: float = 0.08
    link_a: float = 0.6
    link_b: float = 0.5
    actuator_min: float = 0.40
    actuator_max: float = 0.95
    joint_offset: float = -1.4
    sensor_beta: float = 0.3
    sensor_noise_std: float = 0.0002
    temp_ambient: float = 20.0
    temp_rise: float = 50.0
    temp_tau: float = 120.0

    def __post_init__(self):
        a, b = self.link_a, self.link_b
        if not self.actuator_min < self.actuator_max:
            raise InvalidInputError("actuator range must satisfy Lmin < Lmax")
        if not (abs(a - b) < self.actuator_min and self.actuator_max < a + b):
            raise InvalidInputError("actuator range violates the linkage triangle inequality")
        if not 0 <= self.dead_zone_pos < 1 or not 0 <= self.dead_zone_neg < 1:
            raise InvalidInputError("dead zones must lie in [0, 1)")
        if abs(self.sensor_beta) >= 1:
            raise InvalidInputError("|sensor_beta| must be < 1 for a monotone sensor map")
        if self.lag_tau <= 0 or self.hysteresis_width < 0 or self.sensor_noise_std < 0:
            raise InvalidInputError("lag must be positive, hysteresis width and noise non-negative")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "JointPlantParams":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidInputError(f"unknown plant parameters: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def actuator_mid(self) -> float:
        return 0.5 * (self.actuator_min + self.actuator_max)


def canonical_params() -> JointPlantParams:
    """Parameters shipped in ``data/canonical_plant.json``."""
    text = resources.files("coarsesort").joinpath("data/canonical_plant.json").read_text()
    return JointPlantParams.from_json(json.loads(text))


def load_params(path) -> JointPlantParams:
    return JointPlantParams.from_json(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# kinematics


def joint_angle(L: float, p: JointPlantParams) -> float:
    a, b = p.link_a, p.link_b
    c = (a * a + b * b - L * L) / (2 * a * b)
    return p.joint_offset + math.acos(max(-1.0, min(1.0, c)))


def joint_angle_derivative(L: float, p: JointPlantParams) -> float:
    """dθ/dL of the law-of-cosines linkage."""
    a, b = p.link_a, p.link_b
    c = (a * a + b * b - L * L) / (2 * a * b)
    return L / (a * b * math.sqrt(max(1.0 - c * c, 1e-300)))


def joint_range(p: JointPlantParams) -> tuple[float, float]:
    return joint_angle(p.actuator_min, p), joint_angle(p.actuator_max, p)


def sensor_from_joint(theta, p: JointPlantParams):
    return theta + p.sensor_beta * np.sin(theta)


def sensor_velocity(theta, omega, p: JointPlantParams):
    """ds/dt on the encoder axis given joint angle and joint velocity."""
    return (1.0 + p.sensor_beta * np.cos(theta)) * omega


def sensor_range(p: JointPlantParams) -> tuple[float, float]:
    lo, hi = joint_range(p)
    return float(sensor_from_joint(lo, p)), float(sensor_from_joint(hi, p))


def joint_from_sensor(s: float, p: JointPlantParams, tol: float = 1e-12) -> float:
    """Invert s = θ + β sin θ by safeguarded Newton iteration.

    The map is strictly increasing for |β| < 1; the search is limited to
    the joint range widened by 0.5 rad.
    """
    lo, hi = joint_range(p)
    lo, hi = lo - 0.5, hi + 0.5
    f = lambda th: th + p.sensor_beta * math.sin(th) - s
    if f(lo) > 0 or f(hi) < 0:
        raise InvalidInputError(f"sensor value {s} outside the image of the sensor map")
    th = min(max(s, lo), hi)
    for _ in range(100):
        val = f(th)
        if abs(val) < tol:
            return th
        if val > 0:
            hi = th
        else:
            lo = th
        step = th - val / (1.0 + p.sensor_beta * math.cos(th))
        th = step if lo < step < hi else 0.5 * (lo + hi)
    return th


# --------------------------------------------------------------------------
# dynamics


@dataclass(frozen=True)
class JointState:
    t: float
    u: float
    h: float
    v: float
    L: float
    theta: float
    omega: float
    s: float
    T: float
    rpm: float

    def row(self) -> tuple[float, ...]:
        return tuple(getattr(self, c) for c in LOG_COLUMNS)


def warmup_temperature(t: float, p: JointPlantParams) -> float:
    return p.temp_ambient + p.temp_rise * (1.0 - math.exp(-t / p.temp_tau))


def rest_state(p: JointPlantParams, L: float | None = None) -> JointState:
    L = p.actuator_mid if L is None else L
    theta = joint_angle(L, p)
    return JointState(0.0, 0.0, 0.0, 0.0, L, theta, 0.0, float(sensor_from_joint(theta, p)),
                      warmup_temperature(0.0, p), p.engine_rpm)


def dead_zone(u: float, p: JointPlantParams) -> float:
    d = p.dead_zone_pos if u >= 0 else p.dead_zone_neg
    return math.copysign(max(0.0, abs(u) - d) / (1.0 - d), u)


def play_operator(u: float, h: float, width: float) -> float:
    half = 0.5 * width
    if u > h + half:
        return u - half
    if u < h - half:
        return u + half
    return h


def step(state: JointState, u: float, dt: float, p: JointPlantParams, rng=None) -> JointState:
    """Advance the plant by one explicit step of length ``dt``.

    ``rng`` is a numpy Generator for encoder noise; None gives a noiseless
    reading.
    """
    if dt <= 0:
        raise InvalidInputError("dt must be positive")
    if not -1.0 <= u <= 1.0:
        raise InvalidInputError(f"command {u} outside [-1, 1]")
    u_dz = dead_zone(u, p)
    h = play_operator(u_dz, state.h, p.hysteresis_width)
    gain = p.gain_g0 * (1.0 + p.temp_coeff * (state.T - p.temp_ref)) * (state.rpm / p.engine_nominal_rpm)
    v_target = gain * h
    v = state.v + (dt / p.lag_tau) * (v_target - state.v)
    L = state.L + v * dt
    if L >= p.actuator_max:
        L, v = p.actuator_max, 0.0
    elif L <= p.actuator_min:
        L, v = p.actuator_min, 0.0
    theta = joint_angle(L, p)
    omega = joint_angle_derivative(L, p) * v
    s = theta + p.sensor_beta * math.sin(theta)
    if rng is not None and p.sensor_noise_std > 0:
        s += p.sensor_noise_std * rng.standard_normal()
    t = state.t + dt
    return JointState(t, u, h, v, L, theta, omega, s, warmup_temperature(t, p), state.rpm)


# --------------------------------------------------------------------------
# excitation


@dataclass(frozen=True)
class ChirpSpec:
    amp_start: float = 0.05
    amp_end: float = 0.6
    f0: float = 0.1
    f1: float = 1.5
    duration: float = 120.0

    def __post_init__(self):
        if self.f0 <= 0 or self.f1 <= 0 or self.duration <= 0:
            raise InvalidInputError("chirp frequencies and duration must be positive")
        if not (0 <= self.amp_start <= 1 and 0 <= self.amp_end <= 1):
            raise InvalidInputError("chirp amplitudes must lie in [0, 1]")


def gen_chirp(spec: ChirpSpec, t):
    """Linear chirp with a linear amplitude ramp."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or np.any(t_arr > spec.duration):
        raise InvalidInputError("chirp evaluated outside [0, duration]")
    amp = spec.amp_start + (spec.amp_end - spec.amp_start) * t_arr / spec.duration
    phase = spec.f0 * t_arr + (spec.f1 - spec.f0) * t_arr**2 / (2 * spec.duration)
    u = amp * np.sin(2 * np.pi * phase)
    return float(u) if np.ndim(u) == 0 else u


@dataclass(frozen=True)
class RandomWalk:
    step_std: float = 0.03
    max_step: float = 0.1


@dataclass(frozen=True)
class Replay:
    commands: tuple[float, ...]


# --------------------------------------------------------------------------
# logs


@dataclass
class DatasetLog:
    """Fixed-rate plant log; row k is the state at t_k and the command applied from t_k."""

    data: np.ndarray  # N × len(LOG_COLUMNS)
    dt: float
    params: JointPlantParams
    seed: int | None = None
    excitation: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 2 or self.data.shape[1] != len(LOG_COLUMNS):
            raise InvalidInputError("log data must be N × 10")

    def __len__(self):
        return len(self.data)

    def col(self, name: str) -> np.ndarray:
        return self.data[:, LOG_COLUMNS.index(name)]

    def __getattr__(self, name):
        if name in LOG_COLUMNS:
            return self.col(name)
        raise AttributeError(name)

    @property
    def sensor_vel(self) -> np.ndarray:
        return sensor_velocity(self.col("theta"), self.col("omega"), self.params)

    def sidecar(self) -> dict:
        return {
            "dt": self.dt,
            "params": self.params.to_json(),
            "params_hash": self.params.digest(),
            "seed": self.seed,
            "excitation": self.excitation,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in self.data:
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    def save(self, csv_path) -> None:
        csv_path = Path(csv_path)
        csv_path.write_text(self.to_csv())
        csv_path.with_suffix(".json").write_text(json.dumps(self.sidecar(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, csv_path) -> "DatasetLog":
        csv_path = Path(csv_path)
        with open(csv_path) as fh:
            rows = list(csv.reader(fh))
        if tuple(rows[0]) != LOG_COLUMNS:
            raise InvalidInputError(f"{csv_path}: unexpected header {rows[0]}")
        side = json.loads(csv_path.with_suffix(".json").read_text())
        data = np.array(rows[1:], dtype=float)
        return cls(data, float(side["dt"]), JointPlantParams.from_json(side["params"]),
                   side.get("seed"), side.get("excitation", {}))


def _excitation_desc(excitation) -> dict:
    if isinstance(excitation, ChirpSpec):
        return {"type": "chirp", **asdict(excitation)}
    if isinstance(excitation, RandomWalk):
        return {"type": "random_walk", **asdict(excitation)}
    if isinstance(excitation, Replay):
        return {"type": "replay", "n": len(excitation.commands)}
    raise InvalidInputError(f"unknown excitation {excitation!r}")


def safe_command(u: float, L: float, p: JointPlantParams, margin_frac=0.05, min_push=0.4) -> float:
    """Push the command back toward mid-range when within ``margin_frac`` of a limit."""
    margin = margin_frac * (p.actuator_max - p.actuator_min)
    if L > p.actuator_max - margin or L < p.actuator_min + margin:
        direction = 1.0 if p.actuator_mid > L else -1.0
        return direction * max(abs(u), min_push)
    return u


def collect_dataset(params: JointPlantParams, excitation, duration: float, dt: float = 0.01,
                    seed: int = 0, safety: bool = True, start_L: float | None = None,
                    t0: float = 0.0) -> DatasetLog:
    """Drive the plant from rest and log ``round(duration/dt)`` rows.

    The plant starts at rest at ``start_L`` (mid-stroke by default) at
    session time ``t0``, which sets where on the oil warm-up curve the log
    begins; excitation time is measured from the log start. With
    ``safety`` the command is overridden toward mid-stroke inside the last
    5 % of the actuator range on either side.
    """
    if duration <= 0 or dt <= 0:
        raise InvalidInputError("duration and dt must be positive")
    n = int(round(duration / dt))
    rng = np.random.default_rng(seed)
    state = rest_state(params, start_L)
    state = replace(state, t=t0, T=warmup_temperature(t0, params))
    u_walk = 0.0
    rows = np.empty((n, len(LOG_COLUMNS)))
    for k in range(n):
        t = k * dt
        if isinstance(excitation, ChirpSpec):
            u = gen_chirp(excitation, min(t, excitation.duration))
        elif isinstance(excitation, RandomWalk):
            inc = float(np.clip(rng.normal(0.0, excitation.step_std), -excitation.max_step, excitation.max_step))
            u_walk = min(1.0, max(-1.0, u_walk + inc))
            u = u_walk
        elif isinstance(excitation, Replay):
            u = float(excitation.commands[k]) if k < len(excitation.commands) else 0.0
        else:
            raise InvalidInputError(f"unknown excitation {excitation!r}")
        if safety:
            u = safe_command(u, state.L, params)
        state = replace(state, u=u)
        rows[k] = state.row()
        state = step(state, u, dt, params, rng)
    return DatasetLog(rows, dt, params, seed, _excitation_desc(excitation))


# --------------------------------------------------------------------------
# synthetic marker camera


@dataclass(frozen=True)
class MarkerCamera:
    principal_point: tuple[float, float] = (320.0, 240.0)
    pixels_per_m: float = 400.0
    marker_radius_m: float = 0.5


def render_markers(state, camera: MarkerCamera = MarkerCamera()):
    """Side-view pixel positions of the pivot marker and the link marker.

    ``state`` is a JointState or a joint angle in radians.
    """
    theta = state.theta if isinstance(state, JointState) else float(state)
    cx, cy = camera.principal_point
    r = camera.pixels_per_m * camera.marker_radius_m
    return (cx, cy), (cx + r * math.cos(theta), cy - r * math.sin(theta))
