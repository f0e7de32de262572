"""Synthetic scenario generation: trajectories, UWB range logs and IMU streams.

A `Scenario` fully determines a `MeasurementLog`; the same scenario (seed
included) always yields a bit-identical log.

Frame conventions:
    Global frame has Z up.  Gravity is the vector (0, 0, -9.81) m/s^2 and the
    accelerometer reports body-frame specific force as a + g, so a device at
    rest reads (0, 0, -9.81).
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq
from scipy.spatial.transform import Rotation

from . import GRAVITY, SPEED_OF_LIGHT

GRAVITY_VECTOR = np.array([0.0, 0.0, -GRAVITY])

# 5-point Gauss-Legendre nodes/weights on [-1, 1]
_GL_X, _GL_W = np.polynomial.legendre.leggauss(5)


class ScenarioError(ValueError):
    """Raised for scenarios that violate their invariants."""


@dataclass
class TrajectorySpec:
    """Waypoint path plus a speed profile.

    The path is a cubic spline through the waypoints, parameterised by
    cumulative chord length.  Speed follows a trapezoid with raised-cosine
    ramps (peak ramp acceleration `ramp_accel`), multiplied by optional
    sinusoidal modulation terms ``(relative_amplitude, period_s, phase_rad)``.
    `ramp_accel=None` starts at cruise speed immediately.  A single waypoint
    describes a static point held for `duration` seconds.
    """

    waypoints: list[list[float]]
    cruise_speed: float = 0.0
    ramp_accel: float | None = None
    hold_start: float = 0.0
    hold_end: float = 0.0
    duration: float | None = None
    speed_modulation: list[list[float]] = field(default_factory=list)


@dataclass
class ChannelModel:
    """UWB channel: LOS noise, bursty NLOS bias, outages, timestamp quantisation.

    ``nlos_prob_schedule[a]`` is a list of ``(t_from, p)`` breakpoints giving a
    piecewise-constant NLOS probability (0 before the first breakpoint).
    ``outage_schedule[a]`` lists closed ``(t0, t1)`` intervals during which
    anchor ``a`` produces no valid range.
    """

    los_range_sigma: float = 0.1
    nlos_bias_mean: float = 0.5
    nlos_bias_sigma: float = 0.3
    nlos_burst_s: float = 1.0
    nlos_prob_schedule: dict[int, list[list[float]]] = field(default_factory=dict)
    outage_schedule: dict[int, list[list[float]]] = field(default_factory=dict)
    timestamp_quantum: float = 15e-12
    quantize: bool = True

    def validate(self) -> None:
        if self.los_range_sigma < 0 or self.nlos_bias_sigma < 0:
            raise ScenarioError("channel sigmas must be >= 0")
        if self.nlos_bias_mean < 0:
            raise ScenarioError("nlos_bias_mean must be >= 0")
        if not self.timestamp_quantum > 0:
            raise ScenarioError("timestamp_quantum must be > 0")
        if not self.nlos_burst_s > 0:
            raise ScenarioError("nlos_burst_s must be > 0")
        for sched in self.nlos_prob_schedule.values():
            for _, p in sched:
                if not 0.0 <= p <= 1.0:
                    raise ScenarioError(f"NLOS probability {p} outside [0, 1]")
        for sched in self.outage_schedule.values():
            for t0, t1 in sched:
                if t1 < t0:
                    raise ScenarioError(f"outage interval ({t0}, {t1}) is reversed")

    def nlos_prob(self, anchor: int, t: np.ndarray) -> np.ndarray:
        sched = sorted(self.nlos_prob_schedule.get(anchor, []))
        out = np.zeros_like(t, dtype=float)
        for t_from, p in sched:
            out[t >= t_from] = p
        return out

    def in_outage(self, anchor: int, t: np.ndarray) -> np.ndarray:
        out = np.zeros(np.shape(t), dtype=bool)
        for t0, t1 in self.outage_schedule.get(anchor, []):
            out |= (t >= t0) & (t <= t1)
        return out


@dataclass
class ImuErrorModel:
    accel_bias0: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    accel_bias1: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    accel_noise: float = 0.0
    gyro_noise: float = 0.0
    # fixed body-to-global rotation, xyz Euler angles in degrees
    body_rotation_deg: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])


@dataclass
class Scenario:
    anchors: list[list[float]]
    trajectory: TrajectorySpec
    imu_rate: float = 400.0
    uwb_rate: float = 20.0
    ref_rate: float = 10.0
    seed: int = 0
    channel: ChannelModel = field(default_factory=ChannelModel)
    imu_errors: ImuErrorModel = field(default_factory=ImuErrorModel)
    ref_sigma: float = 0.0
    bounds: list[list[float]] = field(
        default_factory=lambda: [[-1e4, -1e4, -1e4], [1e4, 1e4, 1e4]]
    )

    def validate(self) -> None:
        anchors = np.asarray(self.anchors, dtype=float)
        if anchors.ndim != 2 or anchors.shape[1] != 3:
            raise ScenarioError("anchors must be a list of 3D positions")
        if not 1 <= len(anchors) <= 16:
            raise ScenarioError(f"need 1..16 anchors, got {len(anchors)}")
        if not np.all(np.isfinite(anchors)):
            raise ScenarioError("anchor positions must be finite")
        if not (self.imu_rate >= self.uwb_rate >= self.ref_rate > 0):
            raise ScenarioError("rates must satisfy imu_rate >= uwb_rate >= ref_rate > 0")
        if not 0 <= self.seed < 2**64:
            raise ScenarioError("seed must be a 64-bit unsigned integer")
        self.channel.validate()

    @property
    def n_anchors(self) -> int:
        return len(self.anchors)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        for key in ("nlos_prob_schedule", "outage_schedule"):
            d["channel"][key] = {str(k): v for k, v in d["channel"][key].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Scenario":
        d = dict(d)
        _reject_unknown(cls, d, "scenario")
        traj = d.pop("trajectory")
        _reject_unknown(TrajectorySpec, traj, "trajectory")
        channel = dict(d.pop("channel", {}))
        _reject_unknown(ChannelModel, channel, "channel")
        for key in ("nlos_prob_schedule", "outage_schedule"):
            if key in channel:
                channel[key] = {int(k): [list(x) for x in v] for k, v in channel[key].items()}
        imu = d.pop("imu_errors", {})
        _reject_unknown(ImuErrorModel, imu, "imu_errors")
        return cls(
            trajectory=TrajectorySpec(**traj),
            channel=ChannelModel(**channel),
            imu_errors=ImuErrorModel(**imu),
            **d,
        )


def _reject_unknown(cls, d: dict, what: str) -> None:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ScenarioError(f"unknown {what} keys: {sorted(unknown)}")


def load_scenario(path: str | Path) -> Scenario:
    with open(path) as fh:
        return Scenario.from_dict(json.load(fh))


def save_scenario(scenario: Scenario, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(scenario.to_dict(), fh, indent=2)


class Trajectory:
    """Evaluates position, velocity and acceleration of a `TrajectorySpec`."""

    def __init__(self, spec: TrajectorySpec):
        self.spec = spec
        wp = np.asarray(spec.waypoints, dtype=float)
        if wp.ndim != 2 or wp.shape[1] != 3 or len(wp) < 1:
            raise ScenarioError("waypoints must be a non-empty list of 3D points")
        if not np.all(np.isfinite(wp)):
            raise ScenarioError("waypoints must be finite")
        self._mods = np.asarray(spec.speed_modulation, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self._mods)):
            raise ScenarioError("speed modulation must be finite")
        if np.any(self._mods[:, 1] <= 0):
            raise ScenarioError("modulation periods must be > 0")
        if np.sum(np.abs(self._mods[:, 0])) >= 1.0:
            raise ScenarioError("modulation amplitudes must sum to < 1")

        self.static = len(wp) == 1
        if self.static:
            if spec.duration is None or not spec.duration > 0:
                raise ScenarioError("a static trajectory needs a positive duration")
            self._point = wp[0]
            self.length = 0.0
            self.motion_time = 0.0
            self.duration = float(spec.duration)
            return

        v = spec.cruise_speed
        if not (math.isfinite(v) and v > 0):
            raise ScenarioError(f"cruise speed must be finite and > 0, got {v}")
        a = spec.ramp_accel
        if a is not None and not (math.isfinite(a) and a > 0):
            raise ScenarioError(f"ramp acceleration must be finite and > 0, got {a}")
        chord = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(wp, axis=0), axis=1))])
        if np.any(np.diff(chord) <= 0):
            raise ScenarioError("consecutive waypoints must differ")
        self.length = float(chord[-1])
        self._spline = CubicSpline(chord, wp, bc_type="natural")
        self._d1 = self._spline.derivative(1)
        self._d2 = self._spline.derivative(2)
        self._ramp = 0.0 if a is None else math.pi * v / (2.0 * a)

        if a is None and len(self._mods) == 0:
            self._cruise = self.length / v
        else:
            lo = 0.0
            hi = 2.0 * self.length / (v * (1.0 - np.sum(np.abs(self._mods[:, 0])))) + 1.0
            if self._total_length(lo) > self.length:
                raise ScenarioError("ramps alone overshoot the path length")
            self._cruise = brentq(lambda c: self._total_length(c) - self.length, lo, hi,
                                  xtol=1e-13, rtol=4 * np.finfo(float).eps, maxiter=200)
        self.motion_time = 2.0 * self._ramp + self._cruise
        self.duration = spec.hold_start + self.motion_time + spec.hold_end
        self._build_grid()

    # speed profile on motion time tau in [0, motion_time]
    def _envelope(self, tau, cruise):
        v, r = self.spec.cruise_speed, self._ramp
        tau = np.asarray(tau, dtype=float)
        env = np.full_like(tau, v)
        denv = np.zeros_like(tau)
        if r > 0:
            up = tau < r
            env[up] = 0.5 * v * (1.0 - np.cos(np.pi * tau[up] / r))
            denv[up] = 0.5 * v * np.pi / r * np.sin(np.pi * tau[up] / r)
            t_down = r + cruise
            dn = tau > t_down
            x = np.minimum(tau[dn] - t_down, r)
            env[dn] = 0.5 * v * (1.0 + np.cos(np.pi * x / r))
            denv[dn] = -0.5 * v * np.pi / r * np.sin(np.pi * x / r)
        return env, denv

    def _modulation(self, tau):
        m = np.ones_like(tau)
        dm = np.zeros_like(tau)
        for amp, period, phase in self._mods:
            w = 2.0 * np.pi / period
            m += amp * np.sin(w * tau + phase)
            dm += amp * w * np.cos(w * tau + phase)
        return m, dm

    def _speed(self, tau, cruise=None):
        cruise = self._cruise if cruise is None else cruise
        env, denv = self._envelope(tau, cruise)
        m, dm = self._modulation(tau)
        return env * m, denv * m + env * dm

    def _integrate(self, t0, t1, cruise=None):
        """Integral of speed over [t0, t1] (elementwise arrays) by 5-point GL."""
        t0 = np.asarray(t0, dtype=float)
        t1 = np.asarray(t1, dtype=float)
        half = 0.5 * (t1 - t0)
        mid = 0.5 * (t1 + t0)
        nodes = mid[..., None] + half[..., None] * _GL_X
        v, _ = self._speed(nodes.ravel(), cruise)
        return half * (v.reshape(nodes.shape) @ _GL_W)

    def _total_length(self, cruise):
        total = 2.0 * self._ramp + cruise
        edges = np.linspace(0.0, total, max(int(total / 0.05), 1) + 1)
        return float(np.sum(self._integrate(edges[:-1], edges[1:], cruise)))

    def _build_grid(self):
        n = max(int(self.motion_time / 0.05), 1)
        self._grid = np.linspace(0.0, self.motion_time, n + 1)
        self._grid_s = np.concatenate(
            [[0.0], np.cumsum(self._integrate(self._grid[:-1], self._grid[1:]))]
        )

    def _arc(self, tau):
        idx = np.clip(np.searchsorted(self._grid, tau, side="right") - 1, 0, len(self._grid) - 2)
        s = self._grid_s[idx] + self._integrate(self._grid[idx], tau)
        return np.clip(s, 0.0, self.length)

    def arc_length(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.static:
            return np.zeros_like(t)
        tau = np.clip(t - self.spec.hold_start, 0.0, self.motion_time)
        return self._arc(tau)

    def evaluate(self, t):
        """Return (position, velocity, acceleration), each shaped (len(t), 3)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.static:
            pos = np.tile(self._point, (len(t), 1))
            return pos, np.zeros_like(pos), np.zeros_like(pos)
        tau = t - self.spec.hold_start
        moving = (tau > 0) & (tau < self.motion_time)
        tau_c = np.clip(tau, 0.0, self.motion_time)
        s = self._arc(tau_c)
        v, dv = self._speed(tau_c)
        v = np.where(moving, v, 0.0)
        dv = np.where(moving, dv, 0.0)
        d1 = self._d1(s)
        pos = self._spline(s)
        vel = d1 * v[:, None]
        acc = self._d2(s) * (v * v)[:, None] + d1 * dv[:, None]
        return pos, vel, acc


@dataclass
class MeasurementLog:
    """Time-aligned sensor streams plus dense ground truth.

    UWB records with ``uwb_valid == False`` carry ``NaN`` in `uwb_range`.
    """

    anchors: np.ndarray
    imu_rate: float
    uwb_rate: float
    ref_rate: float
    imu_t: np.ndarray
    accel: np.ndarray
    gyro: np.ndarray
    uwb_t: np.ndarray
    uwb_anchor: np.ndarray
    uwb_range: np.ndarray
    uwb_valid: np.ndarray
    ref_t: np.ndarray
    ref_pos: np.ndarray
    truth_t: np.ndarray
    truth_pos: np.ndarray
    truth_vel: np.ndarray

    @property
    def n_anchors(self) -> int:
        return len(self.anchors)

    @property
    def has_truth(self) -> bool:
        return len(self.truth_t) > 0

    def truth_at(self, t) -> np.ndarray:
        """Cubic Hermite interpolation of the truth position at times `t`."""
        if not self.has_truth:
            raise ValueError("log carries no ground truth")
        t = np.atleast_1d(np.asarray(t, dtype=float))
        tt, p, v = self.truth_t, self.truth_pos, self.truth_vel
        i = np.clip(np.searchsorted(tt, t, side="right") - 1, 0, len(tt) - 2)
        h = tt[i + 1] - tt[i]
        x = ((t - tt[i]) / h)[:, None]
        h = h[:, None]
        h00 = 2 * x**3 - 3 * x**2 + 1
        h10 = x**3 - 2 * x**2 + x
        h01 = -2 * x**3 + 3 * x**2
        h11 = x**3 - x**2
        return h00 * p[i] + h10 * h * v[i] + h01 * p[i + 1] + h11 * h * v[i + 1]

    def equals(self, other: "MeasurementLog") -> bool:
        for f in dataclasses.fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray):
                if a.shape != b.shape or a.tobytes() != np.asarray(b, dtype=a.dtype).tobytes():
                    return False
            elif a != b:
                return False
        return True


def generate(scenario: Scenario) -> MeasurementLog:
    """Simulate all sensor streams for `scenario`."""
    scenario.validate()
    traj = Trajectory(scenario.trajectory)
    anchors = np.asarray(scenario.anchors, dtype=float)
    ch = scenario.channel
    rng_uwb, rng_nlos, rng_imu, rng_ref = (
        np.random.default_rng(s) for s in np.random.SeedSequence(scenario.seed).spawn(4)
    )

    duration = traj.duration
    imu_t = np.arange(int(math.floor(duration * scenario.imu_rate + 1e-9)) + 1) / scenario.imu_rate
    pos, vel, acc = traj.evaluate(imu_t)
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(acc))):
        raise ScenarioError("trajectory produced non-finite samples")
    lo, hi = np.asarray(scenario.bounds, dtype=float)
    if np.any(pos < lo) or np.any(pos > hi):
        raise ScenarioError("trajectory leaves the scenario bounding box")

    # IMU: body-frame specific force plus first-order bias and white noise
    err = scenario.imu_errors
    rot = Rotation.from_euler("xyz", err.body_rotation_deg, degrees=True).as_matrix()
    b0 = np.asarray(err.accel_bias0, dtype=float)
    b1 = np.asarray(err.accel_bias1, dtype=float)
    accel = (acc + GRAVITY_VECTOR) @ rot + b0 + imu_t[:, None] * b1
    if err.accel_noise > 0:
        accel = accel + rng_imu.normal(0.0, err.accel_noise, accel.shape)
    gyro = np.zeros_like(accel)
    if err.gyro_noise > 0:
        gyro = gyro + rng_imu.normal(0.0, err.gyro_noise, gyro.shape)

    # UWB: one staggered record per anchor per slot
    n_a = len(anchors)
    slot = 1.0 / scenario.uwb_rate
    n_slots = int(math.floor(duration * scenario.uwb_rate + 1e-9)) + 1
    offsets = np.arange(n_a) * slot / n_a
    uwb_t = (np.arange(n_slots)[:, None] * slot + offsets[None, :]).ravel()
    uwb_anchor = np.tile(np.arange(n_a), n_slots)
    keep = uwb_t <= duration
    uwb_t, uwb_anchor = uwb_t[keep], uwb_anchor[keep]
    p_uwb, _, _ = traj.evaluate(uwb_t)
    geom = np.linalg.norm(p_uwb - anchors[uwb_anchor], axis=1)

    noise = rng_uwb.normal(0.0, 1.0, len(uwb_t)) * ch.los_range_sigma
    bias = np.zeros(len(uwb_t))
    valid = np.ones(len(uwb_t), dtype=bool)
    for a in range(n_a):
        idx = np.flatnonzero(uwb_anchor == a)
        bias[idx] = _nlos_bias(ch, a, uwb_t[idx], slot, rng_nlos)
        valid[idx] = ~ch.in_outage(a, uwb_t[idx])
    rng = geom + noise + bias
    if ch.quantize:
        q = ch.timestamp_quantum * SPEED_OF_LIGHT
        rng = np.round(rng / q) * q
    rng = np.maximum(rng, 0.0)
    rng[~valid] = np.nan

    n_ref = int(math.floor(duration * scenario.ref_rate + 1e-9)) + 1
    ref_t = np.arange(n_ref) / scenario.ref_rate
    ref_pos, _, _ = traj.evaluate(ref_t)
    if scenario.ref_sigma > 0:
        ref_pos = ref_pos + rng_ref.normal(0.0, scenario.ref_sigma, ref_pos.shape)

    return MeasurementLog(
        anchors=anchors,
        imu_rate=float(scenario.imu_rate),
        uwb_rate=float(scenario.uwb_rate),
        ref_rate=float(scenario.ref_rate),
        imu_t=imu_t,
        accel=accel,
        gyro=gyro,
        uwb_t=uwb_t,
        uwb_anchor=uwb_anchor.astype(np.int64),
        uwb_range=rng,
        uwb_valid=valid,
        ref_t=ref_t,
        ref_pos=ref_pos,
        truth_t=imu_t.copy(),
        truth_pos=pos,
        truth_vel=vel,
    )


def _nlos_bias(ch: ChannelModel, anchor: int, t: np.ndarray, step: float, rng) -> np.ndarray:
    """Two-state Markov NLOS process; one bias draw per contiguous NLOS burst."""
    p = ch.nlos_prob(anchor, t)
    u = rng.random(len(t))
    draws = rng.normal(ch.nlos_bias_mean, ch.nlos_bias_sigma, len(t))
    leave = min(step / ch.nlos_burst_s, 1.0)
    out = np.zeros(len(t))
    state = False
    current = 0.0
    for k in range(len(t)):
        pk = p[k]
        if pk <= 0.0:
            nxt = False
        elif pk >= 1.0:
            nxt = True
        elif state:
            nxt = u[k] >= leave
        else:
            nxt = u[k] < (pk if k == 0 else min(leave * pk / (1.0 - pk), 1.0))
        if nxt and not state:
            current = max(draws[k], 0.0)
        state = nxt
        if state:
            out[k] = current
    return out


def visibility_series(log: MeasurementLog, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Number of anchors with at least one valid range in each bin of width `dt`."""
    if not dt > 0:
        raise ValueError("dt must be > 0")
    if len(log.uwb_t) == 0:
        return np.zeros(0), np.zeros(0, dtype=int)
    t0 = math.floor(log.uwb_t[0] / dt) * dt
    bins = np.floor((log.uwb_t - t0) / dt + 1e-9).astype(np.int64)
    n_bins = int(bins[-1]) + 1
    seen = np.zeros((n_bins, log.n_anchors), dtype=bool)
    v = log.uwb_valid
    seen[bins[v], log.uwb_anchor[v]] = True
    return t0 + np.arange(n_bins) * dt, seen.sum(axis=1)


# --- JSON-Lines serialisation -------------------------------------------------

def _num(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        return "null"
    return format(x, ".17g")


def _vec(v) -> str:
    return "[" + ",".join(_num(x) for x in v) + "]"


def write_log(log: MeasurementLog, path: str | Path) -> None:
    """Write `log` as JSON-Lines, one record per line, floats at 17 significant digits."""
    with open(path, "w") as fh:
        fh.write(
            '{"kind":"meta","anchors":[' + ",".join(_vec(a) for a in log.anchors) + "]"
            f',"imu_rate":{_num(log.imu_rate)},"uwb_rate":{_num(log.uwb_rate)}'
            f',"ref_rate":{_num(log.ref_rate)}}}\n'
        )
        for t, a, g in zip(log.imu_t, log.accel, log.gyro):
            fh.write(f'{{"kind":"imu","t":{_num(t)},"accel":{_vec(a)},"gyro":{_vec(g)}}}\n')
        for t, a, r, ok in zip(log.uwb_t, log.uwb_anchor, log.uwb_range, log.uwb_valid):
            rs = _num(r) if ok else "null"
            fh.write(
                f'{{"kind":"uwb","t":{_num(t)},"anchor_id":{int(a)},"range":{rs},'
                f'"valid":{"true" if ok else "false"}}}\n'
            )
        for t, p in zip(log.ref_t, log.ref_pos):
            fh.write(f'{{"kind":"ref","t":{_num(t)},"position":{_vec(p)}}}\n')
        for t, p, v in zip(log.truth_t, log.truth_pos, log.truth_vel):
            fh.write(
                f'{{"kind":"truth","t":{_num(t)},"position":{_vec(p)},"velocity":{_vec(v)}}}\n'
            )


def read_log(path: str | Path) -> MeasurementLog:
    meta = None
    imu, uwb, ref, truth = [], [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.get("kind")
            if kind == "imu":
                imu.append((rec["t"], *rec["accel"], *rec["gyro"]))
            elif kind == "uwb":
                r = rec["range"]
                uwb.append((rec["t"], rec["anchor_id"], np.nan if r is None else r, rec["valid"]))
            elif kind == "ref":
                ref.append((rec["t"], *rec["position"]))
            elif kind == "truth":
                truth.append((rec["t"], *rec["position"], *rec.get("velocity", [0.0] * 3)))
            elif kind == "meta":
                meta = rec
            else:
                raise ValueError(f"{path}:{lineno}: unknown record kind {kind!r}")
    if meta is None:
        raise ValueError(f"{path}: missing meta record")

    def arr(rows, width):
        return np.asarray(rows, dtype=float).reshape(-1, width)

    imu_a, ref_a, truth_a = arr(imu, 7), arr(ref, 4), arr(truth, 7)
    uwb_t = np.asarray([u[0] for u in uwb], dtype=float)
    uwb_valid = np.asarray([u[3] for u in uwb], dtype=bool)
    uwb_range = np.asarray([u[2] for u in uwb], dtype=float)
    uwb_range[~uwb_valid] = np.nan
    return MeasurementLog(
        anchors=np.asarray(meta["anchors"], dtype=float).reshape(-1, 3),
        imu_rate=float(meta["imu_rate"]),
        uwb_rate=float(meta["uwb_rate"]),
        ref_rate=float(meta["ref_rate"]),
        imu_t=imu_a[:, 0].copy(),
        accel=imu_a[:, 1:4].copy(),
        gyro=imu_a[:, 4:7].copy(),
        uwb_t=uwb_t,
        uwb_anchor=np.asarray([u[1] for u in uwb], dtype=np.int64),
        uwb_range=uwb_range,
        uwb_valid=uwb_valid,
        ref_t=ref_a[:, 0].copy(),
        ref_pos=ref_a[:, 1:4].copy(),
        truth_t=truth_a[:, 0].copy(),
        truth_pos=truth_a[:, 1:4].copy(),
        truth_vel=truth_a[:, 4:7].copy(),
    )
