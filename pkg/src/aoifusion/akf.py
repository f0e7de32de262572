"""Loose-coupled baseline: 9-state constant-acceleration adaptive Kalman filter.

State is [position, velocity, acceleration] in the global frame.  Trilaterated
UWB fixes update the position block (with innovation-based R adaptation and
GDOP scaling); IMU accelerations update the acceleration block.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

H_POS = np.hstack([np.eye(3), np.zeros((3, 6))])
H_ACC = np.hstack([np.zeros((3, 6)), np.eye(3)])


class SingularInnovationError(np.linalg.LinAlgError):
    pass


class InsufficientWindowError(ValueError):
    pass


@dataclass
class AkfConfig:
    q0: float = 0.5            # jerk noise intensity per axis
    window: int = 50           # innovations kept for R adaptation
    adapt_min: int = 10        # innovations needed before R is re-estimated
    # eigenvalue floor for adapted R in the filter loop, m^2; near-zero floors let R
    # collapse early, P follows and the filter diverges
    r_floor: float = 0.01
    gdop_ref: float = 2.0      # g0 in alpha(g) = max(1, g / g0)
    r_uwb0: float = 1.0        # initial UWB position variance, m^2
    r_imu: float = 0.05        # IMU acceleration variance, (m/s^2)^2
    p0_pos: float = 1.0
    p0_vel: float = 1.0
    p0_acc: float = 1.0


@dataclass
class AkfState:
    x: np.ndarray
    P: np.ndarray
    R_uwb: np.ndarray
    R_imu: np.ndarray
    innovations: deque = field(default_factory=lambda: deque(maxlen=50))
    last_hph: np.ndarray | None = None
    hph_window: deque = field(default_factory=lambda: deque(maxlen=50))

    @classmethod
    def initial(cls, position, cfg: AkfConfig | None = None, velocity=None) -> "AkfState":
        cfg = cfg or AkfConfig()
        x = np.zeros(9)
        x[:3] = position
        if velocity is not None:
            x[3:6] = velocity
        P = np.diag([cfg.p0_pos] * 3 + [cfg.p0_vel] * 3 + [cfg.p0_acc] * 3).astype(float)
        return cls(
            x=x,
            P=P,
            R_uwb=np.eye(3) * cfg.r_uwb0,
            R_imu=np.eye(3) * cfg.r_imu,
            innovations=deque(maxlen=cfg.window),
            hph_window=deque(maxlen=cfg.window),
        )

    def copy(self) -> "AkfState":
        return AkfState(
            x=self.x.copy(),
            P=self.P.copy(),
            R_uwb=self.R_uwb.copy(),
            R_imu=self.R_imu.copy(),
            innovations=deque(self.innovations, maxlen=self.innovations.maxlen),
            last_hph=None if self.last_hph is None else self.last_hph.copy(),
            hph_window=deque(self.hph_window, maxlen=self.hph_window.maxlen),
        )


def transition(dt: float) -> np.ndarray:
    F = np.eye(9)
    I3 = np.eye(3)
    F[0:3, 3:6] = dt * I3
    F[0:3, 6:9] = 0.5 * dt * dt * I3
    F[3:6, 6:9] = dt * I3
    return F


def process_noise(dt: float, q0: float) -> np.ndarray:
    """Q = G Q0 G^T with G the jerk input gain of the constant-acceleration model."""
    g = np.array([dt**3 / 6.0, dt**2 / 2.0, dt])
    block = q0 * np.outer(g, g)
    return np.kron(block, np.eye(3))


def predict(state: AkfState, dt: float, Q: np.ndarray | None = None, q0: float = 0.5) -> AkfState:
    if not dt > 0:
        raise ValueError("dt must be > 0")
    F = transition(dt)
    Q = process_noise(dt, q0) if Q is None else Q
    out = state.copy()
    out.x = F @ state.x
    P = F @ state.P @ F.T + Q
    out.P = 0.5 * (P + P.T)
    return out


def update(state: AkfState, z, H: np.ndarray, R: np.ndarray, record: bool = True, scale: float = 1.0) -> AkfState:
    """Kalman measurement update; the innovation is pushed to the window when `record`.

    `scale` is the factor R was inflated by (alpha(g) for GDOP scaling); the
    recorded innovation and H P H^T are divided by it so the window estimates
    the unscaled noise.
    """
    z = np.asarray(z, dtype=float)
    y = z - H @ state.x
    hph = H @ state.P @ H.T
    K = state.P @ H.T @ _innovation_inverse(hph + R, y, z)
    out = state.copy()
    out.x = state.x + K @ y
    # Joseph form keeps P symmetric PSD even when R = 0
    I_KH = np.eye(len(state.x)) - K @ H
    P = I_KH @ state.P @ I_KH.T + K @ R @ K.T
    out.P = 0.5 * (P + P.T)
    if record:
        out.innovations.append(y / scale)
        out.last_hph = hph / scale**2
        out.hph_window.append(out.last_hph)
    return out


def _innovation_inverse(S: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Inverse of S, or its pseudo-inverse when S is rank deficient.

    A rank-deficient S arises when the state is already exactly known along
    some measured direction (R = 0 limits).  The update is then well defined
    only if the innovation has no component outside the range of S.
    """
    S = 0.5 * (S + S.T)
    if not np.all(np.isfinite(S)):
        raise SingularInnovationError("innovation covariance is not finite")
    w, V = np.linalg.eigh(S)
    top = float(np.abs(w).max())
    keep = w > 1e-12 * top if top > 0 else np.zeros(len(w), dtype=bool)
    if not keep.all():
        if np.linalg.norm(V[:, ~keep].T @ y) > 1e-9 * (1.0 + np.linalg.norm(z)):
            raise SingularInnovationError("innovation covariance is singular")
    return (V[:, keep] / w[keep]) @ V[:, keep].T


def psd_floor(M: np.ndarray, floor: float) -> np.ndarray:
    M = 0.5 * (M + M.T)
    w, V = np.linalg.eigh(M)
    return (V * np.maximum(w, floor)) @ V.T


def innovation_covariance(innovations) -> np.ndarray:
    Y = np.asarray(list(innovations), dtype=float)
    if len(Y) < 2:
        raise InsufficientWindowError("need at least 2 innovations")
    return Y.T @ Y / (len(Y) - 1)


def adapt_r(state: AkfState, floor: float = 1e-6, hph: np.ndarray | None = None) -> AkfState:
    """R <- floor_eig(C_hat - H P H^T) from the innovation window.

    H P H^T defaults to its average over the same window, so it matches the
    innovations that C_hat was built from.
    """
    C = innovation_covariance(state.innovations)
    if hph is None:
        hph = np.mean(list(state.hph_window), axis=0) if state.hph_window else np.zeros_like(C)
    out = state.copy()
    out.R_uwb = psd_floor(C - hph, floor)
    return out


def gdop_scale(g: float, g0: float = 2.0) -> float:
    return max(1.0, g / g0)


def scale_r_by_gdop(R: np.ndarray, g: float, g0: float = 2.0) -> np.ndarray:
    if not g > 0:
        raise ValueError("GDOP must be > 0")
    return gdop_scale(g, g0) ** 2 * np.asarray(R, dtype=float)


def run(times, accel, fixes, start, cfg: AkfConfig | None = None, start_velocity=None):
    """Filter over a common time grid.

    Args:
        times: (K,) grid timestamps.
        accel: (K, 3) gravity-free global accelerations per grid step, or None.
        fixes: mapping grid index -> (position, gdop) for accepted UWB fixes.
        start: initial position.

    Returns:
        (K, 9) filtered states.
    """
    cfg = cfg or AkfConfig()
    state = AkfState.initial(start, cfg, start_velocity)
    out = np.empty((len(times), 9))
    for k, t in enumerate(times):
        if k > 0:
            state = predict(state, t - times[k - 1], q0=cfg.q0)
        if accel is not None:
            state = update(state, accel[k], H_ACC, state.R_imu, record=False)
        if k in fixes:
            pos, g = fixes[k]
            R = state.R_uwb
            a = 1.0
            if np.isfinite(g):
                a = gdop_scale(g, cfg.gdop_ref)
                R = scale_r_by_gdop(R, g, cfg.gdop_ref)
            state = update(state, pos, H_POS, R, scale=a)
            if len(state.innovations) >= max(cfg.adapt_min, 2):
                state = adapt_r(state, cfg.r_floor)
        out[k] = state.x
    return out
