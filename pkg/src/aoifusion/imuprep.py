"""Gravity compensation, explicit-Euler integration and first-order bias fitting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .sim import GRAVITY_VECTOR


class IllConditionedError(np.linalg.LinAlgError):
    pass


@dataclass
class BiasCorrection:
    """Correction a~(t) = a(t) + a0 + a1 * t applied to body-frame accelerations."""

    a0: np.ndarray
    a1: np.ndarray

    def apply(self, accel: np.ndarray, t: np.ndarray) -> np.ndarray:
        return accel + self.a0 + np.asarray(t)[:, None] * self.a1


def to_global(accel, orientation=None) -> np.ndarray:
    """Rotate body-frame specific force to the global frame and remove gravity.

    `orientation` is None (identity), a single 3x3 matrix, or an (N, 3, 3)
    stack of body-to-global rotations.
    """
    accel = np.asarray(accel, dtype=float)
    if orientation is None:
        glob = accel
    else:
        R = np.asarray(orientation, dtype=float)
        if R.ndim == 2:
            glob = accel @ R.T
        else:
            glob = np.einsum("nij,nj->ni", R, accel)
    return glob - GRAVITY_VECTOR


def integrate(accel, orientation, dt: float):
    """Explicit Euler from rest at the origin.

    v[k+1] = v[k] + a[k] dt and p[k+1] = p[k] + v[k] dt; returns (v, p) with
    N+1 rows for N acceleration samples.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    a = to_global(accel, orientation)
    n = len(a)
    v = np.zeros((n + 1, 3))
    p = np.zeros((n + 1, 3))
    v[1:] = np.cumsum(a, axis=0) * dt
    p[1:] = np.cumsum(v[:-1], axis=0) * dt
    return v, p


def integrate_gyro(gyro, dt: float, initial=None) -> np.ndarray:
    """First-order quaternion propagation of body rates; returns (N, 3, 3) rotations."""
    q = Rotation.identity() if initial is None else Rotation.from_matrix(initial)
    mats = np.empty((len(gyro), 3, 3))
    for k, w in enumerate(np.asarray(gyro, dtype=float)):
        mats[k] = q.as_matrix()
        q = q * Rotation.from_rotvec(w * dt)
    return mats


def terminal_state(accel, orientation, dt: float, t=None, correction: BiasCorrection | None = None):
    if correction is not None:
        t = np.arange(len(accel)) * dt if t is None else t
        accel = correction.apply(accel, t)
    v, p = integrate(accel, orientation, dt)
    return v[-1], p[-1]


def cost(accel, orientation, dt: float, x_ref, t=None, correction=None) -> float:
    """F = |v_final|^2 + |x_final - x_ref|^2."""
    v, p = terminal_state(accel, orientation, dt, t, correction)
    return float(v @ v + (p - x_ref) @ (p - x_ref))


def optimize_bias(accel, orientation, dt: float, x_ref, t=None, max_cond: float = 1e12) -> BiasCorrection:
    """Fit (a0, a1) so the corrected run ends at rest at `x_ref`.

    The terminal state is affine in (a0, a1), so the six-parameter minimiser
    comes from a single 6x6 linear solve.  Time `t` defaults to k * dt.
    """
    accel = np.asarray(accel, dtype=float)
    n = len(accel)
    if n == 0 or not dt > 0:
        raise ValueError("need a non-empty run with dt > 0")
    t = np.arange(n) * dt if t is None else np.asarray(t, dtype=float)
    x_ref = np.asarray(x_ref, dtype=float)

    zero = np.zeros(3)
    v0, p0 = terminal_state(accel, orientation, dt, t, BiasCorrection(zero, zero))
    base = np.concatenate([v0, p0 - x_ref])
    # columns of the affine map via superposition on a zero input
    blank = np.tile(GRAVITY_VECTOR, (n, 1)) if orientation is None else _gravity_only(orientation, n)
    J = np.empty((6, 6))
    for j in range(6):
        c = np.zeros(6)
        c[j] = 1.0
        corr = BiasCorrection(c[:3], c[3:])
        vj, pj = terminal_state(blank, orientation, dt, t, corr)
        J[:, j] = np.concatenate([vj, pj])
    cond = np.linalg.cond(J)
    if not cond < max_cond:
        raise IllConditionedError(f"bias system condition number {cond:.3g} exceeds {max_cond:.3g}")
    sol = np.linalg.solve(J, -base)
    return BiasCorrection(a0=sol[:3], a1=sol[3:])


def _gravity_only(orientation, n):
    """Body-frame readings that integrate to exactly zero motion."""
    R = np.asarray(orientation, dtype=float)
    if R.ndim == 2:
        R = np.broadcast_to(R, (n, 3, 3))
    return np.einsum("nji,j->ni", R, GRAVITY_VECTOR)
