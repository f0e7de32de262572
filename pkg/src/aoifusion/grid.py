"""Resampling a MeasurementLog onto the UWB slot grid shared by all fusion methods.

Slot k spans [k/rate, (k+1)/rate).  IMU accelerations are bias-corrected,
gravity-compensated and averaged within each slot; each anchor's ranges in a
slot are averaged; truth positions are sampled at the slot boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imuprep import BiasCorrection, optimize_bias, to_global
from .sim import MeasurementLog


class RateMismatchError(ValueError):
    pass


@dataclass
class GridSequence:
    t: np.ndarray            # (K+1,) slot boundaries
    U: np.ndarray            # (K, 3) global, gravity-free accelerations
    D: np.ndarray            # (K, A) ranges, NaN where missing
    M: np.ndarray            # (K, A) 1.0 where a valid range exists
    P: np.ndarray | None     # (K+1, 3) truth at slot boundaries
    G: np.ndarray | None     # (K, A) geometric ranges at the record times
    anchors: np.ndarray
    rate: float
    bias: BiasCorrection | None = None

    @property
    def n_steps(self) -> int:
        return len(self.U)

    @property
    def n_anchors(self) -> int:
        return self.D.shape[1]


def corrected_accel(log: MeasurementLog, bias="auto", x_ref=None):
    """Global gravity-free accelerations after first-order bias fitting.

    With ``bias="auto"`` the fit targets `x_ref` (displacement from the start),
    defaulting to the truth displacement when the log carries truth.  Pass
    ``bias=None`` to skip the correction.
    """
    accel = log.accel
    corr = None
    if bias == "auto":
        if x_ref is None and log.has_truth:
            x_ref = log.truth_pos[-1] - log.truth_pos[0]
        if x_ref is not None:
            dt = 1.0 / log.imu_rate
            corr = optimize_bias(accel, None, dt, x_ref, t=log.imu_t)
            accel = corr.apply(accel, log.imu_t)
    elif isinstance(bias, BiasCorrection):
        corr = bias
        accel = corr.apply(accel, log.imu_t)
    return to_global(accel), corr


def resample(log: MeasurementLog, rate: float | None = None, bias="auto", x_ref=None) -> GridSequence:
    rate = log.uwb_rate if rate is None else float(rate)
    if rate > log.imu_rate or rate <= 0:
        raise RateMismatchError(f"model rate {rate} cannot be fed by IMU at {log.imu_rate} Hz")
    if len(log.uwb_t):
        per_slot = log.uwb_rate / rate
        if abs(per_slot - round(per_slot)) > 1e-9:
            raise RateMismatchError(f"UWB rate {log.uwb_rate} is not a multiple of {rate}")
    t_end = log.imu_t[-1] if len(log.imu_t) else 0.0
    K = int(np.floor(t_end * rate + 1e-9))
    A = log.n_anchors
    grid_t = np.arange(K + 1) / rate

    acc, corr = corrected_accel(log, bias, x_ref)
    slot = np.floor(log.imu_t * rate + 1e-9).astype(np.int64)
    keep = slot < K
    counts = np.bincount(slot[keep], minlength=K)
    if K and np.any(counts == 0):
        raise RateMismatchError("some slots contain no IMU samples")
    U = np.stack([np.bincount(slot[keep], weights=acc[keep, i], minlength=K) for i in range(3)], axis=1)
    U = U / np.maximum(counts, 1)[:, None]

    D = np.full((K, A), np.nan)
    M = np.zeros((K, A))
    G = np.full((K, A), np.nan) if log.has_truth else None
    us = np.floor(log.uwb_t * rate + 1e-9).astype(np.int64)
    ok = us < K
    if log.has_truth and ok.any():
        geom_all = np.linalg.norm(log.truth_at(log.uwb_t[ok]) - log.anchors[log.uwb_anchor[ok]], axis=1)
    sums = np.zeros((K, A))
    n = np.zeros((K, A))
    gsum = np.zeros((K, A))
    gn = np.zeros((K, A))
    idx_ok = np.flatnonzero(ok)
    for j, i in enumerate(idx_ok):
        k, a = us[i], log.uwb_anchor[i]
        if log.uwb_valid[i]:
            sums[k, a] += log.uwb_range[i]
            n[k, a] += 1
        if G is not None:
            gsum[k, a] += geom_all[j]
            gn[k, a] += 1
    has = n > 0
    D[has] = sums[has] / n[has]
    M[has] = 1.0
    if G is not None:
        hg = gn > 0
        G[hg] = gsum[hg] / gn[hg]

    P = log.truth_at(grid_t) if log.has_truth else None
    return GridSequence(t=grid_t, U=U, D=D, M=M, P=P, G=G, anchors=log.anchors, rate=rate, bias=corr)
