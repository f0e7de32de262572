"""The shipped reference scenario and its per-run variations.

Every run follows the same route past the same anchors.  Runs differ in cruise
speed, speed-modulation phase, dropout bursts, full outages and channel noise,
which is what the train/validation/test split at sequence level relies on.
"""

from __future__ import annotations

import json
from importlib import resources

import numpy as np

from .sim import ChannelModel, ImuErrorModel, Scenario, Trajectory, TrajectorySpec


def load_template(name: str = "reference_scenario.json") -> dict:
    return json.loads(resources.files("aoifusion.data").joinpath(name).read_text())


def _intervals(hidden: np.ndarray, slot: float, n_anchors: int) -> list[list[float]]:
    """Closed time intervals covering every staggered record of the hidden slots."""
    out = []
    k = np.flatnonzero(hidden)
    if len(k) == 0:
        return out
    breaks = np.flatnonzero(np.diff(k) > 1)
    starts = np.r_[k[0], k[breaks + 1]]
    ends = np.r_[k[breaks], k[-1]]
    tail = slot * (n_anchors - 0.5) / n_anchors
    for k0, k1 in zip(starts, ends):
        out.append([float(k0 * slot), float(k1 * slot + tail)])
    return out


def reference_scenario(run: int = 0, seed: int = 0, template: dict | None = None) -> Scenario:
    """Concrete scenario for one traversal of the reference route."""
    tpl = load_template() if template is None else template
    rng = np.random.default_rng([int(seed), int(run), 0x5EED])
    anchors = np.asarray(tpl["anchors"], dtype=float)
    n_a = len(anchors)

    jitter = float(np.clip(rng.normal(), -3.0, 3.0)) * tpl["cruise_speed_jitter"]
    mods = [
        [amp * rng.uniform(0.8, 1.2), period, rng.uniform(0.0, 2.0 * np.pi)]
        for amp, period in tpl["speed_modulation"]
    ]
    spec = TrajectorySpec(
        waypoints=tpl["waypoints"],
        cruise_speed=tpl["cruise_speed"] * (1.0 + jitter),
        ramp_accel=tpl["ramp_accel"],
        hold_start=tpl["hold_start"],
        hold_end=tpl["hold_end"],
        speed_modulation=mods,
    )
    traj = Trajectory(spec)
    rates = tpl["rates"]
    slot = 1.0 / rates["uwb"]
    n_slots = int(np.floor(traj.duration * rates["uwb"] + 1e-9)) + 1
    t_slot = np.arange(n_slots) * slot
    frac = traj.arc_length(t_slot) / traj.length
    pos, _, _ = traj.evaluate(t_slot)

    zones = np.asarray(tpl["visibility_zones"], dtype=float)
    visible = (frac[:, None] >= zones[None, :, 0]) & (frac[:, None] <= zones[None, :, 1])

    drop = tpl["dropouts"]
    for a in range(n_a):
        n_bursts = rng.poisson(drop["rate_per_s"] * traj.duration)
        for _ in range(n_bursts):
            t0 = rng.uniform(0.0, traj.duration)
            t1 = t0 + rng.uniform(drop["min_s"], drop["max_s"])
            visible[(t_slot >= t0) & (t_slot <= t1), a] = False

    full = tpl["full_outages"]
    lo, hi = spec.hold_start + 5.0, traj.duration - spec.hold_end - 5.0
    for _ in range(full["count"]):
        t0 = rng.uniform(lo, hi)
        t1 = t0 + rng.uniform(full["min_s"], full["max_s"])
        visible[(t_slot >= t0) & (t_slot <= t1), :] = False

    dist = np.linalg.norm(pos[:, None, :] - anchors[None, :, :], axis=2)
    cap = tpl["max_visible"]
    for k in np.flatnonzero(visible.sum(axis=1) > cap):
        ids = np.flatnonzero(visible[k])
        visible[k, ids[np.argsort(dist[k, ids])[cap:]]] = False

    ch_tpl = tpl["channel"]
    fine_t = np.linspace(0.0, traj.duration, 20001)
    fine_f = traj.arc_length(fine_t) / traj.length
    schedule = []
    base = ch_tpl["base_nlos_prob"]
    schedule.append([0.0, base])
    for f0, f1, p in ch_tpl["nlos_segments"]:
        schedule.append([float(fine_t[np.searchsorted(fine_f, f0)]), p])
        schedule.append([float(fine_t[min(np.searchsorted(fine_f, f1), len(fine_t) - 1)]), base])

    channel = ChannelModel(
        los_range_sigma=ch_tpl["los_range_sigma"],
        nlos_bias_mean=ch_tpl["nlos_bias_mean"],
        nlos_bias_sigma=ch_tpl["nlos_bias_sigma"],
        nlos_burst_s=ch_tpl["nlos_burst_s"],
        nlos_prob_schedule={a: [list(s) for s in schedule] for a in range(n_a)},
        outage_schedule={a: _intervals(~visible[:, a], slot, n_a) for a in range(n_a)},
    )
    return Scenario(
        anchors=anchors.tolist(),
        trajectory=spec,
        imu_rate=rates["imu"],
        uwb_rate=rates["uwb"],
        ref_rate=rates["ref"],
        seed=int(rng.integers(0, 2**63)),
        channel=channel,
        imu_errors=ImuErrorModel(**tpl["imu_errors"]),
        bounds=tpl["bounds"],
    )
