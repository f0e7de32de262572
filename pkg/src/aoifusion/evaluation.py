"""Error statistics, classical baselines on the shared grid, ablation and gate analysis."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import akf
from .fusionnet import FusionConfig, Trajectory, infer
from .grid import GridSequence
from .trilat import hold_fixes, slot_fixes


class EmptyOverlapError(ValueError):
    pass


class MissingCheckpointError(KeyError):
    pass


PERCENTILE_METHOD = "linear"
ABLATIONS = {
    "full": (True, True),
    "aoi-off": (True, False),
    "att-off": (False, True),
    "both-off": (False, False),
}


@dataclass
class ErrorReport:
    method: str
    rmse: float
    mae: float
    p50: float
    p95: float
    p99: float
    cdf_samples: np.ndarray = field(repr=False)
    per_step_errors: np.ndarray = field(repr=False)
    t: np.ndarray = field(repr=False)

    def row(self) -> dict:
        return {"method": self.method, "rmse": self.rmse, "mae": self.mae,
                "p50": self.p50, "p95": self.p95, "p99": self.p99}


def error_stats(est_t, est_pos, truth_t, truth_pos, method: str = "estimate") -> ErrorReport:
    """3D Euclidean errors of an estimate against linearly interpolated truth.

    Only estimate samples inside the truth time span are scored.
    """
    est_t = np.asarray(est_t, dtype=float)
    est_pos = np.asarray(est_pos, dtype=float).reshape(-1, 3)
    truth_t = np.asarray(truth_t, dtype=float)
    truth_pos = np.asarray(truth_pos, dtype=float).reshape(-1, 3)
    if len(est_t) != len(est_pos) or len(truth_t) != len(truth_pos):
        raise ValueError("time and position arrays differ in length")
    if len(truth_t) == 0 or len(est_t) == 0:
        raise EmptyOverlapError("estimate or truth is empty")
    inside = (est_t >= truth_t[0]) & (est_t <= truth_t[-1])
    if not inside.any():
        raise EmptyOverlapError("estimate and truth do not overlap in time")
    t = est_t[inside]
    ref = np.column_stack([np.interp(t, truth_t, truth_pos[:, i]) for i in range(3)])
    e = np.linalg.norm(est_pos[inside] - ref, axis=1)
    p50, p95, p99 = np.percentile(e, [50, 95, 99], method=PERCENTILE_METHOD)
    return ErrorReport(
        method=method,
        rmse=float(np.sqrt(np.mean(e**2))),
        mae=float(np.mean(e)),
        p50=float(p50), p95=float(p95), p99=float(p99),
        cdf_samples=np.sort(e),
        per_step_errors=e,
        t=t,
    )


def grid_report(traj: Trajectory | np.ndarray, seq: GridSequence, method: str) -> ErrorReport:
    """Score a grid-aligned estimate against the sequence's truth."""
    pos = traj.position if isinstance(traj, Trajectory) else np.asarray(traj)
    if seq.P is None:
        raise ValueError("sequence carries no truth")
    return error_stats(seq.t, pos, seq.t, seq.P, method)


def cdf(report: ErrorReport) -> tuple[np.ndarray, np.ndarray]:
    """Empirical CDF as a step curve running from 0 to 1."""
    x = report.cdf_samples
    n = len(x)
    return np.r_[x[0], x], np.arange(n + 1) / n


# --- baselines on the grid ---------------------------------------------------------------

def uwb_only(seq: GridSequence, start=None, min_anchors: int = 4) -> Trajectory:
    """Zero-order hold of slot fixes, starting from the known start position."""
    start = seq.P[0] if start is None else np.asarray(start, dtype=float)
    fixes = slot_fixes(seq.anchors, seq.D, seq.M, min_anchors)
    return Trajectory(t=seq.t, position=hold_fixes(fixes, seq.n_steps + 1, start))


def akf_baseline(seq: GridSequence, start=None, cfg: akf.AkfConfig | None = None,
                 min_anchors: int = 4) -> Trajectory:
    """Loose-coupled AKF: slot-mean accelerations plus GDOP-scaled slot fixes."""
    start = seq.P[0] if start is None else np.asarray(start, dtype=float)
    if seq.n_steps == 0:
        return Trajectory(t=seq.t, position=np.asarray(start, dtype=float)[None])
    fixes = slot_fixes(seq.anchors, seq.D, seq.M, min_anchors)
    accel = np.vstack([seq.U[:1], seq.U])
    states = akf.run(seq.t, accel, {k: (f.position, f.gdop) for k, f in fixes.items()}, start, cfg)
    return Trajectory(t=seq.t, position=states[:, :3])


# --- ablation and gate analysis ----------------------------------------------------------

def ablation_config(base: FusionConfig, name: str) -> FusionConfig:
    att, aoi = ABLATIONS[name]
    cfg = FusionConfig(**vars(base))
    cfg.use_att, cfg.use_aoi = att, aoi
    return cfg


@dataclass
class AblationRow:
    name: str
    use_att: bool
    use_aoi: bool
    report: ErrorReport
    d_rmse: float
    d_p95: float


def ablate(checkpoints: dict, seq: GridSequence, start=None, mode: str = "chain") -> list[AblationRow]:
    """Score the four ATT x AoI variants; deltas are relative to the full model."""
    missing = [k for k in ABLATIONS if k not in checkpoints]
    if missing:
        raise MissingCheckpointError(f"missing ablation checkpoints: {missing}")
    reports = {
        name: grid_report(infer(seq, checkpoints[name], start=start, mode=mode), seq, name)
        for name in ABLATIONS
    }
    full = reports["full"]
    return [
        AblationRow(name, *ABLATIONS[name], r, r.rmse - full.rmse, r.p95 - full.p95)
        for name, r in reports.items()
    ]


@dataclass
class GateAnalysis:
    t: np.ndarray
    alpha: np.ndarray
    visible: np.ndarray
    alpha_min: float

    def regime_mean(self, lo: int, hi: int | None = None) -> float:
        """Mean alpha over slots with lo <= visible < hi (NaN if none)."""
        sel = self.visible >= lo if hi is None else (self.visible >= lo) & (self.visible < hi)
        return float(self.alpha[sel].mean()) if sel.any() else float("nan")

    def summary(self) -> dict:
        outage = self.visible == 0
        return {
            "mean_alpha_lt3": self.regime_mean(0, 3),
            "mean_alpha_ge3": self.regime_mean(3),
            "mean_alpha_ge4": self.regime_mean(4),
            "outage_slots": int(outage.sum()),
            "outage_alpha_min": float(self.alpha[outage].min()) if outage.any() else float("nan"),
            "outage_alpha_max": float(self.alpha[outage].max()) if outage.any() else float("nan"),
            "alpha_min": self.alpha_min,
        }


def gate_analysis(ckpt, seq: GridSequence, start=None) -> GateAnalysis:
    traj = infer(seq, ckpt, start=start)
    cfg = ckpt.cfg if hasattr(ckpt, "cfg") else FusionConfig.from_dict(ckpt["config"])
    visible = np.rint(traj.q_raw * seq.n_anchors).astype(int)
    return GateAnalysis(t=seq.t[:-1], alpha=traj.alpha, visible=visible, alpha_min=cfg.alpha_min)


# --- writers -----------------------------------------------------------------------------

def write_table_csv(reports: list[ErrorReport], path, extra: list[dict] | None = None) -> None:
    rows = [r.row() | (extra[i] if extra else {}) for i, r in enumerate(reports)]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["method"])
        w.writeheader()
        w.writerows(rows)


def write_plot_data(path, columns: dict[str, np.ndarray]) -> None:
    """Whitespace-separated columns with a '#' header line, readable by gnuplot."""
    names = list(columns)
    data = np.column_stack([np.asarray(columns[n], dtype=float) for n in names])
    np.savetxt(path, data, header=" ".join(names), fmt="%.9g")


def write_cdf_data(report: ErrorReport, path) -> None:
    x, y = cdf(report)
    write_plot_data(path, {"error_m": x, "cdf": y})


def write_box_data(reports: list[ErrorReport], path) -> None:
    """One row per method: index, p5, p25, p50, p75, p95."""
    lines = ["# index method p5 p25 p50 p75 p95"]
    for i, r in enumerate(reports):
        q = np.percentile(r.per_step_errors, [5, 25, 50, 75, 95], method=PERCENTILE_METHOD)
        lines.append(f"{i} {r.method} " + " ".join(f"{v:.9g}" for v in q))
    Path(path).write_text("\n".join(lines) + "\n")


def write_bar_data(reports: list[ErrorReport], path) -> None:
    lines = ["# index method rmse mae p95"]
    lines += [f"{i} {r.method} {r.rmse:.9g} {r.mae:.9g} {r.p95:.9g}" for i, r in enumerate(reports)]
    Path(path).write_text("\n".join(lines) + "\n")


def markdown_table(rows: list[dict], columns: list[str] | None = None) -> str:
    if not rows:
        return ""
    columns = columns or list(rows[0])

    def fmt(v):
        return f"{v:.3f}" if isinstance(v, float) else str(v)

    out = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    out += ["| " + " | ".join(fmt(r.get(c, "")) for c in columns) + " |" for r in rows]
    return "\n".join(out) + "\n"
