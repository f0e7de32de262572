"""Multilateration by Levenberg-Marquardt least squares, and GDOP."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .sim import MeasurementLog


class SingularGeometryError(np.linalg.LinAlgError):
    pass


@dataclass
class FixResult:
    position: np.ndarray
    residual_mse: float
    n_anchors: int
    gdop: float
    converged: bool
    underdetermined: bool = False
    singular: bool = False
    iterations: int = 0

    def to_json(self) -> dict:
        d = asdict(self)
        d["position"] = [float(x) for x in self.position]
        return d


def _residuals(p, anchors, ranges):
    diff = p - anchors
    dist = np.linalg.norm(diff, axis=1)
    dist_safe = np.where(dist > 0, dist, 1e-12)
    jac = diff / dist_safe[:, None]
    return dist - ranges, jac


def mse_gradient(p, anchors, ranges) -> np.ndarray:
    r, jac = _residuals(np.asarray(p, float), np.asarray(anchors, float), np.asarray(ranges, float))
    return 2.0 / len(r) * jac.T @ r


def linear_init(anchors, ranges) -> np.ndarray | None:
    """Closed-form start from differencing the squared range equations against their mean.

    Exact for noiseless ranges; None when the anchors are (near) coplanar.
    """
    c = anchors.mean(axis=0)
    A = 2.0 * (anchors - c)
    b = np.sum(anchors**2 - c**2, axis=1) - ranges**2
    b = b - b.mean()
    A = A - A.mean(axis=0)
    sv = np.linalg.svd(A, compute_uv=False)
    if len(sv) < 3 or sv[-1] < 1e-9 * max(sv[0], 1e-300):
        return None
    return np.linalg.lstsq(A, b, rcond=None)[0]


def solve(anchors, ranges, init=None, max_iter: int = 100, lam0: float = 1e-3,
          grad_tol: float = 1e-8) -> FixResult:
    """Minimise MSE(p) = mean((|p - a_i| - d_i)^2) from `init`.

    Without `init`, the solver starts from the anchor centroid and, with four
    or more non-coplanar anchors, also from the closed-form linear estimate;
    the lower-MSE result wins.  Fewer than four anchors still yields a
    (flagged) result.
    """
    anchors = np.asarray(anchors, dtype=float).reshape(-1, 3)
    ranges = np.asarray(ranges, dtype=float).ravel()
    if init is None and len(ranges) >= 4 and len(anchors) == len(ranges) and np.all(ranges >= 0):
        start = linear_init(anchors, ranges)
        if start is not None:
            a = _solve(anchors, ranges, anchors.mean(axis=0), max_iter, lam0, grad_tol)
            b = _solve(anchors, ranges, start, max_iter, lam0, grad_tol)
            return b if b.residual_mse < a.residual_mse else a
    return _solve(anchors, ranges, init, max_iter, lam0, grad_tol)


def _solve(anchors, ranges, init, max_iter, lam0, grad_tol) -> FixResult:
    anchors = np.asarray(anchors, dtype=float).reshape(-1, 3)
    ranges = np.asarray(ranges, dtype=float).ravel()
    n = len(ranges)
    if n < 1 or len(anchors) != n:
        raise ValueError("need matching, non-empty anchors and ranges")
    if np.any(ranges < 0):
        raise ValueError("ranges must be >= 0")
    p = anchors.mean(axis=0) if init is None else np.asarray(init, dtype=float).copy()

    lam = lam0
    r, jac = _residuals(p, anchors, ranges)
    mse = float(r @ r) / n
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        grad = 2.0 / n * jac.T @ r
        if np.linalg.norm(grad) < grad_tol * (1.0 + mse):
            converged = True
            break
        jtj = jac.T @ jac
        jtr = jac.T @ r
        improved = False
        while lam < 1e16:
            step = np.linalg.solve(jtj + lam * np.eye(3), -jtr)
            p_new = p + step
            r_new, jac_new = _residuals(p_new, anchors, ranges)
            mse_new = float(r_new @ r_new) / n
            if mse_new <= mse:
                p, r, jac, mse = p_new, r_new, jac_new, mse_new
                lam = max(lam / 10.0, 1e-12)
                improved = True
                break
            lam *= 10.0
        if not improved:
            break
    else:
        grad = 2.0 / n * jac.T @ r
        converged = bool(np.linalg.norm(grad) < grad_tol * (1.0 + mse))

    jtj = jac.T @ jac
    singular = bool(np.linalg.matrix_rank(jtj, tol=1e-10 * max(np.abs(jtj).max(), 1e-300)) < 3)
    g = float("nan")
    if n >= 4:
        try:
            g = gdop(anchors, p)
        except (SingularGeometryError, ValueError):
            g = float("nan")
    return FixResult(
        position=p,
        residual_mse=mse,
        n_anchors=n,
        gdop=g,
        converged=converged,
        underdetermined=n < 4,
        singular=singular,
        iterations=it,
    )


def gdop(anchors, p) -> float:
    """Classical GDOP: sqrt(trace((G^T G)^-1)), rows of G = [unit(a_i - p), 1]."""
    anchors = np.asarray(anchors, dtype=float).reshape(-1, 3)
    p = np.asarray(p, dtype=float)
    if len(anchors) < 4:
        raise ValueError("GDOP needs at least 4 anchors")
    diff = anchors - p
    dist = np.linalg.norm(diff, axis=1)
    if np.any(dist == 0):
        raise ValueError("an anchor coincides with the evaluation point")
    G = np.hstack([diff / dist[:, None], np.ones((len(anchors), 1))])
    gtg = G.T @ G
    if np.linalg.cond(gtg) > 1e12:
        raise SingularGeometryError("anchor geometry is singular")
    return float(np.sqrt(np.trace(np.linalg.inv(gtg))))


@dataclass
class Epoch:
    t: float
    anchor_ids: np.ndarray
    ranges: np.ndarray


def group_epochs(log: MeasurementLog, window: float = 0.05) -> list[Epoch]:
    """Group valid ranges into consecutive time windows of width `window`.

    Epoch time is the mean timestamp of its records.  If an anchor reports more
    than once in a window, its ranges are averaged.
    """
    v = log.uwb_valid
    t, a, r = log.uwb_t[v], log.uwb_anchor[v], log.uwb_range[v]
    if len(t) == 0:
        return []
    idx = np.floor(t / window + 1e-9).astype(np.int64)
    epochs = []
    bounds = np.flatnonzero(np.diff(idx)) + 1
    for lo, hi in zip(np.r_[0, bounds], np.r_[bounds, len(t)]):
        ids = np.unique(a[lo:hi])
        rr = np.array([r[lo:hi][a[lo:hi] == i].mean() for i in ids])
        epochs.append(Epoch(t=float(t[lo:hi].mean()), anchor_ids=ids, ranges=rr))
    return epochs


def trilaterate_log(log: MeasurementLog, window: float = 0.05, min_anchors: int = 1,
                    init=None) -> list[tuple[float, FixResult]]:
    """Per-epoch fixes, each initialised from the previous fix (centroid/`init` first)."""
    out = []
    prev = None if init is None else np.asarray(init, dtype=float)
    for ep in group_epochs(log, window):
        if len(ep.anchor_ids) < min_anchors:
            continue
        fix = solve(log.anchors[ep.anchor_ids], ep.ranges, init=prev)
        out.append((ep.t, fix))
        prev = fix.position
    return out


def slot_fixes(anchors, D, M, min_anchors: int = 4, init=None) -> dict[int, FixResult]:
    """Fixes for each grid slot with at least `min_anchors` valid ranges.

    Keys are grid indices k + 1: slot k's ranges are complete at the end of
    the slot.  Non-converged and singular solutions are dropped.
    """
    anchors = np.asarray(anchors, dtype=float)
    out = {}
    prev = None if init is None else np.asarray(init, dtype=float)
    for k in range(len(D)):
        ok = np.asarray(M[k]) == 1
        if ok.sum() < min_anchors:
            continue
        fix = solve(anchors[ok], D[k, ok], init=prev)
        if fix.converged and not fix.singular:
            out[k + 1] = fix
            prev = fix.position
    return out


def hold_fixes(fixes: dict[int, FixResult], n_points: int, start) -> np.ndarray:
    """Zero-order hold of fix positions over grid points 0..n_points-1, from `start`."""
    out = np.empty((n_points, 3))
    last = np.asarray(start, dtype=float)
    for j in range(n_points):
        if j in fixes:
            last = fixes[j].position
        out[j] = last
    return out
