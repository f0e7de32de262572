"""Loose-coupled learning baseline: stacked Bi-LSTM over IMU accelerations and UWB fixes.

Each slot's input is the gravity-free acceleration plus the most recent
trilateration fix (from slots with at least four anchors).  Fixes are fed in
a window-local frame centred on the position the window starts from, so the
network sees how far the current estimate sits from the fixes.  It predicts
per-slot displacements that are accumulated like the fusion model's.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn

from . import neural
from .fusionnet import EmptySplitError, Trajectory, accumulate, snap
from .grid import GridSequence, resample
from .neural import BiLSTM, Dense, NonFiniteError, wmse
from .sim import MeasurementLog
from .trilat import hold_fixes, slot_fixes


@dataclass
class BilstmConfig:
    window: int = 64
    stride: int = 16
    layers: int = 3
    hidden: int = 32
    lr: float = 1e-3
    batch: int = 32
    epochs: int = 150
    patience: int = 30
    W: tuple[float, float, float] = (1.0, 1.0, 2.0)
    min_anchors: int = 4
    origin_jitter: float = 2.0
    seed: int = 0

    def __post_init__(self):
        self.W = tuple(float(w) for w in self.W)
        if self.window <= 0 or self.hidden <= 0 or min(self.W) <= 0:
            raise ValueError("window, hidden and W must be positive")
        if self.origin_jitter < 0:
            raise ValueError("origin_jitter must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "BilstmConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown bilstm config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class BilstmWindow:
    X: np.ndarray                # (T, 6) acceleration and held fix position
    P: np.ndarray | None = None  # (T+1, 3)
    start: int = 0

    @property
    def length(self) -> int:
        return len(self.X)


def features(seq: GridSequence, start=None, min_anchors: int = 4) -> np.ndarray:
    """(K, 6) per-slot inputs; before the first fix the held position is `start`."""
    if start is None:
        start = seq.P[0] if seq.P is not None else seq.anchors.mean(axis=0)
    fixes = slot_fixes(seq.anchors, seq.D, seq.M, min_anchors)
    held = hold_fixes(fixes, seq.n_steps + 1, start)
    return np.hstack([seq.U, held[1:]])


def localize(X, origin):
    """Shift the fix columns of (..., T, 6) inputs into the frame centred on `origin` (..., 3)."""
    if isinstance(X, torch.Tensor):
        return torch.cat([X[..., :3], X[..., 3:] - origin.unsqueeze(-2)], dim=-1)
    X = np.asarray(X, dtype=float)
    return np.concatenate([X[..., :3], X[..., 3:] - np.asarray(origin)[..., None, :]], axis=-1)


def make_windows(seq: GridSequence, T: int, stride: int | None = None, keep_tail: bool = False,
                 X: np.ndarray | None = None, start=None, min_anchors: int = 4) -> list[BilstmWindow]:
    X = features(seq, start, min_anchors) if X is None else X
    stride = T if stride is None else stride
    K = len(X)
    starts = list(range(0, K - T + 1, stride))
    if keep_tail:
        covered = starts[-1] + T if starts else 0
        if covered < K:
            starts.append(covered)
    return [
        BilstmWindow(X=X[s:s + T], P=None if seq.P is None else seq.P[s:s + T + 1], start=s)
        for s in starts
    ]


class BilstmNet(nn.Module):
    def __init__(self, cfg: BilstmConfig, x_mean=None, x_scale=None, step_scale=None):
        super().__init__()
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.rnn = BiLSTM(6, cfg.hidden, cfg.layers, rng)
        self.head = Dense(2 * cfg.hidden, 3, rng)
        dt = torch.float64
        self.register_buffer("x_mean", torch.zeros(6, dtype=dt) if x_mean is None else torch.tensor(x_mean, dtype=dt))
        self.register_buffer("x_scale", torch.ones(6, dtype=dt) if x_scale is None else torch.tensor(x_scale, dtype=dt))
        self.register_buffer("step_scale", torch.ones(3, dtype=dt) if step_scale is None else torch.tensor(step_scale, dtype=dt))

    def forward(self, X):
        """(B, T, 6) -> (B, T, 3) displacements."""
        if X.shape[-1] != 6:
            raise ValueError(f"expected 6 input features, got {X.shape[-1]}")
        return self.step_scale * self.head(self.rnn((X - self.x_mean) / self.x_scale))


def bilstm_forward(X, model: BilstmNet) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        dp = model(torch.as_tensor(np.asarray(X)[None], dtype=dtype))[0]
    return neural.check_finite(dp, "predicted displacements").double().numpy()


def _stack(windows, dtype):
    X = torch.from_numpy(np.stack([w.X for w in windows])).to(dtype)
    P = torch.from_numpy(np.stack([w.P for w in windows])).to(dtype)
    return X, P


def train(train_windows: list[BilstmWindow], val_windows: list[BilstmWindow], cfg: BilstmConfig,
          log: Callable[[str], None] | None = None) -> dict:
    """Adam on WMSE of the displacements with early stopping on validation endpoint error."""
    if not train_windows:
        raise EmptySplitError("training split is empty")
    if not val_windows:
        raise EmptySplitError("validation split is empty")
    torch.manual_seed(cfg.seed)
    X = np.concatenate([localize(w.X, w.P[0]) for w in train_windows])
    steps = np.concatenate([np.abs(np.diff(w.P, axis=0)) for w in train_windows])
    scale = X.std(axis=0)
    model = BilstmNet(cfg, X.mean(axis=0), np.where(scale > 0, scale, 1.0),
                      np.maximum(np.percentile(steps, 99, axis=0), 1e-3)).float()
    params = list(model.parameters())
    opt = neural.OptimState(lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    dtype = torch.float32
    Xt, Pt = _stack(train_windows, dtype)
    dPt = Pt[:, 1:] - Pt[:, :-1]
    by_len: dict[int, list] = {}
    for w in val_windows:
        by_len.setdefault(w.length, []).append(w)
    val = [_stack(ws, dtype) for ws in by_len.values()]
    n_val = len(val_windows)

    best, best_epoch, since = math.inf, -1, 0
    best_state = copy.deepcopy(model.state_dict())
    history = []
    for epoch in range(cfg.epochs):
        order = torch.from_numpy(rng.permutation(len(train_windows)))
        total = 0.0
        for i in range(0, len(order), cfg.batch):
            idx = order[i:i + cfg.batch]
            origin = Pt[idx, 0] + cfg.origin_jitter * torch.from_numpy(
                rng.standard_normal((len(idx), 3))).to(dtype)
            loss = wmse(model(localize(Xt[idx], origin)), dPt[idx], cfg.W)
            if not torch.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}")
            grads = torch.autograd.grad(loss, params)
            neural.adamw_step(params, grads, opt)
            total += loss.item() * len(idx)
        with torch.no_grad():
            err = sum(
                float(torch.linalg.vector_norm(P[:, 0] + model(localize(Xv, P[:, 0])).sum(1) - P[:, -1], dim=-1).sum())
                for Xv, P in val
            ) / n_val
        history.append({"epoch": epoch, "loss": total / len(order), "val_endpoint": err})
        if log:
            log(f"epoch {epoch:3d} loss {total / len(order):.6f} val_end {err:.4f}")
        if err < best:
            best, best_epoch, since = err, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            since += 1
            if since >= cfg.patience:
                break
    model.load_state_dict(best_state)
    return make_checkpoint(model, history, best_epoch)


def make_checkpoint(model: BilstmNet, history=(), best_epoch: int = -1) -> dict:
    config = asdict(model.cfg)
    config["W"] = list(config["W"])
    return {
        "format": neural.CHECKPOINT_FORMAT,
        "version": neural.CHECKPOINT_VERSION,
        "model": "bilstm",
        "config": config,
        "config_hash": neural.config_hash(config),
        "norm_stats": {
            "x_mean": model.x_mean.tolist(),
            "x_scale": model.x_scale.tolist(),
            "step_scale": model.step_scale.tolist(),
        },
        "tensors": neural.state_to_json(model),
        "history": list(history),
        "best_epoch": best_epoch,
    }


def load_model(ckpt: dict, dtype=torch.float64) -> BilstmNet:
    if ckpt.get("model") != "bilstm":
        raise ValueError("checkpoint does not hold a Bi-LSTM model")
    model = BilstmNet(BilstmConfig.from_dict(ckpt["config"]))
    model.load_state_dict(neural.state_from_json(ckpt["tensors"]))
    model.eval()
    return model.to(dtype)


def infer(data: MeasurementLog | GridSequence, ckpt: dict | BilstmNet, start=None, mode: str = "chain",
          x_ref=None) -> Trajectory:
    """Non-overlapping windows, chained from `start` or re-anchored per window."""
    if mode not in ("chain", "window"):
        raise ValueError(f"unknown inference mode {mode!r}")
    model = ckpt if isinstance(ckpt, BilstmNet) else load_model(ckpt)
    seq = resample(data, x_ref=x_ref) if isinstance(data, MeasurementLog) else data
    K = seq.n_steps
    if K == 0:
        return Trajectory(t=seq.t[:0], position=np.zeros((0, 3)))
    if start is None:
        if seq.P is None:
            raise ValueError("a start position is required when the log has no truth")
        start = seq.P[0]
    pos = np.empty((K + 1, 3))
    p = snap(start)
    pos[0] = p
    X = features(seq, start, model.cfg.min_anchors)
    for w in make_windows(seq, model.cfg.window, keep_tail=True, X=X):
        origin = seq.P[w.start] if mode == "window" else p
        seg = accumulate(bilstm_forward(localize(w.X, origin), model), origin)
        pos[w.start + 1:w.start + w.length + 1] = seg[1:]
        p = seg[-1]
    return Trajectory(t=seq.t, position=pos)
