"""AoI-aware gated fusion network: windows, features, model, training and inference.

The network consumes per-slot IMU accelerations U, per-anchor ranges D with
their validity mask M and age-of-information tau, and predicts bounded
per-slot displacements that are accumulated into a trajectory.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
from torch import nn

from . import neural
from .grid import GridSequence, resample
from .neural import MLP, LSTMCell, NonFiniteError, huber
from .sim import MeasurementLog

EPS = 1e-8
# increments are truncated onto this dyadic grid so running sums are exact
QUANTUM = 2.0**-32


class EmptySplitError(ValueError):
    pass


# --- windows and features -----------------------------------------------------

@dataclass
class FusionWindow:
    U: np.ndarray                 # (T, 3)
    D: np.ndarray                 # (T, A), NaN where M = 0
    M: np.ndarray                 # (T, A)
    tau: np.ndarray               # (T, A)
    P: np.ndarray | None = None   # (T+1, 3)
    G: np.ndarray | None = None   # (T, A) geometric ranges, for augmentation
    start: int = 0                # slot index of the first step in its sequence

    @property
    def length(self) -> int:
        return len(self.U)


def compute_aoi(M) -> np.ndarray:
    """Slots since the last valid range, per anchor; tau[0] = 0."""
    M = np.asarray(M)
    tau = np.zeros(M.shape)
    for t in range(1, len(M)):
        tau[t] = np.where(M[t] == 1, 0.0, tau[t - 1] + 1.0)
    return tau


def causal_fill(D, M, mu) -> np.ndarray:
    """Hold the most recent valid range; anchors not yet seen take their training mean."""
    D = np.asarray(D, dtype=float)
    M = np.asarray(M)
    out = np.empty_like(D)
    last = np.broadcast_to(np.asarray(mu, dtype=float), D.shape[1:]).copy()
    for t in range(len(D)):
        ok = M[t] == 1
        last[ok] = D[t, ok]
        out[t] = last
    return out


def make_windows(seq: GridSequence, T: int, stride: int | None = None, keep_tail: bool = False) -> list[FusionWindow]:
    """Cut a grid sequence into windows of T slots every `stride` slots.

    AoI restarts at every window.  With `keep_tail` a shorter final window
    covers the remainder.
    """
    if T <= 0:
        raise ValueError("window length must be > 0")
    stride = T if stride is None else stride
    K = seq.n_steps
    starts = list(range(0, K - T + 1, stride))
    if keep_tail:
        covered = starts[-1] + T if starts else 0
        if covered < K:
            starts.append(covered)
    out = []
    for s in starts:
        e = min(s + T, K)
        M = seq.M[s:e]
        out.append(FusionWindow(
            U=seq.U[s:e],
            D=seq.D[s:e],
            M=M,
            tau=compute_aoi(M),
            P=None if seq.P is None else seq.P[s:e + 1],
            G=None if seq.G is None else seq.G[s:e],
            start=s,
        ))
    return out


@dataclass
class NormStats:
    mu: np.ndarray           # per-anchor mean range
    sigma: np.ndarray        # per-anchor range spread
    step_scale: np.ndarray   # per-axis bound on predicted displacement
    q_prior: float           # mean anchor availability
    imu_mean: np.ndarray
    imu_scale: np.ndarray

    @classmethod
    def from_windows(cls, windows: list[FusionWindow]) -> "NormStats":
        if not windows:
            raise EmptySplitError("no training windows")
        D = np.concatenate([w.D for w in windows])
        M = np.concatenate([w.M for w in windows])
        U = np.concatenate([w.U for w in windows])
        A = D.shape[1]
        mu = np.zeros(A)
        sigma = np.ones(A)
        for a in range(A):
            d = D[M[:, a] == 1, a]
            if len(d):
                mu[a] = d.mean()
            if len(d) > 1 and d.std() > 0:
                sigma[a] = d.std()
        steps = np.concatenate([np.abs(np.diff(w.P, axis=0)) for w in windows if w.P is not None])
        s = np.percentile(steps, 99, axis=0) if len(steps) else np.ones(3)
        s = np.maximum(s, 1e-3)
        scale = U.std(axis=0)
        return cls(mu=mu, sigma=sigma, step_scale=s, q_prior=float(M.mean()),
                    imu_mean=U.mean(axis=0), imu_scale=np.where(scale > 0, scale, 1.0))

    def to_json(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, d: dict) -> "NormStats":
        return cls(**{k: (np.asarray(v, dtype=float) if isinstance(v, list) else float(v)) for k, v in d.items()})


# --- model ----------------------------------------------------------------------

@dataclass
class FusionConfig:
    hidden: int = 32
    embed: int = 3
    window: int = 64
    stride: int = 16
    alpha_min: float = 0.8
    lambda_init: float = 10.0
    use_att: bool = True
    use_aoi: bool = True
    lr: float = 3e-4
    weight_decay: float = 1e-4
    batch: int = 8
    epochs: int = 150
    patience: int = 20
    plateau: int = 10
    warmup_epochs: int = 3
    w_inc: float = 1.0
    w_pos: float = 0.5
    w_end: float = 0.5
    delta_inc: float = 0.1
    delta_pos: float = 1.0
    aug_prob: float = 0.5
    aug_ramp_epochs: int = 20
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown fusion config keys: {sorted(unknown)}")
        return cls(**d)


def _softplus_inv(y: float) -> float:
    return y + math.log(-math.expm1(-y))


class FusionNet(nn.Module):
    def __init__(self, n_anchors: int, cfg: FusionConfig, stats: NormStats | None = None):
        super().__init__()
        rng = np.random.default_rng(cfg.seed)
        H, E = cfg.hidden, cfg.embed
        self.cfg = cfg
        self.n_anchors = n_anchors
        self.imu_encoder = MLP([3, H, H], rng)
        self.uwb_encoder = MLP([(2 if cfg.use_aoi else 1) + E, H, H], rng)
        self.anchor_embed = nn.Parameter(torch.from_numpy(rng.uniform(-1.0, 1.0, size=(n_anchors, E))))
        self.decay_raw = nn.Parameter(torch.full((n_anchors,), _softplus_inv(cfg.lambda_init), dtype=torch.float64))
        self.lstm = LSTMCell(2 * H + 2, H, rng)
        self.gate = MLP([2 * H + 1, H, 1], rng)
        self.head = MLP([2 * H, H, 3], rng)
        stats = stats or NormStats(np.zeros(n_anchors), np.ones(n_anchors), np.ones(3), 0.5, np.zeros(3), np.ones(3))
        self.set_stats(stats)

    def set_stats(self, stats: NormStats):
        dt = torch.float64
        self.register_buffer("mu", torch.tensor(stats.mu, dtype=dt))
        self.register_buffer("sigma", torch.tensor(stats.sigma, dtype=dt))
        self.register_buffer("step_scale", torch.tensor(stats.step_scale, dtype=dt))
        self.register_buffer("q_prior", torch.tensor(float(stats.q_prior), dtype=dt))
        self.register_buffer("imu_mean", torch.tensor(stats.imu_mean, dtype=dt))
        self.register_buffer("imu_scale", torch.tensor(stats.imu_scale, dtype=dt))

    @property
    def decay(self):
        """Per-anchor decay constants lambda_a > 0, in slots."""
        return nn.functional.softplus(self.decay_raw)

    def encode_imu(self, U):
        return torch.tanh(self.imu_encoder((U - self.imu_mean) / self.imu_scale))

    def uwb_features(self, Dfill, M, tau):
        """Returns (h_uwb, q_raw, q_decay, q, m_tilde) for (..., T, A) inputs."""
        lam = self.decay
        fresh = torch.exp(-tau / lam)
        d = (Dfill - self.mu) / (self.sigma + EPS)
        emb = self.anchor_embed.expand(*d.shape, -1)
        parts = [d.unsqueeze(-1), fresh.unsqueeze(-1), emb] if self.cfg.use_aoi else [d.unsqueeze(-1), emb]
        h = torch.tanh(self.uwb_encoder(torch.cat(parts, dim=-1)))
        m = M * fresh if self.cfg.use_aoi else M
        h_uwb = (m.unsqueeze(-1) * h).sum(-2) / (m.sum(-1, keepdim=True) + EPS)
        q_raw = M.mean(-1)
        q_decay = m.mean(-1)
        return h_uwb, q_raw, q_decay, 0.5 * q_raw + 0.5 * q_decay, m

    def gate_alpha(self, h_imu, h_uwb, q, q_raw, fixed_alpha=None):
        if fixed_alpha is not None:
            return torch.full_like(q, float(fixed_alpha))
        alpha = torch.sigmoid(self.gate(torch.cat([h_imu, h_uwb, q.unsqueeze(-1)], dim=-1))).squeeze(-1)
        return torch.where(q_raw == 0, torch.clamp(alpha, min=self.cfg.alpha_min), alpha)

    @staticmethod
    def blend(alpha, h_imu, h_uwb):
        h = alpha.unsqueeze(-1) * h_imu + (1.0 - alpha.unsqueeze(-1)) * h_uwb
        # guard the convex hull against rounding
        return torch.minimum(torch.maximum(h, torch.minimum(h_imu, h_uwb)), torch.maximum(h_imu, h_uwb))

    def displacement(self, h_rnn, h_att):
        raw = self.head(torch.cat([h_rnn, h_att], dim=-1))
        return self.bound(raw)

    def bound(self, raw):
        # shrink slightly so a saturated tanh still stays strictly inside the bound
        s = self.step_scale
        return (1.0 - 2.0**-20) * s * torch.tanh(raw / s)

    def fuse_step(self, h_imu, h_uwb, q, q_raw, state, fixed_alpha=None):
        """One recurrent step: returns (h_rnn, alpha, h_att, new_state)."""
        z = torch.cat([h_imu, h_uwb, q.unsqueeze(-1), self.q_prior.expand_as(q).unsqueeze(-1)], dim=-1)
        h, c = self.lstm.step(z, *state)
        alpha = self.gate_alpha(h_imu, h_uwb, q, q_raw, fixed_alpha)
        return h, alpha, self.blend(alpha, h_imu, h_uwb), (h, c)

    def forward(self, U, Dfill, M, tau, fixed_alpha=None, state=None):
        """Batched (B, T, ...) forward pass; returns a dict with 'dp' of shape (B, T, 3).

        `state` is an optional (h, c) recurrent state carried in from the
        preceding window; the final state is returned under 'state'.
        """
        if not self.cfg.use_att and fixed_alpha is None:
            fixed_alpha = 0.5
        h_imu = self.encode_imu(U)
        h_uwb, q_raw, q_decay, q, m = self.uwb_features(Dfill, M, tau)
        z = torch.cat([h_imu, h_uwb, q.unsqueeze(-1), self.q_prior.expand_as(q).unsqueeze(-1)], dim=-1)
        h_rnn, new_state = self.lstm.run(z, state=state)
        alpha = self.gate_alpha(h_imu, h_uwb, q, q_raw, fixed_alpha)
        h_att = self.blend(alpha, h_imu, h_uwb)
        dp = self.displacement(h_rnn, h_att)
        return {"dp": dp, "alpha": alpha, "q_raw": q_raw, "q_decay": q_decay, "q": q, "m": m,
                "h_imu": h_imu, "h_uwb": h_uwb, "h_att": h_att, "state": new_state}


# --- accumulation and loss ------------------------------------------------------------

def snap(x) -> np.ndarray:
    """Truncate toward zero onto the dyadic grid; never increases magnitude."""
    return np.trunc(np.asarray(x, dtype=float) / QUANTUM) * QUANTUM


def accumulate(dp, p_start) -> np.ndarray:
    """p[0] = p_start, p[t+1] = p[t] + dp[t].

    Increments and start are snapped to a 2^-32 m grid first, so every partial
    sum below 2^20 m is exact and differences telescope bit for bit.
    """
    dp = snap(np.asarray(dp, dtype=float).reshape(-1, 3))
    out = np.empty((len(dp) + 1, 3))
    out[0] = snap(p_start)
    out[1:] = out[0] + np.cumsum(dp, axis=0)
    return out


def accumulate_torch(dp, p_start):
    """Differentiable running sum for training; (B, T, 3) -> (B, T+1, 3)."""
    return torch.cat([p_start.unsqueeze(-2), p_start.unsqueeze(-2) + torch.cumsum(dp, dim=-2)], dim=-2)


def composite_loss(dp, p_hat, P, cfg: FusionConfig):
    """Increment, position and endpoint Huber terms, each mean-reduced."""
    inc = huber(dp - (P[..., 1:, :] - P[..., :-1, :]), cfg.delta_inc).mean()
    pos = huber(p_hat - P, cfg.delta_pos).mean()
    end_err = torch.sqrt(((p_hat[..., -1, :] - P[..., -1, :]) ** 2).sum(-1) + 1e-24)
    end = huber(end_err, cfg.delta_pos).mean()
    return cfg.w_inc * inc + cfg.w_pos * pos + cfg.w_end * end


# --- batching ---------------------------------------------------------------------------

def window_tensors(windows: list[FusionWindow], mu, dtype=torch.float32) -> dict:
    """Stack equal-length windows into model inputs (ranges causally filled)."""
    t = lambda a: torch.from_numpy(np.ascontiguousarray(np.stack(a))).to(dtype)
    out = {
        "U": t([w.U for w in windows]),
        "D": t([causal_fill(w.D, w.M, mu) for w in windows]),
        "M": t([w.M for w in windows]),
        "tau": t([w.tau for w in windows]),
    }
    if all(w.P is not None for w in windows):
        out["P"] = t([w.P for w in windows])
    return out


def predict_deltas(window: FusionWindow, model: FusionNet) -> np.ndarray:
    """Per-slot displacements for one window, snapped onto the accumulation grid."""
    dtype = next(model.parameters()).dtype
    b = window_tensors([window], model.mu.cpu().numpy(), dtype)
    with torch.no_grad():
        dp = model(b["U"], b["D"], b["M"], b["tau"])["dp"][0]
    neural.check_finite(dp, "predicted displacements")
    return snap(dp.double().numpy())


# --- training -----------------------------------------------------------------------------

Augmenter = Callable[[FusionWindow, np.random.Generator], FusionWindow]


def augment_probability(epoch: int, cfg: FusionConfig) -> float:
    """Curriculum: zero during warm-up, then a linear ramp up to aug_prob."""
    if cfg.aug_ramp_epochs <= 0:
        return cfg.aug_prob if epoch >= cfg.warmup_epochs else 0.0
    frac = (epoch - cfg.warmup_epochs + 1) / cfg.aug_ramp_epochs
    return cfg.aug_prob * float(np.clip(frac, 0.0, 1.0))


def endpoint_error(model: FusionNet, batch: dict) -> float:
    with torch.no_grad():
        dp = model(batch["U"], batch["D"], batch["M"], batch["tau"])["dp"]
        P = batch["P"].to(dp.dtype)
        end = P[:, 0] + dp.sum(1)
        return float(torch.linalg.vector_norm(end - P[:, -1], dim=-1).mean())


def _batches(windows, mu, dtype):
    by_len: dict[int, list] = {}
    for w in windows:
        by_len.setdefault(w.length, []).append(w)
    return [window_tensors(ws, mu, dtype) for ws in by_len.values()]


def train(train_windows: list[FusionWindow], val_windows: list[FusionWindow], cfg: FusionConfig,
          augmenter: Augmenter | None = None, log: Callable[[str], None] | None = None) -> dict:
    """Train with AdamW and early stopping on validation endpoint error.

    Normalisation statistics come from `train_windows` only.  Returns a
    checkpoint dict holding the best-validation parameters.
    """
    if not train_windows:
        raise EmptySplitError("training split is empty")
    if not val_windows:
        raise EmptySplitError("validation split is empty")
    torch.manual_seed(cfg.seed)
    stats = NormStats.from_windows(train_windows)
    A = train_windows[0].D.shape[1]
    model = FusionNet(A, cfg, stats).float()
    params = [p for p in model.parameters()]
    opt = neural.OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 1])
    aug_rng = np.random.default_rng([cfg.seed, 2])
    dtype = torch.float32

    base = [window_tensors([w], stats.mu, dtype) for w in train_windows]
    val_batches = _batches(val_windows, stats.mu, dtype)

    def val_error():
        n = sum(len(b["U"]) for b in val_batches)
        return sum(endpoint_error(model, b) * len(b["U"]) for b in val_batches) / n

    best = math.inf
    best_state = copy.deepcopy(model.state_dict())
    best_epoch = -1
    since_best = 0
    since_lr = 0
    history = []
    for epoch in range(cfg.epochs):
        warm = epoch < cfg.warmup_epochs
        p_aug = augment_probability(epoch, cfg) if augmenter is not None else 0.0
        order = rng.permutation(len(train_windows))
        total = 0.0
        for i in range(0, len(order), cfg.batch):
            idx = order[i:i + cfg.batch]
            items = []
            for j in idx:
                if p_aug > 0 and aug_rng.random() < p_aug:
                    items.append(window_tensors([augmenter(train_windows[j], aug_rng)], stats.mu, dtype))
                else:
                    items.append(base[j])
            b = {k: torch.cat([it[k] for it in items]) for k in items[0]}
            out = model(b["U"], b["D"], b["M"], b["tau"], fixed_alpha=0.5 if warm else None)
            p_hat = accumulate_torch(out["dp"], b["P"][:, 0])
            loss = composite_loss(out["dp"], p_hat, b["P"], cfg)
            if not torch.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {i // cfg.batch}")
            grads = torch.autograd.grad(loss, params, allow_unused=True)
            if warm:
                grads = [None if p is model.decay_raw else g for p, g in zip(params, grads)]
            neural.adamw_step(params, grads, opt)
            total += loss.item() * len(idx)
        err = val_error()
        history.append({"epoch": epoch, "loss": total / len(order), "val_endpoint": err, "lr": opt.lr})
        if log:
            log(f"epoch {epoch:3d} loss {total / len(order):.5f} val_end {err:.4f} lr {opt.lr:.2e}")
        if err < best:
            best, best_epoch, since_best, since_lr = err, epoch, 0, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            since_best += 1
            since_lr += 1
            if since_lr >= cfg.plateau:
                opt.lr *= 0.5
                since_lr = 0
            if since_best >= cfg.patience:
                break
    model.load_state_dict(best_state)
    return make_checkpoint(model, stats, history, best_epoch)


def make_checkpoint(model: FusionNet, stats: NormStats, history=(), best_epoch: int = -1) -> dict:
    config = asdict(model.cfg)
    return {
        "format": neural.CHECKPOINT_FORMAT,
        "version": neural.CHECKPOINT_VERSION,
        "model": "fusionnet",
        "config": config,
        "config_hash": neural.config_hash(config),
        "n_anchors": model.n_anchors,
        "norm_stats": stats.to_json(),
        "tensors": neural.state_to_json(model),
        "history": list(history),
        "best_epoch": best_epoch,
    }


def load_model(ckpt: dict, dtype=torch.float64) -> FusionNet:
    if ckpt.get("model") != "fusionnet":
        raise ValueError("checkpoint does not hold a fusion model")
    cfg = FusionConfig.from_dict(ckpt["config"])
    model = FusionNet(ckpt["n_anchors"], cfg, NormStats.from_json(ckpt["norm_stats"]))
    model.load_state_dict(neural.state_from_json(ckpt["tensors"]))
    model.eval()
    return model.to(dtype)


# --- inference ------------------------------------------------------------------------------

@dataclass
class Trajectory:
    t: np.ndarray          # (K+1,)
    position: np.ndarray   # (K+1, 3)
    alpha: np.ndarray = field(default_factory=lambda: np.zeros(0))   # (K,)
    q_raw: np.ndarray = field(default_factory=lambda: np.zeros(0))   # (K,)


def infer(data: MeasurementLog | GridSequence, ckpt: dict | FusionNet, start=None, mode: str = "chain",
          x_ref=None) -> Trajectory:
    """Run the model over non-overlapping windows.

    ``mode="chain"`` carries each window's endpoint into the next, starting
    from `start` (default: the first truth position).  ``mode="window"``
    re-anchors every window at the truth position of its first slot.
    """
    if mode not in ("chain", "window"):
        raise ValueError(f"unknown inference mode {mode!r}")
    model = ckpt if isinstance(ckpt, FusionNet) else load_model(ckpt)
    seq = resample(data, x_ref=x_ref) if isinstance(data, MeasurementLog) else data
    K = seq.n_steps
    if K == 0:
        return Trajectory(t=seq.t[:0], position=np.zeros((0, 3)))
    if start is None:
        if seq.P is None:
            raise ValueError("a start position is required when the log has no truth")
        start = seq.P[0]
    if mode == "window" and seq.P is None:
        raise ValueError("per-window mode needs truth positions")
    pos = np.empty((K + 1, 3))
    alpha = np.empty(K)
    q_raw = np.empty(K)
    p = snap(start)
    pos[0] = p
    dtype = next(model.parameters()).dtype
    mu = model.mu.cpu().numpy()
    for w in make_windows(seq, model.cfg.window, keep_tail=True):
        b = window_tensors([w], mu, dtype)
        with torch.no_grad():
            out = model(b["U"], b["D"], b["M"], b["tau"])
        dp = snap(neural.check_finite(out["dp"][0], "predicted displacements").double().numpy())
        p0 = seq.P[w.start] if mode == "window" else p
        seg = accumulate(dp, p0)
        s, e = w.start, w.start + w.length
        pos[s + 1:e + 1] = seg[1:]
        alpha[s:e] = out["alpha"][0].double().numpy()
        q_raw[s:e] = out["q_raw"][0].double().numpy()
        p = seg[-1]
    return Trajectory(t=seq.t, position=pos, alpha=alpha, q_raw=q_raw)
