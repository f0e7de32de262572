"""UWB residual augmentation.

Residuals are measured minus geometric ranges.  Generators produce synthetic
residuals; `mix_and_inject` blends them into a training window's ranges
without touching its mask, AoI, IMU or truth.  The diffusion generator models
short per-anchor residual sequences conditioned on speed and anchor
visibility.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
from scipy import stats
from torch import nn

from . import neural
from .fusionnet import FusionWindow
from .grid import GridSequence
from .neural import MLP
from .sim import MeasurementLog


class MissingTruthError(ValueError):
    pass


@dataclass
class ResidualRecord:
    t: float
    anchor_id: int
    epsilon: float
    condition: tuple[float, float]   # (speed m/s, visible anchors in the slot)


def extract_residuals(log: MeasurementLog) -> list[ResidualRecord]:
    """One record per valid UWB measurement."""
    if not log.has_truth:
        raise MissingTruthError("residuals need ground truth")
    ok = np.flatnonzero(log.uwb_valid)
    t = log.uwb_t[ok]
    aid = log.uwb_anchor[ok]
    geom = np.linalg.norm(log.truth_at(t) - log.anchors[aid], axis=1)
    eps = log.uwb_range[ok] - geom
    # truth velocity by linear interpolation of the dense truth stream
    vel = np.stack([np.interp(t, log.truth_t, log.truth_vel[:, i]) for i in range(3)], axis=1)
    speed = np.linalg.norm(vel, axis=1)
    slot = np.floor(t * log.uwb_rate + 1e-9).astype(np.int64)
    visible = {}
    for s, a in zip(slot, aid):
        visible.setdefault(s, set()).add(int(a))
    return [
        ResidualRecord(float(ti), int(a), float(e), (float(v), float(len(visible[s]))))
        for ti, a, e, v, s in zip(t, aid, eps, speed, slot)
    ]


def write_residuals(records: list[ResidualRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({"t": r.t, "anchor_id": r.anchor_id, "epsilon": r.epsilon,
                                 "condition": list(r.condition)}) + "\n")


def read_residuals(path) -> list[ResidualRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(ResidualRecord(d["t"], d["anchor_id"], d["epsilon"], tuple(d["condition"])))
    return out


def residual_windows(seq: GridSequence, length: int = 8, stride: int = 4):
    """Per-anchor runs of `length` consecutive valid slots.

    Returns (windows (N, length), conditions (N, 2)); the condition is the
    mean truth speed and mean visible-anchor count over the run.
    """
    if seq.G is None or seq.P is None:
        raise MissingTruthError("residual windows need ground truth")
    eps = seq.D - seq.G
    speed = np.linalg.norm(np.diff(seq.P, axis=0), axis=1) * seq.rate
    visible = seq.M.sum(axis=1)
    wins, conds = [], []
    for a in range(seq.n_anchors):
        valid = seq.M[:, a] == 1
        k = 0
        K = len(valid)
        while k < K:
            if not valid[k]:
                k += 1
                continue
            e = k
            while e < K and valid[e]:
                e += 1
            for s in range(k, e - length + 1, stride):
                wins.append(eps[s:s + length, a])
                conds.append([speed[s:s + length].mean(), visible[s:s + length].mean()])
            k = e
    return np.array(wins).reshape(-1, length), np.array(conds).reshape(-1, 2)


# --- diffusion ----------------------------------------------------------------------

@dataclass
class DiffusionConfig:
    steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    hidden: int = 64
    length: int = 8
    t_embed: int = 8
    lr: float = 1e-3
    batch: int = 128
    epochs: int = 60
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown diffusion config keys: {sorted(unknown)}")
        return cls(**d)


def beta_schedule(steps: int, beta_start: float, beta_end: float) -> np.ndarray:
    if steps < 10:
        raise ValueError("need at least 10 diffusion steps")
    betas = np.linspace(beta_start, beta_end, steps)
    if not (np.all(betas > 0) and np.all(betas < 1)):
        raise ValueError("betas must lie in (0, 1)")
    return betas


def timestep_embedding(t, dim: int):
    """Sinusoidal embedding of integer steps t (any shape) -> (..., dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
    ang = t.unsqueeze(-1).double() * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class DiffusionModel(nn.Module):
    """Noise-predicting denoiser over residual windows with its schedule and scalings."""

    def __init__(self, cfg: DiffusionConfig, x_mean: float = 0.0, x_scale: float = 1.0,
                 c_mean=(0.0, 0.0), c_scale=(1.0, 1.0)):
        super().__init__()
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.denoiser = MLP([cfg.length + cfg.t_embed + 2, cfg.hidden, cfg.hidden, cfg.length], rng)
        betas = torch.tensor(beta_schedule(cfg.steps, cfg.beta_start, cfg.beta_end))
        self.register_buffer("betas", betas)
        self.register_buffer("alphas", 1.0 - betas)
        self.register_buffer("alpha_bar", torch.cumprod(1.0 - betas, 0))
        self.register_buffer("x_mean", torch.tensor(float(x_mean), dtype=torch.float64))
        self.register_buffer("x_scale", torch.tensor(float(x_scale), dtype=torch.float64))
        self.register_buffer("c_mean", torch.tensor(c_mean, dtype=torch.float64))
        self.register_buffer("c_scale", torch.tensor(c_scale, dtype=torch.float64))

    def predict_noise(self, x, t, cond):
        """x: (N, L) noisy normalised windows; t: (N,) steps in [0, steps); cond: (N, 2) raw."""
        c = (cond - self.c_mean) / self.c_scale
        emb = timestep_embedding(t, self.cfg.t_embed).to(x.dtype)
        return self.denoiser(torch.cat([x, emb, c.to(x.dtype)], dim=-1))

    def loss(self, x0, t, cond, noise):
        """Mean squared noise-prediction error on normalised windows x0."""
        ab = self.alpha_bar[t].to(x0.dtype).unsqueeze(-1)
        xt = torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * noise
        return ((self.predict_noise(xt, t, cond) - noise) ** 2).mean()


def train_diffusion(windows: np.ndarray, conds: np.ndarray, cfg: DiffusionConfig, log=None) -> DiffusionModel:
    if len(windows) == 0:
        raise ValueError("empty residual corpus")
    torch.manual_seed(cfg.seed)
    scale = float(windows.std()) or 1.0
    cs = conds.std(axis=0)
    model = DiffusionModel(cfg, float(windows.mean()), scale, tuple(conds.mean(axis=0)),
                           tuple(np.where(cs > 0, cs, 1.0))).float()
    params = list(model.parameters())
    opt = neural.OptimState(lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 3])
    X = torch.from_numpy((windows - model.x_mean.item()) / scale).float()
    C = torch.from_numpy(conds).float()
    n = len(X)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, cfg.batch):
            idx = torch.from_numpy(order[i:i + cfg.batch])
            t = torch.from_numpy(rng.integers(0, cfg.steps, size=len(idx)))
            noise = torch.from_numpy(rng.standard_normal((len(idx), cfg.length))).float()
            loss = model.loss(X[idx], t, C[idx], noise)
            grads = torch.autograd.grad(loss, params)
            neural.adamw_step(params, grads, opt)
            total += loss.item() * len(idx)
        if log:
            log(f"epoch {epoch:3d} loss {total / n:.5f}")
    return model.double().eval()


@torch.no_grad()
def sample_residuals(model: DiffusionModel, conds, rng: np.random.Generator) -> np.ndarray:
    """Ancestral sampling: one residual window per condition row, in metres."""
    conds = torch.as_tensor(np.asarray(conds, dtype=float).reshape(-1, 2))
    n, L = len(conds), model.cfg.length
    x = torch.from_numpy(rng.standard_normal((n, L)))
    for t in range(model.cfg.steps - 1, -1, -1):
        tt = torch.full((n,), t, dtype=torch.long)
        eps = model.predict_noise(x, tt, conds).double()
        a, ab, b = model.alphas[t], model.alpha_bar[t], model.betas[t]
        x = (x - b / torch.sqrt(1.0 - ab) * eps) / torch.sqrt(a)
        if t > 0:
            x = x + torch.sqrt(b) * torch.from_numpy(rng.standard_normal((n, L)))
    out = (x * model.x_scale + model.x_mean).numpy()
    if not np.all(np.isfinite(out)):
        raise neural.NonFiniteError("non-finite diffusion samples")
    return out


def save_diffusion(model: DiffusionModel, path) -> None:
    config = asdict(model.cfg)
    neural.save_checkpoint({
        "format": neural.CHECKPOINT_FORMAT,
        "version": neural.CHECKPOINT_VERSION,
        "model": "diffusion",
        "config": config,
        "config_hash": neural.config_hash(config),
        "tensors": neural.state_to_json(model),
    }, path)


def load_diffusion(path_or_ckpt) -> DiffusionModel:
    ckpt = path_or_ckpt if isinstance(path_or_ckpt, dict) else neural.load_checkpoint(path_or_ckpt)
    if ckpt.get("model") != "diffusion":
        raise ValueError("checkpoint does not hold a diffusion model")
    model = DiffusionModel(DiffusionConfig.from_dict(ckpt["config"]))
    model.load_state_dict(neural.state_from_json(ckpt["tensors"]))
    return model.double().eval()


# --- generators ------------------------------------------------------------------------

class Generator:
    """Produces (n, L) residual windows for (n, 2) conditions."""

    name = "generator"
    length = 8

    def sample(self, conds, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


class DiffusionGenerator(Generator):
    name = "diffusion"

    def __init__(self, model: DiffusionModel):
        self.model = model
        self.length = model.cfg.length

    def sample(self, conds, rng):
        return sample_residuals(self.model, conds, rng)


class GaussianGenerator(Generator):
    """Independent normal residuals with the corpus mean and spread."""

    name = "gaussian"

    def __init__(self, windows: np.ndarray):
        self.length = windows.shape[1]
        self.mean = float(windows.mean())
        self.std = float(windows.std())

    def sample(self, conds, rng):
        n = len(np.asarray(conds).reshape(-1, 2))
        return rng.normal(self.mean, self.std, size=(n, self.length))


class BootstrapGenerator(Generator):
    """Resamples whole windows from the training corpus."""

    name = "bootstrap"

    def __init__(self, windows: np.ndarray):
        self.windows = np.asarray(windows, dtype=float)
        self.length = self.windows.shape[1]

    def sample(self, conds, rng):
        n = len(np.asarray(conds).reshape(-1, 2))
        return self.windows[rng.integers(0, len(self.windows), size=n)]


class ConstantGenerator(Generator):
    name = "constant"

    def __init__(self, value: float, length: int = 8):
        self.value = float(value)
        self.length = length

    def sample(self, conds, rng):
        n = len(np.asarray(conds).reshape(-1, 2))
        return np.full((n, self.length), self.value)


def compare_generators(real: np.ndarray, samples: dict[str, np.ndarray]) -> list[dict]:
    """KS distance and absolute deviations of mean/median/P95/P99 against held-out residuals."""
    if len(samples) < 2:
        raise ValueError("need at least two generators to compare")
    real = np.asarray(real, dtype=float).ravel()
    ref = {"mean": real.mean(), "median": np.median(real),
           "p95": np.percentile(real, 95), "p99": np.percentile(real, 99)}
    rows = []
    for name, fake in samples.items():
        fake = np.asarray(fake, dtype=float).ravel()
        got = {"mean": fake.mean(), "median": np.median(fake),
               "p95": np.percentile(fake, 95), "p99": np.percentile(fake, 99)}
        row = {"generator": name, "ks": float(stats.ks_2samp(real, fake).statistic)}
        row.update({f"d_{k}": float(abs(got[k] - ref[k])) for k in ref})
        rows.append(row)
    return rows


# --- injection ----------------------------------------------------------------------------

def window_condition(window: FusionWindow, rate: float = 20.0) -> np.ndarray:
    speed = np.linalg.norm(np.diff(window.P, axis=0), axis=1).mean() * rate
    return np.array([speed, window.M.sum(axis=1).mean()])


def mix_and_inject(window: FusionWindow, fake, alpha_gan: float = 0.5, subset_frac: float = 0.10,
                   rng: np.random.Generator | None = None) -> FusionWindow:
    """Blend synthetic residuals into a random subset of the valid ranges.

    `fake` supplies synthetic residuals: an array with at least as many values
    as selected points, or a Generator sampled at the window's condition.
    Only D changes; every other array is passed through as the same object.
    """
    if not 0.0 <= alpha_gan <= 1.0:
        raise ValueError("alpha_gan must lie in [0, 1]")
    if window.G is None:
        raise MissingTruthError("injection needs geometric ranges")
    rng = rng or np.random.default_rng()
    rows, cols = np.nonzero(window.M == 1)
    n = math.ceil(subset_frac * len(rows))
    if n == 0 or alpha_gan == 0.0:
        return replace(window)
    pick = rng.choice(len(rows), size=n, replace=False)
    r, c = rows[pick], cols[pick]
    if isinstance(fake, Generator):
        cond = window_condition(window)
        eps_fake = fake.sample(np.repeat(cond[None], math.ceil(n / fake.length), axis=0), rng).ravel()[:n]
    else:
        eps_fake = np.asarray(fake, dtype=float).ravel()[:n]
    geom = window.G[r, c]
    eps_real = window.D[r, c] - geom
    D = window.D.copy()
    D[r, c] = geom + ((1.0 - alpha_gan) * eps_real + alpha_gan * eps_fake)
    return replace(window, D=D)


def make_augmenter(generator: Generator, alpha_gan: float = 0.5, subset_frac: float = 0.10):
    def augment(window: FusionWindow, rng: np.random.Generator) -> FusionWindow:
        return mix_and_inject(window, generator, alpha_gan, subset_frac, rng)
    return augment
