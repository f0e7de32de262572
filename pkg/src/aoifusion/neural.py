"""Differentiable building blocks shared by the learned models.

Reverse-mode differentiation comes from torch autograd; layers, recurrent
cells, losses and the optimizers are written out here so their exact
equations are visible and testable.  LSTM gate order is (input, forget,
candidate, output).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

torch.set_num_threads(1)

CHECKPOINT_FORMAT = "aoifusion-checkpoint"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return torch.from_numpy(rng.uniform(-bound, bound, size=shape))


class Dense(nn.Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        self.weight = nn.Parameter(uniform_init(rng, (n_out, n_in), n_in))
        self.bias = nn.Parameter(torch.zeros(n_out, dtype=torch.float64))

    def forward(self, x):
        return x @ self.weight.T + self.bias


class MLP(nn.Module):
    """Dense layers with tanh between them and a linear output."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator):
        super().__init__()
        self.layers = nn.ModuleList(Dense(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.tanh(x)
        return x


def _cell(gates, c, hidden: int):
    i, f, g, o = gates.split(hidden, dim=-1)
    c_new = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
    h_new = torch.sigmoid(o) * torch.tanh(c_new)
    return h_new, c_new


def lstm_step(x, h, c, w_ih, w_hh, b):
    """One LSTM step; weights are (4H, D) and (4H, H), bias (4H,)."""
    hidden = w_hh.shape[1]
    if x.shape[-1] != w_ih.shape[1] or h.shape[-1] != hidden or c.shape[-1] != hidden:
        raise ValueError("LSTM dimension mismatch")
    return _cell(x @ w_ih.T + h @ w_hh.T + b, c, hidden)


class LSTMCell(nn.Module):
    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.hidden = hidden
        self.w_ih = nn.Parameter(uniform_init(rng, (4 * hidden, n_in), n_in))
        self.w_hh = nn.Parameter(uniform_init(rng, (4 * hidden, hidden), hidden))
        b = torch.zeros(4 * hidden, dtype=torch.float64)
        b[hidden:2 * hidden] = 1.0
        self.bias = nn.Parameter(b)

    def step(self, x, h, c):
        return lstm_step(x, h, c, self.w_ih, self.w_hh, self.bias)

    def zero_state(self, batch: int, like: torch.Tensor):
        z = like.new_zeros((batch, self.hidden))
        return z, z.clone()

    def run(self, xs, reverse: bool = False, state=None):
        """Run over (B, T, D) inputs; returns (B, T, H) hidden states and final state.

        Uses torch's fused LSTM kernel, which evaluates the same gate
        equations as `step`.
        """
        B = xs.shape[0]
        h, c = self.zero_state(B, xs) if state is None else state
        if reverse:
            xs = xs.flip(1)
        weights = [self.w_ih, self.w_hh, self.bias, torch.zeros_like(self.bias)]
        out, h, c = torch.lstm(xs, (h.unsqueeze(0), c.unsqueeze(0)), weights, True, 1, 0.0, self.training, False, True)
        if reverse:
            out = out.flip(1)
        return out, (h[0], c[0])

    def run_steps(self, xs, reverse: bool = False, state=None):
        """Step-by-step reference for `run`."""
        B, T, _ = xs.shape
        h, c = self.zero_state(B, xs) if state is None else state
        out = [None] * T
        order = range(T - 1, -1, -1) if reverse else range(T)
        for t in order:
            h, c = self.step(xs[:, t], h, c)
            out[t] = h
        return torch.stack(out, dim=1), (h, c)


class BiLSTM(nn.Module):
    """Stacked bidirectional LSTM; each layer feeds [forward, backward] to the next."""

    def __init__(self, n_in: int, hidden: int, layers: int, rng: np.random.Generator):
        super().__init__()
        self.fwd = nn.ModuleList()
        self.bwd = nn.ModuleList()
        for k in range(layers):
            d = n_in if k == 0 else 2 * hidden
            self.fwd.append(LSTMCell(d, hidden, rng))
            self.bwd.append(LSTMCell(d, hidden, rng))

    def forward(self, xs):
        for f, b in zip(self.fwd, self.bwd):
            hf, _ = f.run(xs)
            hb, _ = b.run(xs, reverse=True)
            xs = torch.cat([hf, hb], dim=-1)
        return xs


def huber(e, delta: float):
    """Elementwise Huber loss: e^2/2 inside |e| <= delta, delta(|e| - delta/2) outside."""
    if not delta > 0:
        raise ValueError("delta must be > 0")
    a = e.abs()
    return torch.where(a <= delta, 0.5 * e * e, delta * (a - 0.5 * delta))


def huber_grad(e, delta: float):
    return torch.clamp(e, -delta, delta)


def wmse(pred, true, weights):
    """Mean over all leading dimensions of sum_i w_i (pred_i - true_i)^2."""
    w = torch.as_tensor(weights, dtype=pred.dtype)
    if torch.any(w <= 0):
        raise ValueError("WMSE weights must be > 0")
    err = pred - true
    return (err * err * w).sum(dim=-1).mean()


@dataclass
class OptimState:
    lr: float = 3e-4
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


@torch.no_grad()
def adamw_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor | None], opt: OptimState):
    """Decoupled weight decay, then the bias-corrected Adam step (in place)."""
    if not opt.m:
        opt.m = [torch.zeros_like(p) for p in params]
        opt.v = [torch.zeros_like(p) for p in params]
    opt.step += 1
    b1, b2 = opt.betas
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError("gradient shape does not match parameter")
        if opt.weight_decay:
            p.mul_(1.0 - opt.lr * opt.weight_decay)
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.sub_(opt.lr * (m / c1) / ((v / c2).sqrt() + opt.eps))
    return params


def grad_check(f: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], h: float = 1e-5) -> float:
    """Max relative error between autograd and central differences over every coordinate.

    `f` evaluates the scalar loss from the current values of `params`
    (float64 leaf tensors).  Relative error per coordinate is
    |a - n| / (|a| + |n| + 1e-12).
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                a = gflat[i].item()
                worst = max(worst, abs(a - num) / (abs(a) + abs(num) + 1e-12))
    return worst


# --- checkpoints -----------------------------------------------------------------

def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def state_to_json(module: nn.Module) -> dict:
    return {
        name: {"shape": list(t.shape), "data": t.detach().double().reshape(-1).tolist()}
        for name, t in module.state_dict().items()
    }


def state_from_json(tensors: dict) -> dict:
    return {
        name: torch.tensor(v["data"], dtype=torch.float64).reshape(v["shape"])
        for name, v in tensors.items()
    }


def save_checkpoint(ckpt: dict, path: str | Path) -> None:
    """Write a checkpoint dict (already JSON-ready) to `path`."""
    with open(path, "w") as fh:
        json.dump(ckpt, fh)


def load_checkpoint(path: str | Path) -> dict:
    with open(path) as fh:
        ckpt = json.load(fh)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {ckpt.get('version')}")
    return ckpt
