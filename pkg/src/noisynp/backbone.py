"""Differentiable building blocks shared by all model variants.

Gradients come from torch autograd. :func:`grad_check` is an independent
central-difference checker used to verify them at float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, TrainingError

ACTIVATIONS = {
    "relu": nn.ReLU,
    "tanh": nn.Tanh,
    "gelu": nn.GELU,
    "linear": nn.Identity,
}


@dataclass(frozen=True)
class BackboneConfig:
    hidden_dim: int = 128
    enc_depth: int = 4
    dec_depth: int = 3
    qk_depth: int = 2
    post_depth: int = 2
    n_heads: int = 8
    activation: str = "relu"
    sigma_floor: float = 0.1

    def __post_init__(self):
        if self.hidden_dim < 1 or self.hidden_dim % self.n_heads:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} must be positive and divisible by n_heads {self.n_heads}")
        for name in ("enc_depth", "dec_depth", "qk_depth", "post_depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not 0 < self.sigma_floor < 1:
            raise ConfigError("sigma_floor must lie in (0, 1)")


class MLP(nn.Module):
    """``depth`` affine layers with the activation between consecutive ones."""

    def __init__(self, d_in: int, d_out: int, d_hidden: int, depth: int, activation: str = "relu"):
        super().__init__()
        if depth < 1:
            raise ConfigError("MLP depth must be >= 1")
        dims = [d_in] + [d_hidden] * (depth - 1) + [d_out]
        layers: list[nn.Module] = []
        for i in range(depth):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i < depth - 1:
                layers.append(ACTIVATIONS[activation]())
        self.net = nn.Sequential(*layers)
        self.d_in = d_in

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d_in:
            raise ConfigError(f"MLP expects last dim {self.d_in}, got {tuple(x.shape)}")
        return self.net(x)


def mlp_apply(mlp: MLP, inputs: torch.Tensor) -> torch.Tensor:
    return mlp(inputs)


class MultiHeadCrossAttention(nn.Module):
    """Scaled dot-product attention per head, concatenated and projected."""

    def __init__(self, d_query: int, d_key: int, d_value: int, d_model: int, n_heads: int,
                 d_out: Optional[int] = None):
        super().__init__()
        if d_model % n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.w_q = nn.Linear(d_query, d_model)
        self.w_k = nn.Linear(d_key, d_model)
        self.w_v = nn.Linear(d_value, d_model)
        self.w_o = nn.Linear(d_model, d_out or d_model)

    def _split(self, t):
        # [..., n, d_model] -> [..., heads, n, d_head]
        return t.unflatten(-1, (self.n_heads, self.d_head)).transpose(-3, -2)

    def forward(self, queries, keys, values, return_weights: bool = False):
        if keys.shape[-2] == 0:
            raise ConfigError("cross-attention needs at least one key; use the null-context path")
        q = self._split(self.w_q(queries))
        k = self._split(self.w_k(keys))
        v = self._split(self.w_v(values))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        weights = torch.softmax(scores, dim=-1)
        heads = (weights @ v).transpose(-3, -2).flatten(-2)
        out = self.w_o(heads)
        return (out, weights) if return_weights else out


def positive_transform(raw: torch.Tensor, sigma_floor: float = 0.1) -> torch.Tensor:
    return sigma_floor + (1.0 - sigma_floor) * F.softplus(raw)


def init_params(module: nn.Module, seed: int) -> nn.Module:
    """Fan-in scaled uniform init for every affine layer, seeded."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for layer in module.modules():
            if isinstance(layer, nn.Linear):
                bound = 1.0 / math.sqrt(layer.in_features)
                w = torch.rand(layer.weight.shape, generator=gen, dtype=torch.float64)
                layer.weight.copy_((2 * w - 1) * bound)
                if layer.bias is not None:
                    b = torch.rand(layer.bias.shape, generator=gen, dtype=torch.float64)
                    layer.bias.copy_((2 * b - 1) * bound)
    return module


class Adam:
    """Adam with bias correction over a module's named parameters.

    State lives in plain dicts of tensors so checkpoints can serialize it
    tensor by tensor.
    """

    def __init__(self, named_params: Iterable[tuple[str, torch.Tensor]], lr: float = 5e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.exp_avg = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.exp_avg_sq = {n: torch.zeros_like(p) for n, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self, lr: Optional[float] = None, grads: Optional[dict] = None):
        lr = self.lr if lr is None else lr
        grads = grads or {n: p.grad for n, p in self.params.items()}
        names = [n for n in self.params if grads.get(n) is not None]
        g = [grads[n] for n in names]
        if g and not torch.isfinite(torch.stack(torch._foreach_norm(g))).all():
            bad = next(n for n in names if not torch.isfinite(grads[n]).all())
            raise TrainingError(f"non-finite gradient for parameter {bad!r}", name=bad)
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1 ** t
        c2 = 1 - self.beta2 ** t
        if not g:
            return
        m = [self.exp_avg[n] for n in names]
        v = [self.exp_avg_sq[n] for n in names]
        p = [self.params[n] for n in names]
        torch._foreach_mul_(m, self.beta1)
        torch._foreach_add_(m, g, alpha=1 - self.beta1)
        torch._foreach_mul_(v, self.beta2)
        torch._foreach_addcmul_(v, g, g, value=1 - self.beta2)
        denom = torch._foreach_div(v, c2)
        torch._foreach_sqrt_(denom)
        torch._foreach_add_(denom, self.eps)
        torch._foreach_addcdiv_(p, m, denom, value=-lr / c1)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for n in self.params:
            out[f"exp_avg/{n}"] = self.exp_avg[n]
            out[f"exp_avg_sq/{n}"] = self.exp_avg_sq[n]
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor], step_count: int):
        with torch.no_grad():
            for n in self.params:
                self.exp_avg[n].copy_(tensors[f"exp_avg/{n}"])
                self.exp_avg_sq[n].copy_(tensors[f"exp_avg_sq/{n}"])
        self.step_count = int(step_count)


def optimizer_step(params: dict, grads: dict, state: Optional[Adam], lr: float) -> Adam:
    """Functional wrapper: apply one Adam update to ``params`` in place."""
    if state is None:
        state = Adam(params.items(), lr=lr)
    for n, g in grads.items():
        if g.shape != params[n].shape:
            raise ConfigError(f"gradient shape {tuple(g.shape)} != parameter shape for {n!r}")
    state.step(lr=lr, grads=grads)
    return state


def grad_check(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
               eps: float = 1e-6, max_coords: Optional[int] = None,
               rng: Optional[np.random.Generator] = None, floor: float = 1e-4) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn`` must be a deterministic closure over ``params`` (float64
    leaves with ``requires_grad``). With ``max_coords`` only a random subset
    of coordinates per tensor is perturbed. The relative error of a
    coordinate is ``|a - n| / max(|a|, |n|, floor)``. The floor keeps exactly
    zero gradients (e.g. a key bias under softmax shift invariance) from
    turning difference roundoff of ~1e-10 into a large relative error.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.reshape(-1)
            idx = np.arange(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                idx = rng.choice(flat.numel(), size=max_coords, replace=False)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
                num = (up - down) / (2 * eps)
                ana = float(gflat[i])
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
    return worst
