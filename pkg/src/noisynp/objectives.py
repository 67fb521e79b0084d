"""Training objectives.

Every loss is normalized per reconstructed point: the reconstruction term is a
mean over points and output dimensions, and the KL term is divided by the
number of reconstructed points of its task. The robust objective reconstructs
target points only and adds ``w_sigma`` times the mean predicted target
variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch

from .errors import ConfigError
from .models import LatentDistribution, ModelOutput, ModelVariant, TaskTensors

LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class LossConfig:
    include_context_in_recon: bool = True
    w_sigma: float = 0.0
    K_train: int = 1

    def __post_init__(self):
        if self.K_train < 1:
            raise ConfigError("K_train must be >= 1")
        if not math.isfinite(self.w_sigma):
            raise ConfigError("w_sigma must be finite")


@dataclass
class LossBreakdown:
    recon_nll: torch.Tensor
    kl: torch.Tensor
    var_penalty: torch.Tensor
    w_sigma: float
    total: torch.Tensor

    def as_dict(self) -> dict:
        return {
            "recon_nll": float(torch.as_tensor(self.recon_nll).detach()),
            "kl": float(torch.as_tensor(self.kl).detach()),
            "var_penalty": float(torch.as_tensor(self.var_penalty).detach()),
            "w_sigma": float(self.w_sigma),
            "total": float(torch.as_tensor(self.total).detach()),
        }


def gaussian_log_pdf(y, mu, sigma, reduction: str = "mean"):
    y, mu, sigma = (torch.as_tensor(t, dtype=torch.float64) if not torch.is_tensor(t) else t
                    for t in (y, mu, sigma))
    if (sigma <= 0).any():
        raise ConfigError("sigma must be positive")
    out = -0.5 * (LOG_2PI + 2 * torch.log(sigma)) - 0.5 * ((y - mu) / sigma) ** 2
    if reduction == "mean":
        return out.mean()
    if reduction == "sum":
        return out.sum()
    if reduction == "none":
        return out
    raise ConfigError(f"unknown reduction {reduction!r}")


def diag_gaussian_kl(q: LatentDistribution, p: LatentDistribution) -> torch.Tensor:
    """KL(q || p), summed over the last axis."""
    var_ratio = (q.std / p.std) ** 2
    mahal = ((q.mean - p.mean) / p.std) ** 2
    return (torch.log(p.std) - torch.log(q.std) + 0.5 * (var_ratio + mahal) - 0.5).sum(-1)


def _query_targets(output: ModelOutput, batch: TaskTensors, include_context: bool):
    """Observed y values and prediction slice for the reconstruction set."""
    n_ctx = output.n_ctx_in_query
    if include_context:
        if n_ctx != batch.num_ctx:
            raise ConfigError("reconstruction over all points needs a union query (query='union')")
        return torch.cat([batch.yc, batch.yt], -2), slice(None)
    return batch.yt, slice(n_ctx, None)


def _recon_nll(pred, y, sl) -> torch.Tensor:
    return -gaussian_log_pdf(y, pred.mean[..., sl, :], pred.std[..., sl, :])


def variance_penalty(output_or_std, n_ctx_in_query: int = 0) -> torch.Tensor:
    """Mean squared predictive std over target points, samples and batch."""
    if isinstance(output_or_std, ModelOutput):
        out = output_or_std
        stds = [out.pred.std[..., out.n_ctx_in_query:, :]]
        if out.base is not None:
            stds.append(out.base.std[..., out.n_ctx_in_query:, :])
        if len(stds) == 1:
            return (stds[0] ** 2).mean()
        return torch.cat([s.reshape(-1) for s in stds]).pow(2).mean()
    std = output_or_std[..., n_ctx_in_query:, :]
    return (std ** 2).mean()


def _assemble(recon, kl, w_sigma, penalty) -> LossBreakdown:
    return LossBreakdown(recon, kl, penalty, w_sigma, recon + kl + w_sigma * penalty)


def _latent_terms(output: ModelOutput, batch: TaskTensors, include_context: bool):
    y, sl = _query_targets(output, batch, include_context)
    recon = _recon_nll(output.pred, y, sl)
    n_points = y.shape[-2]
    kl = (diag_gaussian_kl(output.q_dist, output.p_dist) / n_points).mean()
    return recon, kl


def _bootstrap_recon(output: ModelOutput, batch: TaskTensors, include_context: bool):
    y, sl = _query_targets(output, batch, include_context)
    return _recon_nll(output.base, y, sl) + _recon_nll(output.pred, y, sl)


def np_loss(output: ModelOutput, batch: TaskTensors, cfg: LossConfig) -> LossBreakdown:
    """Reconstruction + KL; ``w_sigma`` is ignored (treated as 0)."""
    if output.q_dist is None:
        raise ConfigError("np_loss needs a latent-variable output; use cnp_loss")
    recon, kl = _latent_terms(output, batch, cfg.include_context_in_recon)
    return _assemble(recon, kl, 0.0, variance_penalty(output))


def cnp_loss(output: ModelOutput, batch: TaskTensors, cfg: LossConfig) -> LossBreakdown:
    """Negative mean log-likelihood for deterministic and bootstrap outputs."""
    if output.q_dist is not None:
        raise ConfigError("cnp_loss got a latent-variable output; use np_loss")
    if output.base is not None:
        recon = _bootstrap_recon(output, batch, cfg.include_context_in_recon)
    else:
        y, sl = _query_targets(output, batch, cfg.include_context_in_recon)
        recon = _recon_nll(output.pred, y, sl)
    zero = torch.zeros((), dtype=recon.dtype)
    return _assemble(recon, zero, 0.0, variance_penalty(output))


def robust_loss(output: ModelOutput, batch: TaskTensors, cfg: LossConfig) -> LossBreakdown:
    """Target-only reconstruction (unless configured otherwise) + KL + w_sigma * var."""
    if output.q_dist is not None:
        recon, kl = _latent_terms(output, batch, cfg.include_context_in_recon)
    elif output.base is not None:
        recon = _bootstrap_recon(output, batch, cfg.include_context_in_recon)
        kl = torch.zeros((), dtype=recon.dtype)
    else:
        raise ConfigError("robust_loss needs a latent or bootstrap variant")
    return _assemble(recon, kl, float(cfg.w_sigma), variance_penalty(output))


def loss_for(variant: ModelVariant, output: ModelOutput, batch: TaskTensors,
             cfg: LossConfig) -> LossBreakdown:
    if variant.robust:
        return robust_loss(output, batch, cfg)
    if variant.has_latent:
        return np_loss(output, batch, cfg)
    return cnp_loss(output, batch, cfg)


def query_mode(variant: ModelVariant, cfg: LossConfig) -> str:
    """Which points the forward pass must predict for this loss."""
    return "union" if cfg.include_context_in_recon else "target"


def standard_loss_config(variant: ModelVariant, w_sigma: Optional[float] = None,
                         include_context: Optional[bool] = None, K_train: int = 1) -> LossConfig:
    """Default wiring: standard variants reconstruct all points; robust ones targets only."""
    if include_context is None:
        include_context = not variant.robust
    if w_sigma is None or not variant.robust:
        w_sigma = 0.0
    return LossConfig(include_context_in_recon=include_context, w_sigma=w_sigma, K_train=K_train)
