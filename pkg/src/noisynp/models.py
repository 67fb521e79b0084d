"""Neural-process variants built from the backbone blocks.

``np``    latent path only (mean-pooled latent encoder)
``cnp``   mean-pooled deterministic path
``anp``   cross-attention deterministic path + latent path
``canp``  cross-attention deterministic path
``bnp``   ``cnp`` base path + bootstrap ensemble members
``banp``  ``canp`` base path + bootstrap ensemble members

An ``r-`` prefix marks the robust training objective; it never changes the
architecture.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .backbone import MLP, BackboneConfig, MultiHeadCrossAttention, init_params, positive_transform
from .errors import ConfigError
from .funcdata import PointSet, TaskBatch

VARIANT_IDS = ("np", "cnp", "anp", "canp", "bnp", "banp")
ROBUST_DEFAULT = ("anp", "banp")


@dataclass(frozen=True)
class ModelVariant:
    id: str
    robust: bool = False

    def __post_init__(self):
        if self.id not in VARIANT_IDS:
            raise ConfigError(f"unknown model variant {self.id!r}")

    @classmethod
    def parse(cls, name: str, allow_any_robust: bool = False) -> "ModelVariant":
        name = name.strip().lower()
        robust = name.startswith("r-")
        base = name[2:] if robust else name
        variant = cls(base, robust)
        if robust and base not in ROBUST_DEFAULT and not allow_any_robust:
            raise ConfigError(
                f"robust training is configured for {ROBUST_DEFAULT} only; got {name!r}")
        return variant

    @property
    def name(self) -> str:
        return ("r-" if self.robust else "") + self.id

    @property
    def has_latent(self) -> bool:
        return self.id in ("np", "anp")

    @property
    def attention_based(self) -> bool:
        return self.id in ("anp", "canp", "banp")

    @property
    def bootstrapped(self) -> bool:
        return self.id in ("bnp", "banp")

    @property
    def has_deterministic_path(self) -> bool:
        return self.id != "np"


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "anp"
    dim_x: int = 1
    dim_y: int = 1
    z_dim: int = 128
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    bootstrap_train: int = 4
    bootstrap_eval: int = 50
    allow_any_robust: bool = False

    def __post_init__(self):
        ModelVariant.parse(self.variant, self.allow_any_robust)
        if self.z_dim < 1 or self.dim_x < 1 or self.dim_y < 1:
            raise ConfigError("dimensions must be >= 1")
        if self.bootstrap_train < 1 or self.bootstrap_eval < 1:
            raise ConfigError("bootstrap member counts must be >= 1")

    @property
    def model_variant(self) -> ModelVariant:
        return ModelVariant.parse(self.variant, self.allow_any_robust)


@dataclass
class ContextRepr:
    pooled: Optional[torch.Tensor] = None      # [B, H]
    keys: Optional[torch.Tensor] = None        # [B, n, H] (x embeddings)
    values: Optional[torch.Tensor] = None      # [B, n, H]
    is_empty: bool = False


@dataclass
class LatentDistribution:
    mean: torch.Tensor
    std: torch.Tensor

    def log_prob(self, z: torch.Tensor) -> torch.Tensor:
        """Log-density summed over the latent dimensions."""
        var = self.std ** 2
        return (-0.5 * torch.log(2 * torch.pi * var) - 0.5 * (z - self.mean) ** 2 / var).sum(-1)


@dataclass
class PredictiveDistribution:
    """Per-point Gaussian; leading axis indexes samples/members."""

    mean: torch.Tensor   # [S, B, m, d_y]
    std: torch.Tensor

    def __len__(self):
        return self.mean.shape[0]

    def __getitem__(self, i) -> "PredictiveDistribution":
        return PredictiveDistribution(self.mean[i], self.std[i])


@dataclass
class ModelOutput:
    pred: PredictiveDistribution
    q_dist: Optional[LatentDistribution] = None
    p_dist: Optional[LatentDistribution] = None
    z: Optional[torch.Tensor] = None
    base: Optional[PredictiveDistribution] = None
    n_ctx_in_query: int = 0

    @property
    def K(self) -> int:
        return len(self.pred)

    @property
    def predictions(self) -> list:
        return [self.pred[i] for i in range(len(self.pred))]


@dataclass
class TaskTensors:
    xc: torch.Tensor
    yc: torch.Tensor
    xt: torch.Tensor
    yt: torch.Tensor
    yt_clean: torch.Tensor

    @property
    def num_ctx(self):
        return self.xc.shape[-2]

    @property
    def num_tar(self):
        return self.xt.shape[-2]


def to_tensors(task: TaskBatch, dtype=torch.float32) -> TaskTensors:
    def t(a):
        return torch.as_tensor(np.ascontiguousarray(a), dtype=dtype)
    return TaskTensors(t(task.ctx.x), t(task.ctx.y), t(task.tar.x), t(task.tar.y), t(task.clean_tar_y))


def _canonical_order(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-task permutation sorting points lexicographically by (x, y)."""
    keys = np.concatenate([x, y], axis=-1)             # [B, n, d]
    order = np.empty(keys.shape[:2], dtype=np.int64)
    for b in range(keys.shape[0]):
        # lexsort sorts by the last key first
        order[b] = np.lexsort(keys[b].T[::-1])
    return order


def bootstrap_indices(x, y, members: int, rng: np.random.Generator) -> np.ndarray:
    """Indices ``[members, B, n]`` of with-replacement resamples.

    Draws are made on a canonical ordering of each context, so the resampled
    sets depend on the set contents and not on the order they arrive in.
    """
    x = np.asarray(x.detach().cpu() if torch.is_tensor(x) else x)
    y = np.asarray(y.detach().cpu() if torch.is_tensor(y) else y)
    bsz, n = x.shape[:2]
    if n == 0:
        raise ConfigError("cannot bootstrap an empty context")
    if members < 1:
        raise ConfigError("need at least one bootstrap member")
    order = _canonical_order(x, y)
    draws = rng.integers(0, n, size=(members, bsz, n))
    return np.take_along_axis(order[None], draws, axis=-1)


def bootstrap_contexts(ctx: PointSet, members: int, rng: np.random.Generator) -> list[PointSet]:
    idx = bootstrap_indices(ctx.x, ctx.y, members, rng)
    rows = np.arange(ctx.x.shape[0])[:, None]
    return [PointSet(ctx.x[rows, i], ctx.y[rows, i]) for i in idx]


def _gather(t: torch.Tensor, idx: np.ndarray) -> torch.Tensor:
    """``t`` is [B, n, d]; ``idx`` is [M, B, n] -> [M, B, n, d]."""
    idx_t = torch.as_tensor(idx)
    expanded = t.unsqueeze(0).expand(idx.shape[0], *t.shape)
    return torch.gather(expanded, 2, idx_t.unsqueeze(-1).expand(*idx.shape, t.shape[-1]))


class NeuralProcess(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.variant = cfg.model_variant
        bb = cfg.backbone
        h, act = bb.hidden_dim, bb.activation
        dxy = cfg.dim_x + cfg.dim_y
        v = self.variant
        dec_in = cfg.dim_x
        if v.has_deterministic_path:
            if v.attention_based:
                self.value_net = MLP(dxy, h, h, bb.enc_depth, act)
                self.qk_net = MLP(cfg.dim_x, h, h, bb.qk_depth, act)
                self.attention = MultiHeadCrossAttention(h, h, h, h, bb.n_heads)
            else:
                self.det_pre = MLP(dxy, h, h, bb.enc_depth, act)
                self.det_post = MLP(h, h, h, bb.post_depth, act)
            self.null_repr = nn.Parameter(torch.zeros(h))
            dec_in += h * (2 if v.bootstrapped else 1)
        if v.has_latent:
            self.lat_pre = MLP(dxy, h, h, bb.enc_depth, act)
            self.lat_post = MLP(h, 2 * cfg.z_dim, h, bb.post_depth, act)
            self.prior_mean = nn.Parameter(torch.zeros(cfg.z_dim))
            self.prior_raw_std = nn.Parameter(torch.zeros(cfg.z_dim))
            dec_in += cfg.z_dim
        self.decoder = MLP(dec_in, 2 * cfg.dim_y, h, bb.dec_depth, act)
        init_params(self, seed)

    @property
    def sigma_floor(self) -> float:
        return self.cfg.backbone.sigma_floor

    # -- encoders ---------------------------------------------------------

    def encode_context(self, xc: torch.Tensor, yc: torch.Tensor) -> ContextRepr:
        """Deterministic context representation (leading dims are batch dims)."""
        v = self.variant
        if not v.has_deterministic_path:
            raise ConfigError(f"{v.name} has no deterministic path")
        if xc.shape[-2] == 0:
            return ContextRepr(is_empty=True)
        pairs = torch.cat([xc, yc], -1)
        if v.attention_based:
            return ContextRepr(keys=self.qk_net(xc), values=self.value_net(pairs))
        return ContextRepr(pooled=self.det_post(self.det_pre(pairs).mean(-2)))

    def readout(self, rep: ContextRepr, xq: torch.Tensor) -> torch.Tensor:
        """Per-query conditioning vector ``[..., m, H]``."""
        m = xq.shape[-2]
        if rep.is_empty:
            return self.null_repr.expand(*xq.shape[:-1], self.null_repr.shape[0])
        if rep.pooled is not None:
            return rep.pooled.unsqueeze(-2).expand(*rep.pooled.shape[:-1], m, rep.pooled.shape[-1])
        return self.attention(self.qk_net(xq), rep.keys, rep.values)

    def encode_latent(self, x: torch.Tensor, y: torch.Tensor) -> LatentDistribution:
        if not self.variant.has_latent:
            raise ConfigError(f"{self.variant.name} has no latent path")
        floor = self.sigma_floor
        if x.shape[-2] == 0:
            shape = x.shape[:-2] + self.prior_mean.shape
            return LatentDistribution(self.prior_mean.expand(shape),
                                      positive_transform(self.prior_raw_std, floor).expand(shape))
        pooled = self.lat_pre(torch.cat([x, y], -1)).mean(-2)
        mean, raw = self.lat_post(pooled).chunk(2, -1)
        return LatentDistribution(mean, positive_transform(raw, floor))

    def decode(self, xq: torch.Tensor, readouts: list, z: Optional[torch.Tensor] = None
               ) -> PredictiveDistribution:
        """``xq`` [S, B, m, dx]; readouts [S, B, m, H] each; ``z`` [S, B, z_dim]."""
        parts = [xq] + list(readouts)
        if z is not None:
            parts.append(z.unsqueeze(-2).expand(*z.shape[:-1], xq.shape[-2], z.shape[-1]))
        out = self.decoder(torch.cat(parts, -1))
        mean, raw = out.chunk(2, -1)
        return PredictiveDistribution(mean, positive_transform(raw, self.sigma_floor))

    # -- full pass --------------------------------------------------------

    def default_samples(self, phase: str, k_train: int = 1, k_eval: int = 50) -> int:
        v = self.variant
        if v.bootstrapped:
            return self.cfg.bootstrap_train if phase == "train" else self.cfg.bootstrap_eval
        if v.has_latent:
            return k_train if phase == "train" else k_eval
        return 1

    def forward(self, batch: TaskTensors, num_samples: int, rng: np.random.Generator,
                target_y: Optional[torch.Tensor] = None, query: str = "target",
                z: Optional[torch.Tensor] = None) -> ModelOutput:
        """Predict at the targets (``query="target"``) or at context+targets.

        ``target_y`` are the target values the posterior ``q`` conditions on;
        training passes the observed targets, evaluation the clean ones.
        ``z`` overrides the latent samples ([S, B, z_dim]).
        """
        v = self.variant
        if num_samples < 1:
            raise ConfigError("num_samples must be >= 1")
        if query not in ("target", "union"):
            raise ConfigError(f"query must be 'target' or 'union', got {query!r}")
        xc, yc, xt = batch.xc, batch.yc, batch.xt
        yt = batch.yt if target_y is None else target_y
        xq = torch.cat([xc, xt], -2) if query == "union" else xt
        n_ctx_in_query = xc.shape[-2] if query == "union" else 0

        if not v.has_latent and not v.bootstrapped:
            num_samples = 1
        out = ModelOutput(pred=None, n_ctx_in_query=n_ctx_in_query)
        readouts = []
        if v.has_deterministic_path:
            rep = self.encode_context(xc, yc)
            base_read = self.readout(rep, xq)
            readouts.append(base_read)

        if v.bootstrapped:
            if xc.shape[-2] == 0:
                member_read = base_read.unsqueeze(0).expand(num_samples, *base_read.shape)
            else:
                idx = bootstrap_indices(xc, yc, num_samples, rng)
                bx, by = _gather(xc, idx), _gather(yc, idx)
                member_read = self.readout(self.encode_context(bx, by), xq.unsqueeze(0).expand(
                    num_samples, *xq.shape))
            base_in = base_read.unsqueeze(0)
            out.base = self.decode(xq.unsqueeze(0), [base_in, base_in])
            stacked = base_read.unsqueeze(0).expand(num_samples, *base_read.shape)
            out.pred = self.decode(xq.unsqueeze(0).expand(num_samples, *xq.shape),
                                   [stacked, member_read])
            return out

        if v.has_latent:
            x_all = torch.cat([xc, xt], -2)
            y_all = torch.cat([yc, yt], -2)
            out.q_dist = self.encode_latent(x_all, y_all)
            out.p_dist = self.encode_latent(xc, yc)
            if z is None:
                eps = torch.as_tensor(
                    rng.standard_normal((num_samples,) + tuple(out.q_dist.mean.shape)),
                    dtype=out.q_dist.mean.dtype)
                z = out.q_dist.mean + out.q_dist.std * eps
            out.z = z
            num_samples = z.shape[0]
        xs = xq.unsqueeze(0).expand(num_samples, *xq.shape)
        reads = [r.unsqueeze(0).expand(num_samples, *r.shape) for r in readouts]
        out.pred = self.decode(xs, reads, out.z)
        return out


def build_model(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> NeuralProcess:
    return NeuralProcess(cfg, seed).to(dtype)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
