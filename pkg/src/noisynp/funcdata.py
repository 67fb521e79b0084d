"""Gaussian-process function tasks with structured observation noise.

Functions are drawn from GP priors with per-function kernel hyperparameters.
A fraction ``r`` of the points in a set receive additive ``N(0, s^2)`` noise,
the rest stay untouched. Tasks split the points into disjoint context and
target sets and apply noise according to the contamination setup:

=======  ==========================  ==================
setup    train                        eval
=======  ==========================  ==================
1        clean                        noisy context
2        noisy context                noisy context
3        noisy context and targets    noisy context
=======  ==========================  ==================

The clean target values are always kept on the task so that evaluation never
has to look at noisy targets.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .errors import ConfigError, NumericalError

KERNEL_FAMILIES = ("rbf", "matern52", "periodic")
SETUPS = (1, 2, 3)
PHASES = ("train", "eval")

JITTER_START = 1e-5
JITTER_MAX = 1e-2

TASK_FORMAT_VERSION = 1


def _check_range(name, rng_):
    low, high = rng_
    if not (low > 0 and high > 0):
        raise ConfigError(f"{name} must be positive, got {rng_}")
    if low > high:
        raise ConfigError(f"{name} low > high: {rng_}")


@dataclass(frozen=True)
class KernelSpec:
    family: str = "rbf"
    length_scale_range: tuple[float, float] = (0.6, 1.0)
    output_scale_range: tuple[float, float] = (0.1, 1.0)
    period_range: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ConfigError(f"unknown kernel family {self.family!r}")
        for name in ("length_scale_range", "output_scale_range", "period_range"):
            value = tuple(float(v) for v in getattr(self, name))
            if len(value) != 2:
                raise ConfigError(f"{name} needs two values")
            _check_range(name, value)
            object.__setattr__(self, name, value)


@dataclass(frozen=True)
class KernelParams:
    family: str
    length_scale: float
    output_scale: float
    period: Optional[float] = None


@dataclass(frozen=True)
class NoiseSpec:
    """Noise std ``std`` applied to a fraction ``rate`` of the points.

    With ``coupled=True`` the rate follows the std (the single "noise level").
    """

    std: float = 0.0
    rate: float = 0.0
    coupled: bool = True

    def __post_init__(self):
        std = float(self.std)
        if not std >= 0 or not math.isfinite(std):
            raise ConfigError(f"noise std must be >= 0, got {self.std}")
        if self.coupled:
            if std > 1:
                raise ConfigError(f"coupled noise level must lie in [0, 1], got {std}")
            object.__setattr__(self, "rate", std)
        rate = float(self.rate)
        if not 0 <= rate <= 1:
            raise ConfigError(f"noise rate must lie in [0, 1], got {self.rate}")
        object.__setattr__(self, "std", std)
        object.__setattr__(self, "rate", rate)

    @classmethod
    def level(cls, s: float) -> "NoiseSpec":
        return cls(std=s, rate=s, coupled=True)

    @property
    def is_clean(self) -> bool:
        return self.std == 0 or self.rate == 0


@dataclass
class PointSet:
    """Batched points: ``x`` is ``[B, n, d_x]`` and ``y`` is ``[B, n, d_y]``."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.x.shape[:2] != self.y.shape[:2]:
            raise ConfigError(f"x/y leading shapes differ: {self.x.shape} vs {self.y.shape}")

    def __len__(self):
        return self.x.shape[1]


@dataclass
class TaskBatch:
    ctx: PointSet
    tar: PointSet
    clean_tar_y: np.ndarray
    noise_mask_ctx: np.ndarray
    noise_mask_tar: np.ndarray
    setup: int
    phase: str
    clean_ctx_y: Optional[np.ndarray] = None
    kernel_params: Optional[list] = None

    @property
    def batch_size(self) -> int:
        return self.ctx.x.shape[0]

    @property
    def num_ctx(self) -> int:
        return self.ctx.x.shape[1]

    @property
    def num_tar(self) -> int:
        return self.tar.x.shape[1]

    def subset(self, index) -> "TaskBatch":
        """Tasks selected along the batch axis."""
        index = np.atleast_1d(np.arange(self.batch_size)[index])
        return TaskBatch(
            ctx=PointSet(self.ctx.x[index], self.ctx.y[index]),
            tar=PointSet(self.tar.x[index], self.tar.y[index]),
            clean_tar_y=self.clean_tar_y[index],
            noise_mask_ctx=self.noise_mask_ctx[index],
            noise_mask_tar=self.noise_mask_tar[index],
            setup=self.setup,
            phase=self.phase,
            clean_ctx_y=None if self.clean_ctx_y is None else self.clean_ctx_y[index],
            kernel_params=None if self.kernel_params is None
            else [self.kernel_params[i] for i in index],
        )


@dataclass(frozen=True)
class TaskConfig:
    kernel: KernelSpec = field(default_factory=KernelSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    x_range: tuple[float, float] = (-2.0, 2.0)
    max_points: int = 50
    min_ctx: int = 3
    max_ctx: int = 47
    min_tar: int = 3
    batch_size: int = 16

    def __post_init__(self):
        lo, hi = self.x_range
        if not lo < hi:
            raise ConfigError(f"x_range must be increasing, got {self.x_range}")
        if self.min_ctx < 0 or self.min_tar < 1:
            raise ConfigError("set sizes must be nonnegative (targets >= 1)")
        if self.min_ctx > self.max_ctx:
            raise ConfigError("min_ctx > max_ctx")
        if self.max_ctx + self.min_tar > self.max_points:
            raise ConfigError(
                f"max_ctx + min_tar = {self.max_ctx + self.min_tar} exceeds max_points {self.max_points}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def replace(self, **changes) -> "TaskConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# kernels and sampling


def sample_kernel_params(spec: KernelSpec, rng: np.random.Generator) -> KernelParams:
    length = rng.uniform(*spec.length_scale_range)
    scale = rng.uniform(*spec.output_scale_range)
    period = rng.uniform(*spec.period_range) if spec.family == "periodic" else None
    return KernelParams(spec.family, float(length), float(scale), period)


def _as_points(xs) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim == 1:
        xs = xs[:, None]
    return xs


def cross_gram(params: KernelParams, xa, xb) -> np.ndarray:
    xa, xb = _as_points(xa), _as_points(xb)
    diff = xa[:, None, :] - xb[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    var = params.output_scale ** 2
    ell = params.length_scale
    if params.family == "rbf":
        return var * np.exp(-0.5 * (dist / ell) ** 2)
    if params.family == "matern52":
        r = math.sqrt(5.0) * dist / ell
        return var * (1.0 + r + r * r / 3.0) * np.exp(-r)
    if params.family == "periodic":
        s = np.sin(math.pi * dist / params.period)
        return var * np.exp(-2.0 * s * s / ell ** 2)
    raise ConfigError(f"unknown kernel family {params.family!r}")


def gram_matrix(params: KernelParams, xs) -> np.ndarray:
    k = cross_gram(params, xs, xs)
    # exact symmetry regardless of rounding in the distance computation
    return 0.5 * (k + k.T)


def _cholesky_with_jitter(k: np.ndarray, base: float, start: float, stop: float):
    """Lower Cholesky factor of ``k + jitter*I`` with escalating jitter."""
    n = k.shape[0]
    jitter = start
    while True:
        try:
            chol = np.linalg.cholesky(k + (jitter * base) * np.eye(n))
            return chol, jitter * base
        except np.linalg.LinAlgError:
            jitter *= 10.0
            if jitter > stop * (1 + 1e-9):
                raise NumericalError(
                    f"Cholesky failed with jitter up to {stop:g} * {base:g}") from None


def sample_function(params: KernelParams, xs, rng: np.random.Generator) -> np.ndarray:
    """One draw from ``N(0, K + jitter I)`` at ``xs``."""
    xs = _as_points(xs)
    if xs.shape[0] < 1:
        raise ConfigError("need at least one point")
    chol, _ = _cholesky_with_jitter(
        gram_matrix(params, xs), params.output_scale ** 2, JITTER_START, JITTER_MAX)
    return chol @ rng.standard_normal(xs.shape[0])


def noise_count(rate: float, n: int) -> int:
    # builtin round is half-to-even
    return int(round(rate * n))


def inject_noise(y, noise: NoiseSpec, rng: np.random.Generator):
    """Add ``N(0, s^2)`` to ``round(r*n)`` uniformly chosen points.

    ``y`` is ``[n]`` or ``[n, d_y]``; for multi-channel points every channel of
    a chosen point gets its own independent draw. Returns ``(noisy, mask)``.
    """
    y = np.asarray(y)
    n = y.shape[0]
    mask = np.zeros(n, dtype=bool)
    out = y.copy()
    count = noise_count(noise.rate, n)
    if count == 0 or noise.std == 0:
        return out, mask
    chosen = rng.choice(n, size=count, replace=False)
    mask[chosen] = True
    out[chosen] = y[chosen] + noise.std * rng.standard_normal((count,) + y.shape[1:])
    return out, mask


# ---------------------------------------------------------------------------
# closed-form posterior


@dataclass
class GPPosterior:
    mean: np.ndarray
    cov: np.ndarray
    obs_noise_var: float
    log_likelihood: Optional[float] = None

    @property
    def predictive_var(self) -> np.ndarray:
        return np.diag(self.cov) + self.obs_noise_var

    def marginal_log_likelihood(self, y, std_floor: float = 0.0) -> np.ndarray:
        """Per-point Gaussian log-density of ``y`` under the predictive marginals.

        ``std_floor`` clips the predictive std from below. Under the posterior
        N(m, v), the best Gaussian with std >= floor has variance
        ``max(v, floor**2)``, so the floored marginals are the best a model
        with that output constraint can do on average.
        """
        var = np.maximum(self.predictive_var, std_floor ** 2)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        return -0.5 * np.log(2 * math.pi * var) - 0.5 * (y - self.mean) ** 2 / var


def _robust_cholesky(k, base):
    """Plain Cholesky, falling back to tiny escalating jitter for singular ``k``."""
    try:
        return np.linalg.cholesky(k)
    except np.linalg.LinAlgError:
        return _cholesky_with_jitter(k, base, 1e-12, JITTER_MAX)[0]


def _gauss_logpdf_chol(y, mean, chol):
    resid = linalg.solve_triangular(chol, y - mean, lower=True)
    n = y.shape[0]
    return float(-0.5 * resid @ resid - np.sum(np.log(np.diag(chol))) - 0.5 * n * math.log(2 * math.pi))


def gp_posterior_oracle(params: KernelParams, ctx_x, ctx_y, obs_noise_var: float,
                        query_x, query_y=None) -> GPPosterior:
    """Exact GP conditional at ``query_x`` given (possibly noisy) context values.

    ``obs_noise_var`` is added to the context block and to the predictive
    distribution of query observations. If ``query_y`` is given, its joint
    log-density under ``N(mean, cov + obs_noise_var I)`` is returned too.
    """
    if obs_noise_var < 0:
        raise ConfigError("obs_noise_var must be >= 0")
    query_x = _as_points(query_x)
    ctx_x = _as_points(ctx_x) if ctx_x is not None else np.zeros((0, query_x.shape[1]))
    ctx_y = np.zeros(0) if ctx_y is None else np.asarray(ctx_y, dtype=np.float64).reshape(-1)
    var0 = params.output_scale ** 2
    k_qq = gram_matrix(params, query_x)
    if ctx_x.shape[0] == 0:
        mean = np.zeros(query_x.shape[0])
        cov = k_qq
    else:
        k_cc = gram_matrix(params, ctx_x) + obs_noise_var * np.eye(ctx_x.shape[0])
        k_cq = cross_gram(params, ctx_x, query_x)
        chol = _robust_cholesky(k_cc, var0)
        alpha = linalg.cho_solve((chol, True), ctx_y)
        v = linalg.solve_triangular(chol, k_cq, lower=True)
        mean = k_cq.T @ alpha
        cov = k_qq - v.T @ v
        cov = 0.5 * (cov + cov.T)
    post = GPPosterior(mean=mean, cov=cov, obs_noise_var=obs_noise_var)
    if query_y is not None:
        qy = np.asarray(query_y, dtype=np.float64).reshape(-1)
        pred = cov + obs_noise_var * np.eye(cov.shape[0])
        chol_q = _robust_cholesky(pred, var0)
        post.log_likelihood = _gauss_logpdf_chol(qy, mean, chol_q)
    return post


# ---------------------------------------------------------------------------
# tasks


def _noise_plan(setup: int, phase: str) -> tuple[bool, bool]:
    """(noise on context, noise on targets) for a setup/phase pair."""
    if setup not in SETUPS:
        raise ConfigError(f"setup must be one of {SETUPS}, got {setup!r}")
    if phase not in PHASES:
        raise ConfigError(f"phase must be one of {PHASES}, got {phase!r}")
    if phase == "eval":
        return True, False
    return {1: (False, False), 2: (True, False), 3: (True, True)}[setup]


def sample_set_sizes(cfg: TaskConfig, rng: np.random.Generator) -> tuple[int, int]:
    n_ctx = int(rng.integers(cfg.min_ctx, cfg.max_ctx + 1))
    n_tar = int(rng.integers(cfg.min_tar, cfg.max_points - n_ctx + 1))
    return n_ctx, n_tar


def make_task(cfg: TaskConfig, setup: int, phase: str, rng: np.random.Generator,
              noise_rng: Optional[np.random.Generator] = None,
              num_ctx: Optional[int] = None, num_tar: Optional[int] = None) -> TaskBatch:
    """Sample a batch of GP tasks sharing set sizes.

    ``noise_rng`` (defaults to ``rng``) draws only the noise, which lets test
    sets at different noise levels share the same underlying functions.
    """
    noise_ctx_on, noise_tar_on = _noise_plan(setup, phase)
    noise_rng = rng if noise_rng is None else noise_rng
    if num_ctx is None or num_tar is None:
        n_ctx, n_tar = sample_set_sizes(cfg, rng)
        n_ctx = n_ctx if num_ctx is None else num_ctx
        n_tar = n_tar if num_tar is None else num_tar
    else:
        n_ctx, n_tar = num_ctx, num_tar
    if n_ctx < 0 or n_tar < 1 or n_ctx + n_tar > cfg.max_points:
        raise ConfigError(
            f"context {n_ctx} + target {n_tar} exceeds max_points {cfg.max_points}")
    n = n_ctx + n_tar
    bsz = cfg.batch_size
    lo, hi = cfg.x_range
    xs = np.empty((bsz, n, 1))
    ys = np.empty((bsz, n, 1))
    params = []
    for b in range(bsz):
        p = sample_kernel_params(cfg.kernel, rng)
        x = rng.uniform(lo, hi, size=n)
        xs[b, :, 0] = x
        ys[b, :, 0] = sample_function(p, x, rng)
        params.append(p)
    clean_ctx, clean_tar = ys[:, :n_ctx], ys[:, n_ctx:]
    yc, yt = clean_ctx.copy(), clean_tar.copy()
    mask_c = np.zeros((bsz, n_ctx), dtype=bool)
    mask_t = np.zeros((bsz, n_tar), dtype=bool)
    if not cfg.noise.is_clean:
        for b in range(bsz):
            if noise_ctx_on:
                yc[b], mask_c[b] = inject_noise(clean_ctx[b], cfg.noise, noise_rng)
            if noise_tar_on:
                yt[b], mask_t[b] = inject_noise(clean_tar[b], cfg.noise, noise_rng)
    return TaskBatch(
        ctx=PointSet(xs[:, :n_ctx], yc),
        tar=PointSet(xs[:, n_ctx:], yt),
        clean_tar_y=clean_tar.copy(),
        noise_mask_ctx=mask_c,
        noise_mask_tar=mask_t,
        setup=setup,
        phase=phase,
        clean_ctx_y=clean_ctx.copy(),
        kernel_params=params,
    )


def build_task_set(cfg: TaskConfig, setup: int, phase: str, n_tasks: int, batch_size: int,
                   seed: int) -> list[TaskBatch]:
    """A fixed, seeded list of task batches totalling ``n_tasks`` tasks.

    The clean functions depend on ``seed`` only; the noise uses an independent
    stream, so sets built with different noise specs share functions and x.
    """
    fn_seq, noise_seq = np.random.SeedSequence(seed).spawn(2)
    rng, noise_rng = np.random.default_rng(fn_seq), np.random.default_rng(noise_seq)
    batches = []
    remaining = n_tasks
    while remaining > 0:
        size = min(batch_size, remaining)
        batches.append(make_task(cfg.replace(batch_size=size), setup, phase, rng, noise_rng))
        remaining -= size
    return batches


def save_tasks(path, batches: Sequence[TaskBatch]) -> None:
    arrays = {"version": np.array(TASK_FORMAT_VERSION), "count": np.array(len(batches))}
    for i, t in enumerate(batches):
        arrays.update({
            f"{i}/xc": t.ctx.x, f"{i}/yc": t.ctx.y, f"{i}/xt": t.tar.x, f"{i}/yt": t.tar.y,
            f"{i}/clean_tar_y": t.clean_tar_y, f"{i}/mask_ctx": t.noise_mask_ctx,
            f"{i}/mask_tar": t.noise_mask_tar, f"{i}/meta": np.array([t.setup, PHASES.index(t.phase)]),
        })
        if t.clean_ctx_y is not None:
            arrays[f"{i}/clean_ctx_y"] = t.clean_ctx_y
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_tasks(path) -> list[TaskBatch]:
    with np.load(path) as data:
        version = int(data["version"])
        if version != TASK_FORMAT_VERSION:
            raise ConfigError(f"unsupported task dump version {version}")
        out = []
        for i in range(int(data["count"])):
            setup, phase = (int(v) for v in data[f"{i}/meta"])
            out.append(TaskBatch(
                ctx=PointSet(data[f"{i}/xc"], data[f"{i}/yc"]),
                tar=PointSet(data[f"{i}/xt"], data[f"{i}/yt"]),
                clean_tar_y=data[f"{i}/clean_tar_y"],
                noise_mask_ctx=data[f"{i}/mask_ctx"],
                noise_mask_tar=data[f"{i}/mask_tar"],
                setup=setup, phase=PHASES[phase],
                clean_ctx_y=data[f"{i}/clean_ctx_y"] if f"{i}/clean_ctx_y" in data else None,
            ))
    return out
