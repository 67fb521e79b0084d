"""Target log-likelihood estimation and experiment protocols.

Experiment cells are trained on demand and cached as checkpoints keyed by the
digest of their resolved config. Training configs are normalized first: a
clean noise spec, or setup 1 (whose training never sees noise), maps to a
single clean-training config, so equivalent cells share one checkpoint.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
import torch
from filelock import FileLock

from .config import ExperimentConfig, dump_config, resolve_path
from .errors import ConfigError, NoisyNPError, TrainingError
from .funcdata import JITTER_START, NoiseSpec, TaskBatch, build_task_set, gp_posterior_oracle
from .models import LatentDistribution, NeuralProcess, to_tensors
from .objectives import gaussian_log_pdf
from .results import EvalResult, ResultsStore

log = logging.getLogger(__name__)

COARSE_W_GRID = (-10.0, -1.0, 0.0, 1.0, 10.0)
FINE_W_GRID = (0.0, 5.0, 10.0, 20.0, 50.0)


# ---------------------------------------------------------------------------
# estimator


@torch.no_grad()
def task_log_likelihoods(model: NeuralProcess, task: TaskBatch, K: int,
                         rng: np.random.Generator) -> np.ndarray:
    """Per-task, per-target-point log-likelihood of the clean targets, ``[B]``.

    Latent models use importance sampling with ``z ~ q(z | noisy ctx, clean tar)``
    and weights ``p(z | ctx) / q(z)``; bootstrap models an equal-weight mixture
    of their members; deterministic models the plain per-point average.
    """
    if K < 1:
        raise ConfigError("K must be >= 1")
    if task.clean_tar_y is None:
        raise ConfigError("evaluation needs clean target values")
    model.eval()
    dtype = next(model.parameters()).dtype
    batch = to_tensors(task, dtype)
    y = batch.yt_clean.double()
    v = model.variant
    n_tar = batch.num_tar
    if v.has_latent:
        out = model(batch, K, rng, target_y=batch.yt_clean)
        ll = gaussian_log_pdf(y, out.pred.mean.double(), out.pred.std.double(), "none")
        ll = ll.sum((-1, -2))                                          # [K, B]
        z = out.z.double()
        log_p = _as_double(out.p_dist).log_prob(z)
        log_q = _as_double(out.q_dist).log_prob(z)
        log_w = ll + log_p - log_q
        est = (torch.logsumexp(log_w, 0) - math.log(K)) / n_tar
    elif v.bootstrapped:
        out = model(batch, K, rng)
        ll = gaussian_log_pdf(y, out.pred.mean.double(), out.pred.std.double(), "none").sum(-1)
        members = ll.shape[0]
        est = (torch.logsumexp(ll, 0) - math.log(members)).mean(-1)
    else:
        out = model(batch, 1, rng)
        ll = gaussian_log_pdf(y, out.pred.mean.double(), out.pred.std.double(), "none").sum(-1)
        est = ll[0].mean(-1)
    return est.numpy()


def _as_double(dist: LatentDistribution) -> LatentDistribution:
    return LatentDistribution(dist.mean.double(), dist.std.double())


def target_log_likelihood(model: NeuralProcess, task: TaskBatch, K: int,
                          rng: Optional[np.random.Generator] = None) -> float:
    rng = rng if rng is not None else np.random.default_rng(0)
    return float(task_log_likelihoods(model, task, K, rng).mean())


def evaluate_task_set(model: NeuralProcess, tasks: Sequence[TaskBatch], K: int,
                      seed: int = 0) -> float:
    """Mean over all tasks of the per-point target log-likelihood."""
    rng = np.random.default_rng(seed)
    vals = np.concatenate([task_log_likelihoods(model, t, K, rng) for t in tasks])
    if not np.all(np.isfinite(vals)):
        raise NoisyNPError("non-finite target log-likelihood")
    return float(vals.mean())


def oracle_log_likelihood(tasks: Sequence[TaskBatch], sigma_floor: float = 0.0,
                          obs_jitter: float = JITTER_START) -> float:
    """Mean per-point target LL of the exact GP posterior given the task's context.

    The observation variance is the sampler's jitter (``obs_jitter * sigma_f^2``),
    i.e. the generating process itself. Predictive stds are floored at
    ``sigma_floor``.
    """
    vals = []
    for t in tasks:
        if t.kernel_params is None:
            raise ConfigError("oracle evaluation needs tasks that carry kernel parameters")
        for b, params in enumerate(t.kernel_params):
            noise_var = obs_jitter * params.output_scale ** 2
            post = gp_posterior_oracle(params, t.ctx.x[b], t.ctx.y[b, :, 0], noise_var, t.tar.x[b])
            vals.append(post.marginal_log_likelihood(t.clean_tar_y[b, :, 0], sigma_floor).mean())
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# run specs and cell normalization


@dataclass(frozen=True)
class RunSpec:
    """A named training recipe: a model variant plus loss overrides."""

    name: str
    variant: str
    w_sigma: Optional[Union[float, dict]] = None
    include_context_in_recon: Optional[bool] = None

    def w_for(self, level: float) -> Optional[float]:
        if isinstance(self.w_sigma, dict):
            for k, v in self.w_sigma.items():
                if math.isclose(float(k), level, abs_tol=1e-9):
                    return float(v)
            raise ConfigError(f"{self.name}: no w_sigma given for noise level {level}")
        return self.w_sigma


def parse_run_spec(name: str, w_sigma=None) -> RunSpec:
    """Model ids plus the two ablations ``r-anp-no-sig`` and ``r-anp-all-pts``."""
    if name == "r-anp-no-sig":
        return RunSpec(name, "r-anp", w_sigma=0.0, include_context_in_recon=False)
    if name == "r-anp-all-pts":
        return RunSpec(name, "r-anp", w_sigma=w_sigma, include_context_in_recon=True)
    return RunSpec(name, name, w_sigma=w_sigma)


def _noise_from(noise) -> NoiseSpec:
    if isinstance(noise, NoiseSpec):
        return noise
    if isinstance(noise, tuple):
        return NoiseSpec(std=noise[0], rate=noise[1], coupled=False)
    return NoiseSpec.level(float(noise))


def cell_config(base: ExperimentConfig, spec: RunSpec, setup: int, noise, seed: int
                ) -> ExperimentConfig:
    """Resolved training config for one (recipe, setup, noise, seed) cell."""
    noise = _noise_from(noise)
    level = noise.std
    if noise.is_clean or setup == 1:
        # training data is identical for all setups when no training point is noised
        setup, noise = 1, NoiseSpec.level(0.0)
    loss = {"include_context_in_recon": spec.include_context_in_recon, "w_sigma": 0.0}
    w = spec.w_for(level)
    if w is not None:
        loss["w_sigma"] = float(w)
    return base.replace(
        data={"setup": setup, "noise": {"std": noise.std, "rate": noise.rate, "coupled": noise.coupled}},
        model={"variant": spec.variant},
        train={"seed": int(seed)},
        loss=loss,
    )


class CheckpointStore:
    """Checkpoints keyed by config digest; trains missing ones if allowed."""

    def __init__(self, directory, allow_training: bool = True, images=None,
                 on_trained: Optional[Callable[[ExperimentConfig, Path], None]] = None):
        self.dir = Path(directory)
        self.allow_training = allow_training
        self.images = images
        self.on_trained = on_trained

    def path_for(self, cfg: ExperimentConfig) -> Path:
        return self.dir / cfg.model.variant / f"{cfg.training_digest()[:16]}.ckpt"

    def get(self, cfg: ExperimentConfig) -> NeuralProcess:
        path = self.path_for(cfg)
        path.parent.mkdir(parents=True, exist_ok=True)
        with FileLock(str(path) + ".lock"):
            return self._get_locked(cfg, path)

    def _get_locked(self, cfg: ExperimentConfig, path: Path) -> NeuralProcess:
        from .train import Trainer, train
        if path.exists():
            tr = Trainer.restore(path, self.images)
            if tr.step >= cfg.total_steps:
                tr.model.eval()
                return tr.model
        if not self.allow_training:
            raise ConfigError(f"missing checkpoint {path} and no training budget")
        dump_config(cfg, path.with_suffix(".yaml"))
        log.info("training %s (%s) -> %s", cfg.model.variant, cfg.training_digest()[:8], path)
        tr = train(cfg, checkpoint_path=path, log_path=path.with_suffix(".log.jsonl"),
                   images=self.images)
        if self.on_trained is not None:
            self.on_trained(cfg, path)
        tr.model.eval()
        return tr.model


class TestSets:
    """Seeded evaluation task sets, cached per (noise spec, split)."""

    def __init__(self, base: ExperimentConfig, images=None):
        self.base = base
        self.images = images
        self._cache: dict = {}

    def get(self, noise, split: str = "test") -> list[TaskBatch]:
        noise = _noise_from(noise)
        if noise.is_clean:
            noise = NoiseSpec.level(0.0)
        key = (noise.std, noise.rate, split)
        if key not in self._cache:
            ev = self.base.eval
            seed, n = (ev.test_seed, ev.n_tasks) if split == "test" else (ev.val_seed, ev.val_tasks)
            if self.base.data.kind == "image":
                self._cache[key] = _image_task_set(self.base, self.images, noise, n, ev.eval_batch, seed)
            else:
                tcfg = self.base.task_config().replace(noise=noise)
                self._cache[key] = build_task_set(tcfg, 3, "eval", n, ev.eval_batch, seed)
        return self._cache[key]


def _image_task_set(cfg, images, noise, n_tasks, batch, seed):
    from .imagefunc import sample_image_task
    rng = np.random.default_rng(seed)
    d = cfg.data
    out, remaining = [], n_tasks
    while remaining > 0:
        size = min(batch, remaining)
        n_ctx = int(rng.integers(d.min_ctx, d.max_ctx + 1))
        n_tar = int(rng.integers(d.min_tar, d.max_points - n_ctx + 1))
        idx = rng.integers(0, len(images), size=size)
        out.append(sample_image_task(images, n_ctx, n_tar, noise, 3, "eval", rng, image_index=idx))
        remaining -= size
    return out


def _row(cfg: ExperimentConfig, model_name: str, setup: int, noise: NoiseSpec, seed: int,
         value: float, n_tasks: int) -> dict:
    gp = cfg.data.kind == "gp"
    return {
        "dataset": "gp" if gp else Path(str(cfg.data.image_dir)).name,
        "kernel": cfg.data.kernel.family if gp else "",
        "model": model_name, "setup": int(setup),
        "noise_s": float(noise.std), "noise_r": float(noise.rate), "seed": int(seed),
        "target_ll": float(value), "n_tasks": int(n_tasks), "K_eval": int(cfg.eval.K_eval),
    }


class Experiment:
    """Shared state for a family of runs: base config, checkpoints, test sets, results."""

    def __init__(self, base: ExperimentConfig, results: Optional[ResultsStore] = None,
                 checkpoints: Optional[CheckpointStore] = None, images=None):
        self.base = base
        if base.data.kind == "image" and images is None:
            from .train import load_image_set
            images = load_image_set(base)
        self.images = images
        self.results = results or ResultsStore(resolve_path(base.paths.results_dir))
        self.checkpoints = checkpoints or CheckpointStore(
            resolve_path(base.paths.checkpoint_dir), images=images)
        self.test_sets = TestSets(base, images)

    def model_for(self, spec: RunSpec, setup: int, noise, seed: int) -> NeuralProcess:
        return self.checkpoints.get(cell_config(self.base, spec, setup, noise, seed))

    def evaluate_cell(self, spec: RunSpec, setup: int, noise, seed: int,
                      split: str = "test") -> float:
        model = self.model_for(spec, setup, noise, seed)
        tasks = self.test_sets.get(noise, split)
        K = _eval_samples(model, self.base)
        return evaluate_task_set(model, tasks, K, seed=self.base.eval.eval_seed)

    def result_cell(self, spec: RunSpec, setup: int, noise, seed: int) -> EvalResult:
        noise = _noise_from(noise)
        train_cfg = cell_config(self.base, spec, setup, noise, seed)
        key = "|".join([spec.name, f"setup{setup}", f"s{noise.std:g}", f"r{noise.rate:g}",
                        f"seed{seed}", train_cfg.training_digest()[:16], _eval_digest(self.base)])
        info = self.results.cell_info(key)
        if info is None:
            value = self.evaluate_cell(spec, setup, noise, seed)
            n = sum(t.batch_size for t in self.test_sets.get(noise))
            info = {"row": _row(self.base, spec.name, setup, noise, seed, value, n),
                    "w_sigma": train_cfg.loss.w_sigma,
                    "checkpoint": str(self.checkpoints.path_for(train_cfg))}
            self.results.commit(key, [info["row"]], info)
        return EvalResult([info["row"]])


def _eval_digest(cfg: ExperimentConfig) -> str:
    """Digest of everything that defines a test set and estimator for one cell."""
    ev = dataclasses.asdict(cfg.eval)
    for k in ("noise_grid", "seeds", "setup"):
        ev.pop(k)
    data = dataclasses.asdict(cfg.data)
    for k in ("setup", "noise"):
        data.pop(k)
    blob = json.dumps({"eval": ev, "data": data}, sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _eval_samples(model: NeuralProcess, cfg: ExperimentConfig) -> int:
    v = model.variant
    if v.bootstrapped:
        return model.cfg.bootstrap_eval
    return cfg.eval.K_eval if v.has_latent else 1


def _specs(variants) -> list[RunSpec]:
    return [v if isinstance(v, RunSpec) else parse_run_spec(v) for v in variants]


def run_experiment(exp: Experiment, variants, noise_grid=None, seeds=None,
                   setup: Optional[int] = None) -> EvalResult:
    """Train (or load) and evaluate every (variant x noise level x seed) cell."""
    ev = exp.base.eval
    noise_grid = ev.noise_grid if noise_grid is None else noise_grid
    seeds = ev.seeds if seeds is None else seeds
    setup = exp.base.eval_setup if setup is None else setup
    out = EvalResult()
    for spec in _specs(variants):
        for level in noise_grid:
            for seed in seeds:
                out.extend(exp.result_cell(spec, setup, float(level), seed))
    return out


def sweep_noise_axes(exp: Experiment, variants, s_grid, r_grid, seeds=None,
                     setup: Optional[int] = None) -> EvalResult:
    """Decoupled noise std x noise rate grid."""
    seeds = exp.base.eval.seeds if seeds is None else seeds
    setup = exp.base.eval_setup if setup is None else setup
    out = EvalResult()
    for spec in _specs(variants):
        for s in s_grid:
            for r in r_grid:
                for seed in seeds:
                    out.extend(exp.result_cell(spec, setup, (float(s), float(r)), seed))
    return out


def select_best_weight(table: Sequence[dict]) -> float:
    """Argmax of validation LL; ties prefer smaller |w|, then smaller w."""
    if not table:
        raise ConfigError("empty w_sigma grid")
    best = max(table, key=lambda r: (r["val_ll"], -abs(r["w_sigma"]), -r["w_sigma"]))
    return float(best["w_sigma"])


def refine_grid(best: float, grid: Sequence[float]) -> list[float]:
    """Second-pass candidates around the coarse winner."""
    g = sorted(set(float(w) for w in grid))
    i = g.index(best)
    out = []
    if i > 0:
        out.append((g[i - 1] + best) / 2)
    else:
        out.append(best * 2 if best < 0 else best - 1)
    if i < len(g) - 1:
        out.append((g[i + 1] + best) / 2)
    else:
        out += [best * 2, best * 5] if best > 0 else [best + 1]
    return [w for w in out if w not in g]


def tune_variance_weight(exp: Experiment, noise_level: float, grid=FINE_W_GRID,
                         variant: str = "r-anp", seed: int = 0, setup: Optional[int] = None,
                         refine: bool = False) -> tuple[float, list[dict]]:
    """Train one model per ``w_sigma`` and pick the best on the validation set."""
    if not grid:
        raise ConfigError("empty w_sigma grid")
    setup = exp.base.eval_setup if setup is None else setup

    def score(w):
        spec = RunSpec(variant, variant, w_sigma=float(w))
        try:
            val = exp.evaluate_cell(spec, setup, noise_level, seed, split="val")
        except (TrainingError, NoisyNPError) as exc:
            log.warning("w_sigma=%g failed: %s", w, exc)
            val = -math.inf
        return {"w_sigma": float(w), "val_ll": val}

    table = [score(w) for w in grid]
    if len(table) == 1:
        return table[0]["w_sigma"], table
    best = select_best_weight(table)
    if refine:
        table += [score(w) for w in refine_grid(best, grid)]
        best = select_best_weight(table)
    return best, table


def ablation_suite(exp: Experiment, w_by_level: dict, noise_grid=None, seeds=None,
                   setup: Optional[int] = None) -> EvalResult:
    """Full r-anp against its two single-change ablations."""
    specs = [
        RunSpec("r-anp", "r-anp", w_sigma=w_by_level),
        parse_run_spec("r-anp-no-sig"),
        parse_run_spec("r-anp-all-pts", w_sigma=w_by_level),
    ]
    return run_experiment(exp, specs, noise_grid, seeds, setup)
