"""Training loop, task sources and checkpoint wiring."""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .backbone import Adam
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, code_version, from_dict
from .errors import CheckpointFormatError, ConfigError, TrainingError
from .funcdata import make_task
from .imagefunc import ImageFunctionSet, sample_image_task
from .models import NeuralProcess, build_model, to_tensors
from .objectives import LossBreakdown, loss_for, query_mode

log = logging.getLogger(__name__)

_DTYPE = torch.float32


class TaskSource:
    """Draws training batches for an experiment config."""

    def __init__(self, cfg: ExperimentConfig, images: Optional[ImageFunctionSet] = None):
        self.cfg = cfg
        self.task_cfg = cfg.task_config()
        self.noise = cfg.noise_spec()
        self.images = images
        if cfg.data.kind == "image" and images is None:
            self.images = load_image_set(cfg)

    def sample(self, rng: np.random.Generator, phase: str = "train", setup: Optional[int] = None):
        setup = self.cfg.data.setup if setup is None else setup
        if self.cfg.data.kind == "gp":
            return make_task(self.task_cfg, setup, phase, rng)
        d = self.task_cfg
        n_ctx = int(rng.integers(d.min_ctx, d.max_ctx + 1))
        n_tar = int(rng.integers(d.min_tar, d.max_points - n_ctx + 1))
        return sample_image_task(self.images, n_ctx, n_tar, self.noise, setup, phase, rng,
                                 batch_size=d.batch_size)


def load_image_set(cfg: ExperimentConfig) -> ImageFunctionSet:
    from .config import resolve_path
    return ImageFunctionSet.from_directory(resolve_path(cfg.data.image_dir), cfg.data.image_size)


def learning_rate(cfg: ExperimentConfig, step: int) -> float:
    if cfg.train.lr_schedule == "constant" or cfg.total_steps == 0:
        return cfg.train.lr
    return cfg.train.lr * 0.5 * (1 + math.cos(math.pi * step / cfg.total_steps))


def _rng_pair(seed: int):
    data_seq, model_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(data_seq), np.random.default_rng(model_seq)


class Trainer:
    def __init__(self, cfg: ExperimentConfig, images: Optional[ImageFunctionSet] = None,
                 dtype=_DTYPE):
        self.cfg = cfg
        self.variant = cfg.variant()
        self.loss_cfg = cfg.loss_config()
        self.model: NeuralProcess = build_model(cfg.model_config(), seed=cfg.train.seed, dtype=dtype)
        self.dtype = dtype
        self.optimizer = Adam(self.model.named_parameters(), lr=cfg.train.lr)
        self.data_rng, self.model_rng = _rng_pair(cfg.train.seed)
        self.source = TaskSource(cfg, images)
        self.step = 0
        self.query = query_mode(self.variant, self.loss_cfg)
        self.num_samples = self.model.default_samples("train", k_train=self.loss_cfg.K_train)

    def train_step(self) -> LossBreakdown:
        self.model.train()
        task = self.source.sample(self.data_rng)
        batch = to_tensors(task, self.dtype)
        out = self.model(batch, self.num_samples, self.model_rng, query=self.query)
        losses = loss_for(self.variant, out, batch, self.loss_cfg)
        if not torch.isfinite(losses.total):
            raise TrainingError(f"non-finite loss at step {self.step}", step=self.step)
        self.optimizer.zero_grad()
        losses.total.backward()
        try:
            self.optimizer.step(lr=learning_rate(self.cfg, self.step))
        except TrainingError as exc:
            exc.step = self.step
            raise
        self.step += 1
        return losses

    def run(self, until: Optional[int] = None, log_fn: Optional[Callable[[int, dict], None]] = None,
            checkpoint_fn: Optional[Callable[["Trainer"], None]] = None):
        until = self.cfg.total_steps if until is None else until
        every_log = max(1, self.cfg.train.log_every)
        every_ckpt = self.cfg.train.checkpoint_every
        while self.step < until:
            losses = self.train_step()
            if log_fn is not None and (self.step % every_log == 0 or self.step == until):
                log_fn(self.step, losses.as_dict())
            if checkpoint_fn is not None and every_ckpt > 0 and self.step % every_ckpt == 0 \
                    and self.step < until:
                checkpoint_fn(self)
        return self

    # -- persistence ------------------------------------------------------

    def save(self, path, meta: Optional[dict] = None) -> Path:
        tensors = {f"param/{n}": p for n, p in self.model.named_parameters()}
        tensors.update({f"optim/{n}": t for n, t in self.optimizer.state_tensors().items()})
        rng = {"data": self.data_rng.bit_generator.state, "model": self.model_rng.bit_generator.state}
        info = {"variant": self.variant.name, "code_version": code_version(),
                "optimizer_step": self.optimizer.step_count}
        info.update(meta or {})
        return save_checkpoint(path, tensors, step=self.step, config=self.cfg.to_dict(),
                               rng_state=_jsonable(rng), meta=info)

    @classmethod
    def restore(cls, path, images: Optional[ImageFunctionSet] = None,
                expect_variant: Optional[str] = None) -> "Trainer":
        ck = load_checkpoint(path)
        cfg = from_dict(ck["config"])
        if expect_variant is not None and cfg.model.variant != expect_variant:
            raise ConfigError(
                f"checkpoint holds {cfg.model.variant!r}, expected {expect_variant!r}")
        tr = cls(cfg, images)
        params = dict(tr.model.named_parameters())
        with torch.no_grad():
            for n, p in params.items():
                key = f"param/{n}"
                if key not in ck["tensors"]:
                    raise CheckpointFormatError(f"checkpoint lacks parameter {n!r}")
                p.copy_(ck["tensors"][key])
        optim = {k[len("optim/"):]: v for k, v in ck["tensors"].items() if k.startswith("optim/")}
        tr.optimizer.load_state_tensors(optim, ck["meta"].get("optimizer_step", ck["step"]))
        tr.step = ck["step"]
        if ck["rng"]:
            tr.data_rng.bit_generator.state = ck["rng"]["data"]
            tr.model_rng.bit_generator.state = ck["rng"]["model"]
        return tr


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=int))


def load_model(path, images: Optional[ImageFunctionSet] = None,
               expect_variant: Optional[str] = None) -> tuple[NeuralProcess, ExperimentConfig]:
    tr = Trainer.restore(path, images, expect_variant)
    tr.model.eval()
    return tr.model, tr.cfg


def _trim_log(path: Path, step: int) -> None:
    """Drop log lines written after the checkpoint a run resumes from."""
    if not path.exists():
        return
    keep = []
    for line in path.read_text().splitlines():
        try:
            if json.loads(line)["step"] <= step:
                keep.append(line + "\n")
        except (ValueError, KeyError):
            break
    path.write_text("".join(keep))


def train(cfg: ExperimentConfig, checkpoint_path=None, log_path=None, resume: bool = True,
          images: Optional[ImageFunctionSet] = None) -> Trainer:
    """Train to ``cfg.total_steps``, writing periodic checkpoints and a JSONL loss log."""
    trainer = None
    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        trainer = Trainer.restore(checkpoint_path, images)
        if trainer.cfg.training_digest() != cfg.training_digest():
            raise ConfigError(f"checkpoint {checkpoint_path} was written for a different config")
    if trainer is None:
        trainer = Trainer(cfg, images)
    log_fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        _trim_log(Path(log_path), trainer.step)
        log_fh = open(log_path, "a")

    def log_fn(step, row):
        if log_fh is not None:
            log_fh.write(json.dumps({"step": step, **row}) + "\n")
            log_fh.flush()
        log.debug("step %d %s", step, row)

    def ckpt_fn(tr):
        if checkpoint_path is not None:
            tr.save(checkpoint_path)

    try:
        trainer.run(log_fn=log_fn, checkpoint_fn=ckpt_fn)
    finally:
        if log_fh is not None:
            log_fh.close()
    if checkpoint_path is not None:
        trainer.save(checkpoint_path)
    return trainer
