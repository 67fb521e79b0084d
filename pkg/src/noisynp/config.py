"""Experiment configuration: YAML files mapped onto nested dataclasses.

Unknown keys are rejected. ``--set section.key=value`` overrides are parsed
as YAML scalars, so ``--set train.steps=100`` and ``--set eval.noise_grid=[0,0.5]``
both work.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .backbone import BackboneConfig
from .errors import ConfigError
from .funcdata import KernelSpec, NoiseSpec, TaskConfig
from .models import ModelConfig, ModelVariant
from .objectives import LossConfig, standard_loss_config

ROOT_ENV = "NOISYNP_ROOT"


@dataclass
class KernelSection:
    family: str = "rbf"
    length_scale_range: tuple[float, float] = (0.6, 1.0)
    output_scale_range: tuple[float, float] = (0.1, 1.0)
    period_range: tuple[float, float] = (0.8, 1.2)


@dataclass
class NoiseSection:
    std: float = 0.0
    rate: float = 0.0
    coupled: bool = True


@dataclass
class DataSection:
    kind: str = "gp"
    setup: int = 3
    kernel: KernelSection = field(default_factory=KernelSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    x_range: tuple[float, float] = (-2.0, 2.0)
    max_points: int = 50
    min_ctx: int = 3
    max_ctx: int = 47
    min_tar: int = 3
    image_dir: Optional[str] = None
    image_size: int = 32


@dataclass
class ModelSection:
    variant: str = "anp"
    z_dim: int = 128
    hidden_dim: int = 128
    enc_depth: int = 4
    dec_depth: int = 3
    qk_depth: int = 2
    post_depth: int = 2
    n_heads: int = 8
    activation: str = "relu"
    sigma_floor: float = 0.1
    bootstrap_train: int = 4
    bootstrap_eval: int = 50
    allow_any_robust: bool = False


@dataclass
class TrainSection:
    steps: int = 100_000
    lr: float = 5e-4
    lr_schedule: str = "cosine"
    batch_size: int = 16
    seed: int = 0
    scale: float = 1.0
    checkpoint_every: int = 5000
    log_every: int = 100


@dataclass
class EvalSection:
    K_eval: int = 50
    eval_batch: int = 160
    n_tasks: int = 3000
    noise_grid: tuple[float, ...] = (0.0, 0.3, 0.6, 0.99)
    seeds: tuple[int, ...] = (0, 1, 2)
    setup: Optional[int] = None
    test_seed: int = 10_000
    val_seed: int = 20_000
    val_tasks: int = 1000
    eval_seed: int = 0


@dataclass
class LossSection:
    include_context_in_recon: Optional[bool] = None
    w_sigma: float = 0.0
    K_train: int = 1


@dataclass
class PathsSection:
    checkpoint_dir: str = "checkpoints"
    results_dir: str = "results"


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    loss: LossSection = field(default_factory=LossSection)
    paths: PathsSection = field(default_factory=PathsSection)

    # -- conversions ------------------------------------------------------

    def noise_spec(self) -> NoiseSpec:
        n = self.data.noise
        return NoiseSpec(std=n.std, rate=n.rate, coupled=n.coupled)

    def task_config(self, batch_size: Optional[int] = None) -> TaskConfig:
        d = self.data
        return TaskConfig(
            kernel=KernelSpec(**dataclasses.asdict(d.kernel)),
            noise=self.noise_spec(),
            x_range=tuple(d.x_range),
            max_points=d.max_points,
            min_ctx=d.min_ctx,
            max_ctx=d.max_ctx,
            min_tar=d.min_tar,
            batch_size=batch_size or self.train.batch_size,
        )

    def model_config(self) -> ModelConfig:
        m = self.model
        dims = (2, 3) if self.data.kind == "image" else (1, 1)
        return ModelConfig(
            variant=m.variant, dim_x=dims[0], dim_y=dims[1], z_dim=m.z_dim,
            backbone=BackboneConfig(
                hidden_dim=m.hidden_dim, enc_depth=m.enc_depth, dec_depth=m.dec_depth,
                qk_depth=m.qk_depth, post_depth=m.post_depth, n_heads=m.n_heads,
                activation=m.activation, sigma_floor=m.sigma_floor),
            bootstrap_train=m.bootstrap_train, bootstrap_eval=m.bootstrap_eval,
            allow_any_robust=m.allow_any_robust,
        )

    def variant(self) -> ModelVariant:
        return ModelVariant.parse(self.model.variant, self.model.allow_any_robust)

    def loss_config(self) -> LossConfig:
        l = self.loss
        return standard_loss_config(self.variant(), w_sigma=l.w_sigma,
                                    include_context=l.include_context_in_recon, K_train=l.K_train)

    @property
    def total_steps(self) -> int:
        return int(round(self.train.steps * self.train.scale))

    @property
    def eval_setup(self) -> int:
        return self.eval.setup if self.eval.setup is not None else self.data.setup

    def validate(self) -> "ExperimentConfig":
        if self.data.kind not in ("gp", "image"):
            raise ConfigError(f"data.kind must be 'gp' or 'image', got {self.data.kind!r}")
        if self.data.kind == "image" and not self.data.image_dir:
            raise ConfigError("data.image_dir is required for image data")
        if self.train.lr_schedule not in ("cosine", "constant"):
            raise ConfigError("train.lr_schedule must be 'cosine' or 'constant'")
        if self.train.steps < 0 or self.train.scale <= 0:
            raise ConfigError("train.steps must be >= 0 and train.scale > 0")
        if self.eval.K_eval < 1 or self.eval.eval_batch < 1 or self.eval.n_tasks < 1:
            raise ConfigError("eval sizes must be >= 1")
        for s in self.eval.noise_grid:
            if not 0 <= s <= 1:
                raise ConfigError(f"noise levels must lie in [0, 1], got {s}")
        self.noise_spec()
        self.task_config()
        self.model_config()
        self.loss_config()
        return self

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def training_digest(self) -> str:
        """Digest of the sections that determine a trained model."""
        d = self.to_dict()
        blob = json.dumps({k: d[k] for k in ("data", "model", "train", "loss")},
                          sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace(self, **section_updates) -> "ExperimentConfig":
        """Copy with ``section={key: value}`` updates applied."""
        d = self.to_dict()
        for section, updates in section_updates.items():
            if section not in d:
                raise ConfigError(f"unknown config section {section!r}")
            _deep_update(d[section], updates, section)
        return from_dict(d)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _deep_update(target: dict, updates: dict, path: str):
    for k, v in updates.items():
        if k not in target:
            raise ConfigError(f"unknown config key {path}.{k}")
        if isinstance(target[k], dict) and isinstance(v, dict):
            _deep_update(target[k], v, f"{path}.{k}")
        else:
            target[k] = v


def _coerce(tp, value, path):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path} must be a mapping")
        return _build(tp, value, path)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[]") for v in value)
        if len(value) != len(args):
            raise ConfigError(f"{path} needs {len(args)} values")
        return tuple(_coerce(a, v, f"{path}[]") for a, v in zip(args, value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{path} must be an integer")
        return int(value)
    if tp is float:
        if isinstance(value, str):
            # YAML 1.1 reads exponent forms without a dot ("1e-3") as strings
            try:
                value = float(value)
            except ValueError:
                raise ConfigError(f"{path} must be a number") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string")
        return value
    return value


def _build(cls, data: dict, path: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config keys at {path or '<root>'}: {sorted(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    return cls(**kwargs)


def from_dict(data: Optional[dict]) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "").validate()


def apply_overrides(data: dict, overrides) -> dict:
    data = json.loads(json.dumps(data or {}))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override inside non-mapping at {key}")
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def load_config(path=None, overrides=None) -> ExperimentConfig:
    data: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
    return from_dict(apply_overrides(data, overrides))


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def resolve_path(p) -> Path:
    p = Path(os.path.expanduser(str(p)))
    if p.is_absolute():
        return p
    return Path(os.environ.get(ROOT_ENV, ".")) / p


def code_version() -> str:
    """Git-style content hash over the package sources.

    Each file is hashed as a git blob; the tree hash combines the sorted
    ``(relative path, blob hash)`` entries.
    """
    pkg = Path(__file__).resolve().parent
    tree = hashlib.sha1()
    for f in sorted(pkg.rglob("*.py")):
        content = f.read_bytes()
        blob = hashlib.sha1(b"blob %d\0" % len(content) + content).hexdigest()
        tree.update(f"{f.relative_to(pkg).as_posix()} {blob}\n".encode())
    return tree.hexdigest()
