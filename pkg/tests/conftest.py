import numpy as np
import pytest
import torch

from noisynp.backbone import BackboneConfig
from noisynp.funcdata import NoiseSpec, TaskConfig, make_task
from noisynp.models import ModelConfig, build_model

ALL_VARIANTS = ("np", "cnp", "anp", "canp", "bnp", "banp")


def tiny_model(variant, seed=0, dtype=torch.float64, hidden=8, z_dim=4, depth=2, members=3, **kw):
    bb = BackboneConfig(hidden_dim=hidden, enc_depth=depth, dec_depth=depth, qk_depth=1,
                        post_depth=1, n_heads=2, activation=kw.pop("activation", "tanh"))
    cfg = ModelConfig(variant=variant, z_dim=z_dim, backbone=bb, bootstrap_train=members,
                      bootstrap_eval=members, **kw)
    return build_model(cfg, seed=seed, dtype=dtype)


def tiny_task(seed=0, n_ctx=5, n_tar=4, batch=2, noise=0.3, setup=3, phase="train"):
    cfg = TaskConfig(noise=NoiseSpec.level(noise), batch_size=batch)
    return make_task(cfg, setup, phase, np.random.default_rng(seed), num_ctx=n_ctx, num_tar=n_tar)


@pytest.fixture
def float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


def tiny_config(root, **sections):
    """Seconds-scale experiment config with checkpoints and results under ``root``."""
    from noisynp.config import from_dict
    d = {
        "data": {"max_points": 12, "min_ctx": 2, "max_ctx": 8, "min_tar": 2},
        "model": {"hidden_dim": 8, "z_dim": 4, "enc_depth": 2, "dec_depth": 2, "qk_depth": 1,
                  "post_depth": 1, "n_heads": 2, "bootstrap_train": 2, "bootstrap_eval": 3},
        "train": {"steps": 6, "batch_size": 4, "checkpoint_every": 3, "log_every": 1},
        "eval": {"K_eval": 5, "eval_batch": 8, "n_tasks": 16, "val_tasks": 8,
                 "noise_grid": [0.0, 0.6], "seeds": [0, 1]},
        "paths": {"checkpoint_dir": str(root / "ckpt"), "results_dir": str(root / "results")},
    }
    for section, values in sections.items():
        d.setdefault(section, {}).update(values)
    return from_dict(d)


_ACCEPTANCE: dict = {}


def record_acceptance(n: int, passed: bool, detail: str) -> None:
    _ACCEPTANCE[n] = f"{'PASS' if passed else 'FAIL'} criterion {n}: {detail}"
    print(_ACCEPTANCE[n])


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
