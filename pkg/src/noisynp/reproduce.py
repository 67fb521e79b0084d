"""Desk-scale reproduction pipeline.

Runs every training/evaluation cell needed for the quantitative checks,
caching checkpoints and result rows under one directory, and writes
``summary.json`` with the measured margins. Re-running resumes: finished
checkpoints and committed result cells are reused.
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .config import ExperimentConfig, code_version, dump_config, from_dict
from .eval import (FINE_W_GRID, CheckpointStore, Experiment, RunSpec, oracle_log_likelihood,
                   parse_run_spec, tune_variance_weight)

log = logging.getLogger(__name__)

DESK = {
    "model": {"hidden_dim": 64, "z_dim": 64},
    "train": {"steps": 30_000, "checkpoint_every": 5000, "log_every": 100},
    "eval": {"n_tasks": 3000, "eval_batch": 160, "val_tasks": 1000, "seeds": [0, 1, 2]},
}
STAGES = ("clean", "setup3", "setup2", "tune", "robust", "ablation", "oracle", "image")
TUNE_LEVELS = (0.3, 0.6, 0.99)


def desk_config(root, overrides: Optional[dict] = None) -> ExperimentConfig:
    d = json.loads(json.dumps(DESK))
    d["paths"] = {"checkpoint_dir": str(Path(root) / "checkpoints"),
                  "results_dir": str(Path(root) / "results")}
    for section, values in (overrides or {}).items():
        d.setdefault(section, {}).update(values)
    return from_dict(d)


def make_synthetic_images(directory, n: int = 64, size: int = 32, seed: int = 0) -> Path:
    """Folder of smooth RGB test images (gradients plus soft blobs)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    for i in range(n):
        base = rng.uniform(0, 1, 3)
        tilt = rng.uniform(-0.5, 0.5, (2, 3))
        img = base + xx[..., None] * tilt[0] + yy[..., None] * tilt[1]
        for _ in range(rng.integers(1, 4)):
            cx, cy = rng.uniform(0.1, 0.9, 2)
            r = rng.uniform(0.08, 0.3)
            blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r))
            img += blob[..., None] * rng.uniform(-0.8, 0.8, 3)
        img = np.clip(img, 0, 1)
        Image.fromarray(np.rint(img * 255).astype(np.uint8)).save(directory / f"img_{i:03d}.png")
    return directory


class DeskPipeline:
    def __init__(self, root, base: Optional[ExperimentConfig] = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.base = base or desk_config(self.root)
        self.exp = Experiment(self.base)
        self.seeds = list(self.base.eval.seeds)
        self.summary_path = self.root / "summary.json"
        self.summary = json.loads(self.summary_path.read_text()) if self.summary_path.exists() else {}
        self.summary.setdefault("stages", {})
        dump_config(self.base, self.root / "config.yaml")

    def save(self):
        self.summary["code_version"] = code_version()
        tmp = self.summary_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.summary, indent=2, sort_keys=True))
        tmp.replace(self.summary_path)

    def cells(self, name, setup, level, w=None) -> list[float]:
        spec = parse_run_spec(name, w_sigma=w) if name.startswith("r-anp-") else RunSpec(name, name, w)
        return [self.exp.result_cell(spec, setup, level, s).values()[0] for s in self.seeds]

    # -- stages -----------------------------------------------------------

    def stage_clean(self):
        out = {}
        for m in ("np", "anp"):
            out[m] = {"eval0": self.cells(m, 1, 0.0), "eval0.6": self.cells(m, 1, 0.6)}
        return out

    def stage_setup3(self):
        return {m: {"0": self.cells(m, 3, 0.0), "0.99": self.cells(m, 3, 0.99)} for m in ("np", "anp")}

    def stage_setup2(self):
        return {"anp_setup2": self.cells("anp", 2, 0.6), "anp_setup3": self.cells("anp", 3, 0.6)}

    def stage_tune(self):
        out = {}
        for level in TUNE_LEVELS:
            best, table = tune_variance_weight(self.exp, level, grid=FINE_W_GRID, seed=self.seeds[0], setup=3)
            out[f"{level:g}"] = {"best": best, "table": table}
        return out

    def _w(self, level):
        return self.summary["stages"]["tune"][f"{level:g}"]["best"]

    def stage_robust(self):
        return {"r-anp": {"0.99": self.cells("r-anp", 3, 0.99, self._w(0.99))}}

    def stage_ablation(self):
        w = self._w(0.6)
        return {"r-anp": self.cells("r-anp", 3, 0.6, w),
                "r-anp-no-sig": self.cells("r-anp-no-sig", 3, 0.6),
                "r-anp-all-pts": self.cells("r-anp-all-pts", 3, 0.6, w)}

    def stage_oracle(self):
        tasks = self.exp.test_sets.get(0.0)
        floor = self.base.model.sigma_floor
        anp = self.summary["stages"]["setup3"]["anp"]["0"]
        return {"oracle": oracle_log_likelihood(tasks, sigma_floor=floor),
                "oracle_unfloored": oracle_log_likelihood(tasks, sigma_floor=0.0),
                "anp": anp}

    def stage_image(self):
        from .cli import main as cli_main
        from .train import load_image_set
        img_dir = make_synthetic_images(self.root / "images")
        t0 = time.time()
        cfg = self.base.replace(
            data={"kind": "image", "image_dir": str(img_dir), "max_points": 400, "min_ctx": 20,
                  "max_ctx": 200, "min_tar": 20, "setup": 1, "noise": {"std": 0.0, "rate": 0.0}},
            train={"steps": 1500, "checkpoint_every": 0, "seed": 0}, model={"variant": "anp"},
            paths={"checkpoint_dir": str(self.root / "image_checkpoints")})
        store = CheckpointStore(self.root / "image_checkpoints", images=load_image_set(cfg))
        store.get(cfg)
        trained = time.time() - t0
        ckpt = store.path_for(cfg)
        strip = self.root / "render" / "strip.png"
        code = cli_main(["render", "--checkpoint", str(ckpt), "--images", str(img_dir),
                         "--n-ctx", "200", "--noise", "0.3", "--out", str(strip)])
        return {"exit_code": code, "strip": str(strip), "train_seconds": trained,
                "seconds": time.time() - t0 - trained}

    def run(self, stages=None):
        stages = list(stages or STAGES)
        for name in STAGES:
            if name not in stages or name in self.summary["stages"]:
                continue
            t0 = time.time()
            log.info("stage %s", name)
            self.summary["stages"][name] = getattr(self, f"stage_{name}")()
            self.summary.setdefault("timings", {})[name] = time.time() - t0
            self.criteria()
            self.save()
        self.criteria()
        self.save()
        return self.summary

    # -- criteria -----------------------------------------------------------

    def criteria(self):
        st = self.summary["stages"]
        mean = lambda v: float(np.mean(v))
        c = {}
        if "setup3" in st and "robust" in st:
            np99, anp99 = mean(st["setup3"]["np"]["0.99"]), mean(st["setup3"]["anp"]["0.99"])
            ranp99 = mean(st["robust"]["r-anp"]["0.99"])
            c["8"] = {"np_minus_anp": np99 - anp99, "ranp_minus_np": ranp99 - np99,
                      "pass": np99 - anp99 >= 0.05 and ranp99 - np99 >= 0.10}
        if "setup3" in st:
            d = mean(st["setup3"]["anp"]["0"]) - mean(st["setup3"]["np"]["0"])
            c["9"] = {"anp_minus_np": d, "pass": d >= 0.2}
        if "clean" in st:
            deg = {m: mean(st["clean"][m]["eval0"]) - mean(st["clean"][m]["eval0.6"]) for m in ("np", "anp")}
            d = deg["anp"] - deg["np"]
            c["10"] = {"degradation": deg, "excess": d, "pass": d >= 1.0}
        if "setup2" in st:
            d = mean(st["setup2"]["anp_setup2"]) - mean(st["setup2"]["anp_setup3"])
            c["11"] = {"setup2_minus_setup3": d, "pass": d >= 0.15}
        if "ablation" in st:
            a = st["ablation"]
            full = mean(a["r-anp"])
            d1, d2 = full - mean(a["r-anp-no-sig"]), full - mean(a["r-anp-all-pts"])
            c["12"] = {"vs_no_sig": d1, "vs_all_pts": d2, "pass": d1 >= 0.05 and d2 >= 0.05}
        if "tune" in st:
            ws = [st["tune"][f"{l:g}"]["best"] for l in TUNE_LEVELS]
            c["13"] = {"best_w": ws, "grid_steps_down": grid_violation(ws, FINE_W_GRID),
                       "pass": grid_violation(ws, FINE_W_GRID) <= 1}
        if "oracle" in st:
            o = st["oracle"]
            gaps = [o["oracle"] - v for v in o["anp"]]
            c["14"] = {"oracle": o["oracle"], "anp": o["anp"], "max_excess": -min(gaps),
                       "mean_gap": float(np.mean(gaps)),
                       "pass": min(gaps) >= -0.05 and float(np.mean(gaps)) <= 0.4}
        if "image" in st:
            im = st["image"]
            c["15"] = {"seconds": im["seconds"], "train_seconds": im.get("train_seconds"),
                       "pass": im["exit_code"] == 0 and Path(im["strip"]).exists() and im["seconds"] < 300}
        self.summary["criteria"] = c
        return c


def grid_violation(values, grid) -> int:
    """Total number of grid steps by which a sequence decreases."""
    idx = [sorted(grid).index(v) if v in grid else int(np.searchsorted(sorted(grid), v)) for v in values]
    return int(sum(max(0, a - b) for a, b in zip(idx, idx[1:])))


def run_desk_pipeline(root, base: Optional[ExperimentConfig] = None, stages=None) -> dict:
    torch.set_num_threads(max(1, torch.get_num_threads()))
    if isinstance(stages, str):
        stages = [s.strip() for s in stages.split(",") if s.strip()]
    return DeskPipeline(root, base).run(stages)
