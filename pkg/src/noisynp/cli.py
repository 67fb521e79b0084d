"""``noisynp`` command line: train, eval, sweep, render, export-plots, reproduce."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ExperimentConfig, code_version, dump_config, from_dict, load_config, resolve_path
from .errors import CheckpointFormatError, ConfigError, NumericalError
from .funcdata import NoiseSpec
from .results import EvalResult, ResultsStore

log = logging.getLogger("noisynp")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def write_provenance(directory, cfg: ExperimentConfig, name: str = "config") -> None:
    """Resolved config and code hash beside an output."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, directory / f"{name}.yaml")
    (directory / "code_version.txt").write_text(code_version() + "\n")


def _config(args) -> ExperimentConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    return load_config(args.config, overrides)


def _summary(result: EvalResult) -> str:
    lines = []
    for a in sorted(result.aggregate(), key=lambda r: (r["model"], r["setup"], r["noise_s"], r["noise_r"])):
        cell = f"{a['mean']:.4f}" + (f" ± {a['std']:.4f}" if "std" in a else "")
        lines.append(f"{a['model']:>14s}  setup {a['setup']}  s={a['noise_s']:<5g} r={a['noise_r']:<5g} "
                     f"{cell}  (n={a['n_seeds']})")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    from .train import train

    cfg = _config(args)
    out = Path(args.out) if args.out else resolve_path(cfg.paths.checkpoint_dir) / \
        f"{cfg.model.variant}-{cfg.training_digest()[:12]}"
    write_provenance(out, cfg)
    ckpt = out / "checkpoint.ckpt"
    if ckpt.exists() and not args.resume:
        ckpt.unlink()
    tr = train(cfg, checkpoint_path=ckpt, log_path=out / "train_log.jsonl", resume=args.resume)
    print(ckpt)
    log.info("trained %s for %d steps", cfg.model.variant, tr.step)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    from .eval import evaluate_task_set, TestSets, _eval_samples
    from .train import load_model

    model, ck_cfg = load_model(args.checkpoint)
    if args.config is not None or args.set:
        cfg = _config(args)
        if cfg.model.variant != ck_cfg.model.variant:
            raise ConfigError(f"checkpoint holds {ck_cfg.model.variant!r}, "
                              f"config asks for {cfg.model.variant!r}")
        # the trained model is described by the checkpoint; evaluation knobs come from the config
        cfg = ck_cfg.replace(eval=cfg.to_dict()["eval"])
    else:
        cfg = ck_cfg
    images = None
    if cfg.data.kind == "image":
        from .train import load_image_set
        images = load_image_set(cfg)
    sets = TestSets(cfg, images)
    out = Path(args.out) if args.out else resolve_path(cfg.paths.results_dir)
    store = ResultsStore(out)
    write_provenance(out, cfg, "eval_config")
    result = EvalResult()
    name = args.name or cfg.model.variant
    setup = cfg.eval_setup
    from .eval import _row
    for level in cfg.eval.noise_grid:
        noise = NoiseSpec.level(float(level))
        tasks = sets.get(noise)
        value = evaluate_task_set(model, tasks, _eval_samples(model, cfg), seed=cfg.eval.eval_seed)
        row = _row(cfg, name, setup, noise, cfg.train.seed, value, sum(t.batch_size for t in tasks))
        key = f"eval|{Path(args.checkpoint).resolve()}|{name}|s{noise.std:g}|r{noise.rate:g}|{cfg.digest()[:16]}"
        store.commit(key, [row], {"row": row, "checkpoint": str(args.checkpoint)})
        result.extend([row])
    print(_summary(result))
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep


def _floats(text: Optional[str]):
    if text is None:
        return None
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: Optional[str]):
    if text is None:
        return None
    return [int(v) for v in text.split(",") if v.strip()]


def _run_cell(payload):
    """Worker entry point: one (model, noise, seed) cell."""
    cfg_dict, spec, setup, noise, seed = payload
    from .eval import Experiment
    exp = Experiment(from_dict(cfg_dict))
    return exp.result_cell(spec, setup, noise, seed).rows


def _sweep_cells(cfg: ExperimentConfig, args):
    from .eval import parse_run_spec
    models = args.models.split(",") if args.models else [cfg.model.variant]
    seeds = _ints(args.seeds) or list(cfg.eval.seeds)
    setup = cfg.eval_setup
    w = _weights(args.w_sigma)
    specs = [parse_run_spec(m, w_sigma=w) for m in models]
    cells = []
    if args.s_grid or args.r_grid:
        s_grid = _floats(args.s_grid) or list(cfg.eval.noise_grid)
        r_grid = _floats(args.r_grid) or list(cfg.eval.noise_grid)
        for spec in specs:
            for s in s_grid:
                for r in r_grid:
                    for seed in seeds:
                        cells.append((spec, setup, (s, r), seed))
    else:
        for spec in specs:
            for level in _floats(args.noise) or cfg.eval.noise_grid:
                for seed in seeds:
                    cells.append((spec, setup, float(level), seed))
    return cells


def _weights(text: Optional[str]):
    """``10`` or ``0.3:5,0.6:10,0.99:20`` (per noise level)."""
    if text is None:
        return None
    if ":" not in text:
        return float(text)
    return {float(k): float(v) for k, v in (item.split(":") for item in text.split(","))}


def cmd_sweep(args) -> int:
    from .eval import Experiment, tune_variance_weight, COARSE_W_GRID, FINE_W_GRID

    cfg = _config(args)
    if args.out:
        cfg = cfg.replace(paths={"results_dir": str(Path(args.out) / "results"),
                                 "checkpoint_dir": str(Path(args.out) / "checkpoints")})
    out = resolve_path(cfg.paths.results_dir)
    write_provenance(out, cfg, "sweep_config")
    if args.tune:
        exp = Experiment(cfg)
        grid = {"coarse": COARSE_W_GRID, "fine": FINE_W_GRID}.get(args.w_grid) or _floats(args.w_grid)
        report = {}
        for level in _floats(args.tune):
            best, table = tune_variance_weight(exp, level, grid=grid, refine=args.refine,
                                               seed=(_ints(args.seeds) or [cfg.train.seed])[0])
            report[f"{level:g}"] = {"best_w_sigma": best, "table": table}
            print(f"noise {level:g}: best w_sigma {best:g}")
        (out / "tuning.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        return EXIT_OK
    cells = _sweep_cells(cfg, args)
    rows = []
    if args.workers > 1:
        payloads = [(cfg.to_dict(),) + c for c in cells]
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            for r in pool.map(_run_cell, payloads):
                rows.extend(r)
    else:
        exp = Experiment(cfg)
        for spec, setup, noise, seed in cells:
            rows.extend(exp.result_cell(spec, setup, noise, seed).rows)
    result = EvalResult(rows)
    (out / "aggregate.json").write_text(json.dumps(result.table(), indent=2, sort_keys=True))
    print(_summary(result))
    return EXIT_OK


# ---------------------------------------------------------------------------
# render


def cmd_render(args) -> int:
    from .imagefunc import ImageFunctionSet, context_image, render_prediction, sample_image_task, save_strip
    from .train import load_model

    models = [load_model(p) for p in args.checkpoint]
    cfg0 = models[0][1]
    image_dir = args.images or (resolve_path(cfg0.data.image_dir) if cfg0.data.image_dir else None)
    if image_dir is None:
        raise ConfigError("render needs --images or a checkpoint trained on images")
    images = ImageFunctionSet.from_directory(image_dir, cfg0.data.image_size)
    rng = np.random.default_rng(args.task_seed)
    noise = NoiseSpec.level(args.noise)
    index = args.image_index if args.image_index is not None else int(rng.integers(len(images)))
    task = sample_image_task(images, args.n_ctx, None, noise, 3, "eval", rng, image_index=[index])
    h, w, _ = images.shape
    clean = images.images[index]
    panels = [clean, context_image(task, images.stats, h, w, images.images.dtype)]
    names = []
    for i, (model, cfg) in enumerate(models):
        img, _ = render_prediction(model, images, task, K=args.K, rng=np.random.default_rng(args.task_seed + i))
        panels.append(img)
        names.append(cfg.model.variant)
    out = Path(args.out) if args.out else Path("render.png")
    if out.suffix.lower() != ".png":
        out = out / "render.png"
    save_strip(out, panels, sidecar={
        "task_seed": args.task_seed, "noise_level": args.noise, "context_size": args.n_ctx,
        "image_index": int(index), "K": args.K, "panels": ["clean", "context"] + names,
        "checkpoints": [str(p) for p in args.checkpoint], "code_version": code_version()})
    write_provenance(out.parent, cfg0, "render_config")
    print(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# export-plots

FIGURES = {
    "fig1": {"setup": 1},
    "fig2": {"setup": 3},
    "fig4": {},
    "fig4-right": {"delta_vs": "np"},
    "fig6": {"grid": True},
    "fig7": {"models": ("r-anp", "r-anp-no-sig", "r-anp-all-pts")},
}


def export_series(result: EvalResult, figure: str, out_dir, setup: Optional[int] = None,
                  dataset: Optional[str] = None) -> list[Path]:
    """One CSV per series with columns ``x, y, std, n_seeds``.

    Coupled-noise figures use x = noise level and one series per model; fig6
    uses x = noise std and one series per (model, rate). Files whose content
    is unchanged are not rewritten.
    """
    if figure not in FIGURES:
        raise ConfigError(f"unknown figure {figure!r}; choose from {sorted(FIGURES)}")
    spec = FIGURES[figure]
    setup = spec.get("setup", setup)
    rows = result.aggregate()
    if setup is not None:
        rows = [r for r in rows if r["setup"] == setup]
    if dataset is not None:
        rows = [r for r in rows if r["dataset"] == dataset]
    if "models" in spec:
        rows = [r for r in rows if r["model"] in spec["models"]]
    grid = spec.get("grid", False)
    if not grid:
        rows = [r for r in rows if r["noise_s"] == r["noise_r"]]
    series: dict = {}
    for r in rows:
        group = (r["dataset"], r["kernel"], r["setup"], r["model"]) + ((r["noise_r"],) if grid else ())
        series.setdefault(group, {})[r["noise_s"]] = r
    if "delta_vs" in spec:
        ref_model = spec["delta_vs"]
        deltas = {}
        for group, pts in series.items():
            ref = series.get(group[:3] + (ref_model,))
            if ref is None:
                continue
            deltas[group] = {x: dict(p, mean=p["mean"] - ref[x]["mean"], std=None)
                             for x, p in pts.items() if x in ref}
        series = deltas
    out_dir = Path(out_dir) / figure
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for group, pts in sorted(series.items(), key=lambda kv: tuple(str(g) for g in kv[0])):
        dataset_, kernel, setup_, model = group[:4]
        name = f"{dataset_}_{kernel or 'image'}_setup{setup_}_{model}"
        if grid:
            name += f"_r{group[4]:g}"
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "y", "std", "n_seeds"])
        for x in sorted(pts):
            p = pts[x]
            std = p.get("std")
            w.writerow([repr(float(x)), repr(float(p["mean"])), "" if std is None else repr(float(std)),
                        p["n_seeds"]])
        path = out_dir / f"{name}.csv"
        if not path.exists() or path.read_text() != buf.getvalue():
            path.write_text(buf.getvalue())
        written.append(path)
    return written


def cmd_export_plots(args) -> int:
    results_dir = Path(args.results)
    csv_path = results_dir / "results.csv" if results_dir.is_dir() else results_dir
    if not csv_path.exists():
        raise FileNotFoundError(f"no results at {csv_path}")
    result = ResultsStore(csv_path.parent).load() if csv_path.name == "results.csv" \
        else EvalResult.from_csv(csv_path)
    figures = sorted(FIGURES) if args.figure == "all" else [args.figure]
    out = Path(args.out) if args.out else results_dir / "plots"
    for fig in figures:
        for p in export_series(result, fig, out, setup=args.setup, dataset=args.dataset):
            print(p)
    (out / "code_version.txt").write_text(code_version() + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# reproduce


def cmd_reproduce(args) -> int:
    from .reproduce import run_desk_pipeline

    cfg = _config(args) if (args.config or args.set) else None
    summary = run_desk_pipeline(args.out or "desk_run", base=cfg, stages=args.stages)
    print(json.dumps(summary.get("criteria", {}), indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="noisynp", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", type=Path, help="YAML experiment config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
        if seed:
            sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path)
        sp.add_argument("--resume", action=argparse.BooleanOptionalAction, default=True)

    sp = sub.add_parser("train", help="train one model")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint over the eval noise grid")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--name", help="model name recorded in the results")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="train and evaluate a grid of cells (resumable)")
    common(sp)
    sp.add_argument("--models", help="comma-separated ids, e.g. np,anp,r-anp,r-anp-no-sig")
    sp.add_argument("--noise", help="comma-separated coupled noise levels")
    sp.add_argument("--s-grid", help="comma-separated noise stds (decoupled grid)")
    sp.add_argument("--r-grid", help="comma-separated noise rates (decoupled grid)")
    sp.add_argument("--seeds", help="comma-separated seeds")
    sp.add_argument("--w-sigma", help="variance weight, or level:weight pairs")
    sp.add_argument("--tune", help="comma-separated noise levels to tune w_sigma at")
    sp.add_argument("--w-grid", default="fine", help="'coarse', 'fine' or comma-separated values")
    sp.add_argument("--refine", action="store_true")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("render", help="image completion strip from one or more checkpoints")
    sp.add_argument("--checkpoint", type=Path, action="append", required=True)
    sp.add_argument("--images", type=Path)
    sp.add_argument("--n-ctx", type=int, default=200)
    sp.add_argument("--noise", type=float, default=0.0)
    sp.add_argument("--task-seed", type=int, default=0)
    sp.add_argument("--image-index", type=int)
    sp.add_argument("--K", type=int, default=30)
    sp.add_argument("--out", type=Path)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("export-plots", help="plot-ready series files from results")
    sp.add_argument("--results", type=Path, required=True)
    sp.add_argument("--figure", default="all", choices=sorted(FIGURES) + ["all"])
    sp.add_argument("--setup", type=int)
    sp.add_argument("--dataset")
    sp.add_argument("--out", type=Path)
    sp.set_defaults(func=cmd_export_plots)

    sp = sub.add_parser("reproduce", help="desk-scale reproduction pipeline")
    common(sp, seed=False)
    sp.add_argument("--stages", help="comma-separated subset of stages")
    sp.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        step = getattr(exc, "step", None)
        where = f" at step {step}" if step is not None else ""
        print(f"numerical error{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
