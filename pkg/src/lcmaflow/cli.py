"""Command-line entry point: ``lcmaflow <command> [flags]``.

Every command writes fixed file names inside ``--out``. Exit status is 0 on
success, 2 on a usage error, 1 on a runtime error and 3 when training
diverges.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from importlib import resources

import numpy as np

from .container import CorruptFileError
from .data import generate_blobs, load_dataset, save_dataset, write_image_grid
from .flow import LayoutError, load_model, save_model
from .plan import derive_plan_baseline, load_maps, load_plan, plan_from_maps, save_maps, save_plan
from .train import DivergenceError, TrainConfig, evaluate_bpd, interpolate, pretrain, sample, train_with_plan

log = logging.getLogger("lcmaflow")

STRATEGY_TAGS = {"lcma": "lcma", "static": "static-realnvp", "random": "random", "reverse": "reverse-lcma"}
ABLATION_ORDER = ("lcma", "static", "random", "reverse")

# the structured synthetic set used by the bundled configuration
DATA_DEFAULTS = dict(n=2000, size=8, structure=0.95, informative=0.25, seed=123)


class UsageError(Exception):
    pass


def bundled_config_path(name: str = "desk.cfg") -> str:
    return str(resources.files("lcmaflow").joinpath("configs", name))


def _config(args) -> TrainConfig:
    path = args.config or bundled_config_path()
    return TrainConfig.load(path, seed=getattr(args, "seed", None))


def _need(args, *names):
    missing = [f"--{n}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"{args.command} needs {' and '.join(missing)}")


def _out(args, name: str) -> str:
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _parse_layout(text: str) -> tuple[int, int, int]:
    try:
        s1, s2, c = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise UsageError(f"--layout must look like 8x8x1, got {text!r}") from exc
    return s1, s2, c


def _grid_name(stem: str, channels: int) -> str:
    return f"{stem}.pgm" if channels == 1 else f"{stem}.ppm"


def _bundled_dataset():
    return generate_blobs(DATA_DEFAULTS["n"], DATA_DEFAULTS["size"], seed=DATA_DEFAULTS["seed"],
                          structure=DATA_DEFAULTS["structure"], informative_fraction=DATA_DEFAULTS["informative"])


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> None:
    ds = generate_blobs(args.n if args.n is not None else DATA_DEFAULTS["n"],
                        args.size, seed=DATA_DEFAULTS["seed"] if args.seed is None else args.seed,
                        structure=args.structure, informative_fraction=args.informative)
    path = _out(args, "data.fft")
    save_dataset(ds, path)
    print(path)


def cmd_pretrain(args) -> None:
    _need(args, "data")
    cfg = _config(args)
    ds = load_dataset(args.data)
    model, maps = pretrain(cfg, ds)
    ids, _ = model.trace_ids()
    save_model(model, _out(args, "pretrain.ffm"))
    save_maps([m.live[0] for m in maps], ids, _out(args, "maps.fft"))
    print(_out(args, "maps.fft"))


def _make_plan(strategy: str, layout, scales: int, seed: int, maps_path):
    tag = STRATEGY_TAGS[strategy]
    if tag in ("lcma", "reverse-lcma"):
        if maps_path is None:
            raise UsageError(f"plan --strategy {strategy} needs --maps from a pretrain run")
        maps, ids = load_maps(maps_path)
        if len(maps) < scales:
            raise ValueError(f"maps file has {len(maps)} boundaries, config asks for {scales} scales")
        return plan_from_maps(maps[:scales], ids[:scales], layout, reverse=tag == "reverse-lcma")
    return derive_plan_baseline(tag, layout, scales, seed=seed)


def cmd_plan(args) -> None:
    _need(args, "strategy")
    cfg = _config(args)
    if args.layout:
        layout = _parse_layout(args.layout)
    elif args.data:
        layout = load_dataset(args.data).layout
    elif args.maps:
        maps, _ = load_maps(args.maps)
        h, w, c4 = maps[0].shape  # first boundary sits right after the first squeeze
        layout = (2 * h, 2 * w, c4 // 4)
    else:
        raise UsageError("plan needs --layout, --data or --maps to know the image layout")
    plan = _make_plan(args.strategy, layout, cfg.scales, cfg.seed, args.maps)
    path = _out(args, f"{args.strategy}.plan")
    save_plan(plan, path)
    print(path)


def cmd_train(args) -> None:
    _need(args, "data", "plan")
    cfg = _config(args)
    model, metrics = train_with_plan(cfg, load_dataset(args.data), load_plan(args.plan))
    save_model(model, _out(args, "model.ffm"))
    metrics.write_csv(_out(args, "metrics.csv"), timing=args.timing)
    print(f"final valid bits/dim {metrics.final_valid_bpd:.6f}")


def cmd_eval(args) -> None:
    _need(args, "model", "data")
    cfg = _config(args)
    ds = load_dataset(args.data)
    images = ds.valid if len(ds.valid) else ds.train
    bpd = evaluate_bpd(load_model(args.model), images, cfg.dequant_alpha, rng=np.random.default_rng(cfg.seed))
    print(f"{bpd:.6f}")


def cmd_sample(args) -> None:
    _need(args, "model")
    cfg = _config(args)
    model = load_model(args.model)
    n = args.n if args.n is not None else 16
    if n <= 0:
        raise UsageError("--n must be positive")
    imgs = sample(model, n, np.random.default_rng(cfg.seed), cfg.dequant_alpha)
    path = _out(args, _grid_name("samples", imgs.shape[-1]))
    write_image_grid(imgs, path)
    print(path)


def cmd_interpolate(args) -> None:
    _need(args, "model", "data")
    cfg = _config(args)
    ds = load_dataset(args.data)
    pool = ds.valid if len(ds.valid) >= 2 else ds.images
    if len(pool) < 2:
        raise ValueError("interpolation needs at least two images")
    steps = args.steps if args.steps is not None else 8
    if steps < 2:
        raise UsageError("--steps must be at least 2")
    model = load_model(args.model)
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for _ in range(args.pairs):
        a, b = rng.choice(len(pool), size=2, replace=False)
        rows.extend(interpolate(model, pool[a], pool[b], steps, cfg.dequant_alpha))
    path = _out(args, _grid_name("interpolation", ds.layout[2]))
    write_image_grid(np.stack(rows), path, cols=steps)
    print(path)


def run_ablation(cfg: TrainConfig, ds, seeds, out_dir: str, timing: bool = False) -> list[dict]:
    """Pretrain once per seed, then train every strategy with the same seed."""
    os.makedirs(os.path.join(out_dir, "plans"), exist_ok=True)
    rows = []
    for seed in seeds:
        run_cfg = TrainConfig(**{**vars(cfg), "seed": seed})
        t0 = time.perf_counter()
        pre_model, maps = pretrain(run_cfg, ds)
        ids, _ = pre_model.trace_ids()
        live = [m.live[0] for m in maps]
        pre_seconds = time.perf_counter() - t0
        for strategy in ABLATION_ORDER:
            tag = STRATEGY_TAGS[strategy]
            if tag in ("lcma", "reverse-lcma"):
                plan = plan_from_maps(live, ids, ds.layout, reverse=tag == "reverse-lcma")
            else:
                plan = derive_plan_baseline(tag, ds.layout, cfg.scales, seed=seed)
            save_plan(plan, os.path.join(out_dir, "plans", f"{strategy}-seed{seed}.plan"))
            t1 = time.perf_counter()
            _, metrics = train_with_plan(run_cfg, ds, plan)
            seconds = time.perf_counter() - t1 + (pre_seconds if tag in ("lcma", "reverse-lcma") else 0.0)
            rows.append(dict(strategy=tag, seed=seed, final_valid_bpd=metrics.final_valid_bpd, seconds=seconds))
            log.info("seed %d %s %.4f bits/dim", seed, tag, metrics.final_valid_bpd)
    with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "seed", "final_valid_bpd", "seconds"])
        for r in rows:
            w.writerow([r["strategy"], r["seed"], repr(r["final_valid_bpd"]), f"{r['seconds']:.3f}" if timing else ""])
    summary = ablation_summary(rows)
    with open(os.path.join(out_dir, "ablation_summary.txt"), "w", newline="\n") as fh:
        fh.write(summary)
    return rows


def ablation_summary(rows) -> str:
    lines = ["strategy        mean_bpd   std_bpd  seeds"]
    for strategy in ABLATION_ORDER:
        vals = np.array([r["final_valid_bpd"] for r in rows if r["strategy"] == STRATEGY_TAGS[strategy]])
        if len(vals):
            std = vals.std(ddof=1) if len(vals) > 1 else 0.0
            lines.append(f"{STRATEGY_TAGS[strategy]:<15} {vals.mean():.4f} ± {std:.4f}  {len(vals)}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> None:
    cfg = _config(args)
    ds = load_dataset(args.data) if args.data else _bundled_dataset()
    k = args.seeds if args.seeds is not None else 5
    if k <= 0:
        raise UsageError("--seeds must be positive")
    base = args.seed if args.seed is not None else 0
    rows = run_ablation(cfg, ds, range(base, base + k), args.out, timing=args.timing)
    sys.stdout.write(ablation_summary(rows))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "plan": cmd_plan,
    "train": cmd_train,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "interpolate": cmd_interpolate,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lcmaflow", description="Multi-scale normalizing flows with "
                                     "log-det-ranked factorization.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, *flags):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value training config (default: bundled desk.cfg)")
        p.add_argument("--out", default=".", help="output directory (default: current directory)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                       help="log progress to stderr")
        for flag in flags:
            flag(p)
        return p

    data = lambda p: p.add_argument("--data", help="dataset file from gen-data")  # noqa: E731
    model = lambda p: p.add_argument("--model", help="model file")  # noqa: E731
    timing = lambda p: p.add_argument("--timing", action="store_true",  # noqa: E731
                                      help="record wall-clock seconds (makes outputs run-dependent)")

    g = add("gen-data", "write a structured synthetic dataset")
    g.add_argument("--n", type=int, help=f"number of images (default {DATA_DEFAULTS['n']})")
    g.add_argument("--size", type=int, default=DATA_DEFAULTS["size"], help="image side length")
    g.add_argument("--structure", type=float, default=DATA_DEFAULTS["structure"])
    g.add_argument("--informative", type=float, default=DATA_DEFAULTS["informative"],
                   help="fraction of pixel positions that carry the scene")

    add("pretrain", "train a flow without factor layers and record its log-det maps", data)
    p = add("plan", "derive a factorization plan", data)
    p.add_argument("--strategy", choices=sorted(STRATEGY_TAGS))
    p.add_argument("--maps", help="maps file from pretrain (lcma, reverse)")
    p.add_argument("--layout", help="image layout such as 8x8x1 (static, random)")
    add("train", "train a multi-scale flow with a plan", data, timing,
        lambda q: q.add_argument("--plan", help="plan file"))
    add("eval", "print validation bits/dim", data, model)
    add("sample", "write a grid of samples", model, lambda q: q.add_argument("--n", type=int, help="sample count"))
    add("interpolate", "write latent interpolations between validation images", data, model,
        lambda q: q.add_argument("--steps", type=int, help="frames per row (default 8)"),
        lambda q: q.add_argument("--pairs", type=int, default=4, help="number of image pairs"))
    add("ablate", "compare all four strategies over several seeds", data, timing,
        lambda q: q.add_argument("--seeds", type=int, help="number of seeds (default 5)"))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"lcmaflow: error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"lcmaflow: training diverged: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError, CorruptFileError, LayoutError) as exc:
        print(f"lcmaflow: {exc}", file=sys.stderr)
        return 1
    return 0
