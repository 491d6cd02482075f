"""Command-line orchestration: config parsing, pipeline stages, evaluation
protocol, and scaling studies, with CSV and minimal SVG output.

Exit codes: 0 success, 2 configuration error, 3 numeric abort. The only
environment variable consulted is UNILOCO_THREADS (BLAS/OpenMP thread cap,
applied before numerics start)."""

from __future__ import annotations

import argparse
import csv
import hashlib
import os
import sys
import time
from dataclasses import dataclass, field, fields as dc_fields, replace

if "UNILOCO_THREADS" in os.environ:  # must precede numpy import
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, os.environ["UNILOCO_THREADS"])

import numpy as np

from . import nn
from .dataset import Dataset, subset
from .diffusion import (
    Planner,
    PlannerConfig,
    build_noise_schedule,
    holdout_rmse,
    save_planner,
    train_planner,
)
from .ppo import PPOConfig, SpecialistPolicy, collect_skills, train_specialist
from .terrain import KINDS, UNSEEN_KINDS, TerrainSpec, generate_heightfield
from .unified import UnifiedRewardConfig, evaluate_policy, train_unified

__all__ = [
    "RunConfig",
    "ConfigError",
    "parse_config",
    "echo_config",
    "run_eval",
    "scale_study",
    "types_study",
    "write_svg_lines",
    "main",
]

class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    stage: str = "eval"
    seeds: tuple = (0,)
    terrains: tuple = ("flat",)
    fractions: tuple = (1.0,)
    episodes: int = 20
    frames: int = 200_000
    planner_iters: int = 2000
    unified_steps: int = 100_000
    phase1_steps: int = 500_000
    phase2_steps: int = 1_000_000
    out_dir: str = "runs"
    ppo: PPOConfig = field(default_factory=PPOConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    unified: UnifiedRewardConfig = field(default_factory=UnifiedRewardConfig)


_SECTIONS = {"run": None, "ppo": "ppo", "planner": "planner", "unified": "unified"}


def _convert(raw: str, default, key: str, lineno: int):
    kind = type(default)
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false"):
                raise ValueError
            return raw.lower() == "true"
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if kind is tuple:
            items = [p.strip() for p in raw.split(",") if p.strip()]
            elem = type(default[0]) if default else str
            return tuple(elem(p) for p in items)
    except (TypeError, ValueError):
        raise ConfigError(f"line {lineno}: bad value {raw!r} for key {key!r}")
    raise ConfigError(f"line {lineno}: unsupported type for key {key!r}")


def parse_config(path) -> RunConfig:
    """Strict sectioned key = value parser. Unknown sections or keys are
    rejected with their line number."""
    cfg = RunConfig()
    section = "run"
    with open(path) as f:
        lines = f.readlines()
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if text.startswith("[") and text.endswith("]"):
            section = text[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in text:
            raise ConfigError(f"line {lineno}: expected key = value, got {text!r}")
        key, raw = (p.strip() for p in text.split("=", 1))
        target = cfg if _SECTIONS[section] is None else getattr(cfg, _SECTIONS[section])
        names = {f.name for f in dc_fields(target)} - {"ppo", "planner", "unified"}
        if key not in names:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{section}]")
        value = _convert(raw, getattr(target, key), key, lineno)
        if target is cfg:
            cfg = replace(cfg, **{key: value})
        else:
            setattr(cfg, _SECTIONS[section], replace(target, **{key: value}))
    return cfg


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def echo_config(cfg: RunConfig) -> str:
    """Text form listing every field including defaults; parses back to an
    equal RunConfig."""
    out = []
    for section, attr in _SECTIONS.items():
        target = cfg if attr is None else getattr(cfg, attr)
        out.append(f"[{section}]")
        for f in dc_fields(target):
            if f.name in ("ppo", "planner", "unified"):
                continue
            out.append(f"{f.name} = {_fmt(getattr(target, f.name))}")
        out.append("")
    return "\n".join(out)


def write_svg_lines(path, xs, series: dict, title: str, xlabel: str, ylabel: str,
                    width=640, height=400):
    """Minimal multi-line SVG chart (hand-written, no plotting package)."""
    xs = np.asarray(xs, dtype=np.float64)
    all_y = np.concatenate([np.asarray(v, dtype=np.float64) for v in series.values()])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(all_y.min()), float(all_y.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    m = 60  # margin px
    def sx(x):
        return m + (x - x0) / (x1 - x0) * (width - 2 * m)
    def sy(y):
        return height - m - (y - y0) / (y1 - y0) * (height - 2 * m)
    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width/2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<text x="{width/2}" y="{height-10}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="15" y="{height/2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 15 {height/2})">{ylabel}</text>',
        f'<line x1="{m}" y1="{height-m}" x2="{width-m}" y2="{height-m}" stroke="black"/>',
        f'<line x1="{m}" y1="{m}" x2="{m}" y2="{height-m}" stroke="black"/>',
        f'<text x="{m}" y="{height-m+15}" font-size="10">{x0:.4g}</text>',
        f'<text x="{width-m}" y="{height-m+15}" text-anchor="end" font-size="10">{x1:.4g}</text>',
        f'<text x="{m-5}" y="{height-m}" text-anchor="end" font-size="10">{y0:.4g}</text>',
        f'<text x="{m-5}" y="{m}" text-anchor="end" font-size="10">{y1:.4g}</text>',
    ]
    for i, (name, ys) in enumerate(series.items()):
        pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys))
        color = colors[i % len(colors)]
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{width-m+5}" y="{m+15*i}" font-size="11" fill="{color}">{name}</text>')
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts))


def _sha256(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def run_eval(policy_path, planner_path, terrains, episodes: int, seeds,
             csv_path=None, open_loop: bool = False, level: int = 0,
             replan_interval: int = 5, timing: bool = True):
    """Evaluate a unified policy (or open-loop planner tracking) on a suite
    of terrains across seeds. Returns (rows, report) where rows are per
    terrain x seed and report aggregates mean +- std per terrain.

    With timing=False the wall-clock planner_ms column is left blank so
    repeated runs with the same seeds produce byte-identical CSV files."""
    for p in ([policy_path] if not open_loop else []) + [planner_path]:
        if not os.path.exists(p):
            raise ConfigError(f"missing checkpoint {p}")
    planner = Planner.load(planner_path)
    policy = None
    if not open_loop:
        from .unified import UnifiedPolicy

        arrays, manifest = nn.load_checkpoint(policy_path)
        h = int(dict(kv.split("=") for kv in manifest.split()[1:])["h"])
        if h != planner.cfg.h:
            raise ConfigError(f"policy horizon {h} != planner horizon {planner.cfg.h}")
        policy = UnifiedPolicy(np.random.default_rng(0), h)
        policy.load_state(arrays)
    before = _sha256(planner_path)
    rows = []
    t0 = time.time()
    for kind in terrains:
        for seed in seeds:
            res = evaluate_policy(policy, planner, kind, episodes=episodes,
                                  seed=seed, level=level, open_loop=open_loop,
                                  replan_interval=replan_interval)
            rows.append({"terrain": kind, "difficulty": level, "seed": seed, **res})
    report = []
    for kind in terrains:
        cell = [r for r in rows if r["terrain"] == kind]
        entry = {"terrain": kind, "wall_s": time.time() - t0,
                 "r_succ_mean": float(np.mean([r["r_succ"] for r in cell])),
                 "r_cmp_mean": float(np.mean([r["r_cmp"] for r in cell]))}
        if len(cell) >= 2:
            entry["r_succ_std"] = float(np.std([r["r_succ"] for r in cell]))
            entry["r_cmp_std"] = float(np.std([r["r_cmp"] for r in cell]))
        report.append(entry)
    assert _sha256(planner_path) == before, "evaluation must not mutate checkpoints"
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["terrain [kind]", "difficulty [level]", "seed [int]",
                        "r_succ [frac]", "r_cmp [frac]", "mean_steps [steps]",
                        "planner_ms [ms]"])
            for r in rows:
                w.writerow([r["terrain"], r["difficulty"], r["seed"],
                            r["r_succ"], r["r_cmp"], r["mean_steps"],
                            r["planner_ms"] if timing else ""])
    return rows, report


def scale_study(ds: Dataset, fractions, cfg: PlannerConfig, iters: int,
                seed: int = 0, holdout_frac: float = 0.2, csv_path=None,
                svg_path=None):
    """Train one planner per dataset fraction with identical budgets and
    report held-out reconstruction RMSE per fraction."""
    if list(fractions) != sorted(fractions):
        raise ConfigError("fractions must be sorted ascending")
    rng = np.random.default_rng(seed)
    n_hold = max(1, int(round(ds.n_episodes * holdout_frac)))
    order = rng.permutation(ds.n_episodes)
    hold = Dataset([ds.episodes[i] for i in order[:n_hold]])
    train = Dataset([ds.episodes[i] for i in order[n_hold:]])
    sched = build_noise_schedule(cfg.n_steps, cfg.schedule)
    rows = []
    for frac in fractions:
        part = train if frac >= 1.0 else subset(train, frac, np.random.default_rng(seed))
        net, _ = train_planner(part, cfg, iters, seed=seed)
        rmse = holdout_rmse(net, hold, sched, cfg, seed=seed + 1)
        rows.append({"fraction": frac, "heldout_rmse": rmse, "frames": part.n_frames})
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["fraction [of episodes]", "heldout_rmse [normalized]",
                        "frames [count]"])
            for r in rows:
                w.writerow([r["fraction"], r["heldout_rmse"], r["frames"]])
    if svg_path is not None:
        write_svg_lines(svg_path, [r["fraction"] for r in rows],
                        {"heldout_rmse": [r["heldout_rmse"] for r in rows]},
                        "planner error vs dataset fraction", "fraction", "rmse")
    return rows


def types_study(families, cfg: PlannerConfig, iters: int, seed: int = 0,
                holdout_frac: float = 0.2):
    """Train planners on growing unions of episode families (1..k) and
    report held-out RMSE on each family. families: list of Dataset."""
    rng = np.random.default_rng(seed)
    holds, trains = [], []
    for fam in families:
        n_hold = max(1, int(round(fam.n_episodes * holdout_frac)))
        order = rng.permutation(fam.n_episodes)
        holds.append(Dataset([fam.episodes[i] for i in order[:n_hold]]))
        trains.append([fam.episodes[i] for i in order[n_hold:]])
    sched = build_noise_schedule(cfg.n_steps, cfg.schedule)
    rows = []
    for k in range(1, len(families) + 1):
        merged = Dataset([ep for fam in trains[:k] for ep in fam])
        net, _ = train_planner(merged, cfg, iters, seed=seed)
        errs = {}
        for i, hold in enumerate(holds):
            # evaluate in the training normalization by rebasing the holdout
            rebased = Dataset(hold.episodes)
            rebased.state_mean, rebased.state_std = merged.state_mean, merged.state_std
            errs[f"rmse_family_{i}"] = holdout_rmse(net, rebased, sched, cfg, seed=seed + 1)
        rows.append({"k": k, **errs})
    return rows


# -- subcommands ------------------------------------------------------------------


def _cmd_gen_terrain(args):
    spec = TerrainSpec.for_kind(args.kind)
    f = generate_heightfield(spec, args.level, args.seed)
    f.save(args.out)
    print(f"wrote {args.out}: kind={args.kind} level={args.level} "
          f"length={f.length_m:.2f} m")
    return 0


def _cmd_train_specialist(args, cfg: RunConfig):
    os.makedirs(args.out, exist_ok=True)
    _write_run_artifacts(args.out, cfg, [args.seed])
    policy, curve = train_specialist(
        args.kind, args.seed, phase1_steps=cfg.phase1_steps,
        phase2_steps=cfg.phase2_steps, cfg=cfg.ppo, out_dir=args.out,
        target_success=args.target_success,
    )
    if curve and "aborted" in curve[-1]:
        print(f"numeric abort: {curve[-1]['aborted']}", file=sys.stderr)
        return 3
    last = curve[-1] if curve else {}
    print(f"done: r_succ={last.get('r_succ')} level={last.get('level')}")
    return 0


def _cmd_collect(args, cfg: RunConfig):
    arrays, _ = nn.load_checkpoint(args.policy)
    policy = SpecialistPolicy(np.random.default_rng(0))
    policy.load_state(arrays)
    episodes = collect_skills(policy, args.kind, args.frames, args.seed,
                              level=args.level)
    ds = Dataset(episodes, seed=args.seed, reward_names=("total",))
    ds.save(args.out)
    print(f"wrote {args.out}: {ds.n_episodes} episodes, {ds.n_frames} frames")
    return 0


def _cmd_inspect(args):
    ds = Dataset.load(args.dataset)
    print(ds.manifest_text())
    return 0


def _cmd_train_planner(args, cfg: RunConfig):
    ds = Dataset.load(args.dataset)
    net, curve = train_planner(ds, cfg.planner, cfg.planner_iters, seed=args.seed)
    save_planner(args.out, net, stats=(ds.state_mean, ds.state_std))
    print(f"wrote {args.out}: final loss {curve[-1]['loss']:.6f}")
    return 0


def _cmd_train_unified(args, cfg: RunConfig):
    os.makedirs(args.out, exist_ok=True)
    _write_run_artifacts(args.out, cfg, [args.seed])
    policy, disc, curve = train_unified(
        args.planner, tuple(args.terrains.split(",")), seed=args.seed,
        total_steps=cfg.unified_steps, cfg=cfg.ppo, ucfg=cfg.unified,
        out_dir=args.out,
    )
    if curve and "aborted" in curve[-1]:
        print(f"numeric abort: {curve[-1]['aborted']}", file=sys.stderr)
        return 3
    print(f"done: {curve[-1] if curve else {}}")
    return 0


def _cmd_eval(args, cfg: RunConfig):
    seeds = [int(s) for s in args.seeds.split(",")]
    rows, report = run_eval(args.policy, args.planner, args.terrain.split(","),
                            args.episodes, seeds, csv_path=args.csv,
                            open_loop=args.open_loop, level=args.level)
    for entry in report:
        std = entry.get("r_succ_std")
        extra = f" +- {std:.3f}" if std is not None else ""
        print(f"{entry['terrain']}: r_succ {entry['r_succ_mean']:.3f}{extra} "
              f"r_cmp {entry['r_cmp_mean']:.3f}")
    return 0


def _cmd_scale_study(args, cfg: RunConfig):
    ds = Dataset.load(args.dataset)
    os.makedirs(args.out, exist_ok=True)
    fractions = [float(x) for x in args.fractions.split(",")]
    rows = scale_study(ds, fractions, cfg.planner, cfg.planner_iters,
                       seed=args.seed, csv_path=f"{args.out}/scale.csv",
                       svg_path=f"{args.out}/scale.svg")
    for r in rows:
        print(f"fraction {r['fraction']}: rmse {r['heldout_rmse']:.5f}")
    return 0


def _write_run_artifacts(out_dir, cfg: RunConfig, seeds):
    with open(f"{out_dir}/config.echo", "w") as f:
        f.write(echo_config(cfg))
    with open(f"{out_dir}/seeds.txt", "w") as f:
        f.write(" ".join(str(s) for s in seeds) + "\n")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uniloco")
    p.add_argument("--config", help="sectioned key = value config file")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-terrain")
    g.add_argument("--kind", required=True, choices=KINDS)
    g.add_argument("--level", type=int, default=0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train-specialist")
    t.add_argument("--kind", required=True, choices=KINDS)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--target-success", type=float, default=None)

    c = sub.add_parser("collect")
    c.add_argument("--policy", required=True)
    c.add_argument("--kind", required=True, choices=KINDS)
    c.add_argument("--frames", type=int, default=50_000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--level", type=int, default=0)
    c.add_argument("--out", required=True)

    i = sub.add_parser("inspect")
    i.add_argument("--dataset", required=True)

    tp = sub.add_parser("train-planner")
    tp.add_argument("--dataset", required=True)
    tp.add_argument("--seed", type=int, default=0)
    tp.add_argument("--out", required=True)

    tu = sub.add_parser("train-unified")
    tu.add_argument("--planner", required=True)
    tu.add_argument("--terrains", default="flat")
    tu.add_argument("--seed", type=int, default=0)
    tu.add_argument("--out", required=True)

    e = sub.add_parser("eval")
    e.add_argument("--policy", default="")
    e.add_argument("--planner", required=True)
    e.add_argument("--terrain", default="flat")
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--seeds", default="0,1,2")
    e.add_argument("--level", type=int, default=0)
    e.add_argument("--csv", default=None)
    e.add_argument("--open-loop", action="store_true")

    s = sub.add_parser("scale-study")
    s.add_argument("--dataset", required=True)
    s.add_argument("--fractions", default="0.01,0.1,1.0")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config) if args.config else RunConfig()
    except (OSError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.cmd == "gen-terrain":
            return _cmd_gen_terrain(args)
        if args.cmd == "train-specialist":
            return _cmd_train_specialist(args, cfg)
        if args.cmd == "collect":
            return _cmd_collect(args, cfg)
        if args.cmd == "inspect":
            return _cmd_inspect(args)
        if args.cmd == "train-planner":
            return _cmd_train_planner(args, cfg)
        if args.cmd == "train-unified":
            return _cmd_train_unified(args, cfg)
        if args.cmd == "eval":
            return _cmd_eval(args, cfg)
        if args.cmd == "scale-study":
            return _cmd_scale_study(args, cfg)
        raise AssertionError(f"unhandled command {args.cmd}")
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
