"""Command-line front end: ``spunlab <command> [options]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import bnn, doe, laydown, report
from .config import load_config
from .errors import EmptyResultError, InsufficientDataError, StepError, ValidationError

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class RuntimeFailure(RuntimeError):
    """A command finished but part of its work failed."""


def _paths(out):
    return {
        "plan": os.path.join(out, "plan.json"),
        "records": os.path.join(out, "records.jsonl"),
        "stats": os.path.join(out, "stats.csv"),
        "effects": os.path.join(out, "effects.csv"),
        "svg": os.path.join(out, "effects.svg"),
        "ae": os.path.join(out, "ae_table.csv"),
        "ae_report": os.path.join(out, "ae_report.md"),
        "web": os.path.join(out, "web.csv"),
        "laydown": os.path.join(out, "laydown"),
    }


def _model_path(out, output):
    return os.path.join(out, f"model_{output}.json")


def _meta(cfg):
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed}


def cmd_plan(cfg, args):
    d = cfg.doe
    plan = doe.build_plan(cfg.ranges, d.n1, d.n2, cfg.seed, d.air_speeds, d.pressures, d.levels, d.center)
    path = _paths(args.out)["plan"]
    doe.write_plan(path, plan, _meta(cfg))
    print(f"plan: {len(plan.stage1)} stage-1 + {len(plan.stage2)} stage-2 = {len(plan)} settings -> {path}")


def cmd_run(cfg, args):
    p = _paths(args.out)
    plan_path = args.plan or p["plan"]
    if not os.path.exists(plan_path):
        raise ValidationError("plan", f"plan file not found: {plan_path}")
    plan = doe.read_plan(plan_path)

    def progress(k, n, rec):
        if rec.ok:
            s = rec.stats
            msg = f"sigma1={s['sigma1']:.4g} sigma2={s['sigma2']:.4g} A={s['A']:.4g}"
        else:
            msg = f"FAILED {rec.error}"
        print(f"[{k}/{n}] {rec.run_id} {msg} ({rec.wall_time:.1f} s)", flush=True)

    records, n_new = doe.run_plan(
        plan, p["records"], cfg.simulation, cfg.geometry, cfg.turbulence, cfg.tail,
        belt_speed=cfg.process.belt_speed, spin_speed=cfg.process.spin_speed,
        parallelism=args.parallel, progress=progress,
        laydown_dir=p["laydown"] if args.dump_laydown else None,
    )
    doe.write_stats(p["stats"], records, _meta(cfg))
    failed = [r.run_id for r in records if not r.ok]
    print(f"run: {n_new} new, {len(records) - len(failed)} ok, {len(failed)} failed -> {p['stats']}")
    if failed:
        raise RuntimeFailure(f"{len(failed)} runs failed: {', '.join(failed[:10])}")


def _load_stats(path):
    if not os.path.exists(path):
        raise ValidationError("stats", f"stats file not found: {path}")
    _, rows, _ = laydown.read_stats_csv(path)
    if not rows:
        raise InsufficientDataError(f"no rows in {path}")
    X = np.array([[r[n] for n in doe.INPUT_NAMES] for r in rows], dtype=float)
    return rows, X


def _outputs(arg):
    return report.OUTPUTS if arg in (None, "all") else (arg,)


def cmd_train(cfg, args):
    rows, X_raw = _load_stats(args.stats or _paths(args.out)["stats"])
    ranges = {r.name: r for r in cfg.ranges}
    lower = np.array([ranges[n].lower for n in doe.INPUT_NAMES])
    upper = np.array([ranges[n].upper for n in doe.INPUT_NAMES])
    X = (X_raw - lower) / (upper - lower)
    cols = bnn.varying_columns(X_raw)
    names = tuple(doe.INPUT_NAMES[i] for i in cols)
    if len(cols) < len(doe.INPUT_NAMES):
        dropped = [n for n in doe.INPUT_NAMES if n not in names]
        print(f"train: inputs constant in the data, left out: {', '.join(dropped)}")
    for out in _outputs(args.output):
        y = np.array([r[out] for r in rows], dtype=float)
        data = bnn.Dataset(X[:, cols], y, names, out)
        model, rep, _, _ = bnn.train(data, cfg.bnn, cfg.seed, lower[cols], upper[cols])
        k = min(cfg.analysis.cv_folds, len(data))
        rep.cv_mse = bnn.cross_validate(data, cfg.bnn, k, cfg.seed)
        path = _model_path(args.out, out)
        bnn.save_model(path, model, rep)
        print(f"train {out}: train_mse={rep.train_mse:.4g} test_mse={rep.test_mse:.4g} "
              f"cv_mse={rep.cv_mse:.4g} n_train={rep.n_train} n_test={rep.n_test} -> {path}")


def _load_models(args):
    paths = args.models or [_model_path(args.out, o) for o in report.OUTPUTS
                            if os.path.exists(_model_path(args.out, o))]
    if not paths:
        raise ValidationError("models", f"no model files given or found in {args.out}")
    models = {}
    for path in paths:
        if not os.path.exists(path):
            raise ValidationError("models", f"model file not found: {path}")
        m, _ = bnn.load_model(path)
        models[m.output] = m
    return models


def _curves(cfg, models, grid=None):
    grid = grid or cfg.analysis.effect_grid
    curves = []
    for out in report.OUTPUTS:
        if out in models:
            curves += report.effect_curves(models[out], grid, cfg.analysis.baseline)
    return curves


def cmd_effects(cfg, args):
    p = _paths(args.out)
    models = _load_models(args)
    curves = _curves(cfg, models, args.grid)
    report.write_effects_csv(p["effects"], curves, _meta(cfg))
    for c in curves:
        if c.sign_changes:
            xs = ", ".join(f"{x:.4g}" for x in c.sign_changes)
            print(f"effects: sign change of d{c.output}/d{c.input} at {c.input} = {xs}")
    if args.svg:
        report.write_effects_svg(p["svg"], curves)
    print(f"effects: {len(curves)} curves -> {p['effects']}")


def cmd_rank(cfg, args):
    p = _paths(args.out)
    models = _load_models(args)
    rows, X_raw = _load_stats(args.stats or p["stats"])
    ys = {o: np.array([r[o] for r in rows], dtype=float) for o in report.OUTPUTS}
    ae, ranks = report.ae_table(models, X_raw, ys)
    report.write_ae_csv(p["ae"], ae, ranks, _meta(cfg))
    text = report.commentary(ae, ranks, _curves(cfg, models))
    with open(p["ae_report"], "w") as fh:
        fh.write(text)
    for o in report.OUTPUTS:
        order = sorted((n for n in ae if ranks[o][n] > 0), key=lambda n: ranks[o][n])
        print(f"rank {o}: " + " > ".join(order))
    print(f"rank: -> {p['ae']}, {p['ae_report']}")


def _stats_from_args(args):
    if args.sigma1 is not None:
        if args.sigma2 is None or args.A is None:
            raise ValidationError("web", "--sigma1, --sigma2 and --A go together")
        return laydown.LaydownStats(args.sigma1, args.sigma2, args.A, 0), "manual"
    rows, _ = _load_stats(args.stats or _paths(args.out)["stats"])
    if args.run_id is None:
        row = rows[0]
    else:
        match = [r for r in rows if r["run_id"] == args.run_id]
        if not match:
            raise ValidationError("run_id", f"no stats row {args.run_id!r}")
        row = match[0]
    return laydown.LaydownStats(row["sigma1"], row["sigma2"], row["A"], int(row["n_points"])), row["run_id"]


def cmd_web(cfg, args):
    st, source = _stats_from_args(args)
    web = laydown.generate_virtual_web(st, args.n_fibers, args.length, args.ds, cfg.seed,
                                       cfg.tail.arc_length_scale)
    path = _paths(args.out)["web"]
    meta = {"schema": "spunlab.web/1", "source": source, "sigma1": float(st.sigma1),
            "sigma2": float(st.sigma2), "A": float(st.A), "ds": args.ds, **_meta(cfg)}
    with open(path, "w", newline="") as fh:
        fh.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
        fh.write("fiber_id,s,x,y\n")
        for i, s, (x, y) in zip(web.fiber_id.tolist(), web.s.tolist(), web.xy.tolist()):
            fh.write(f"{i},{s!r},{x!r},{y!r}\n")
    print(f"web: {args.n_fibers} fibers x {web.s.size // args.n_fibers} points -> {path}")


def cmd_stats(cfg, args):
    rows = []
    for path in args.laydown:
        if not os.path.exists(path):
            raise ValidationError("laydown", f"file not found: {path}")
        st = laydown.characterize(laydown.read_laydown(path), cfg.tail)
        run_id = os.path.splitext(os.path.basename(path))[0]
        print(f"stats {run_id}: sigma1={st.sigma1:.6g} sigma2={st.sigma2:.6g} A={st.A:.6g} "
              f"n_points={st.n_points} tail_cut={st.tail_cut}")
        rows.append({"run_id": run_id, "v": np.nan, "p": np.nan, "E": np.nan, "rho": np.nan,
                     "titer": np.nan, "sigma1": st.sigma1, "sigma2": st.sigma2, "A": st.A,
                     "n_points": st.n_points})
    if args.write:
        path = os.path.join(args.out, "laydown_stats.csv")
        laydown.write_stats_csv(path, rows, _meta(cfg))
        print(f"stats: -> {path}")


def _global_flags(parser, suppress):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="run configuration JSON")
    parser.add_argument("--seed", type=int, default=d, help="override the configured seed")
    parser.add_argument("--out", default=d, help="output directory (default: out)")
    parser.add_argument("--parallel", type=int, default=d, help="worker processes for 'run'")


def build_parser():
    ap = argparse.ArgumentParser(prog="spunlab", description="Virtual spunbond laboratory")
    _global_flags(ap, suppress=False)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help)
        _global_flags(sp, suppress=True)
        sp.set_defaults(func=func)
        return sp

    add("plan", cmd_plan, "build the design of experiments")
    sp = add("run", cmd_run, "simulate every planned setting (resumable)")
    sp.add_argument("--plan", help="plan file (default: <out>/plan.json)")
    sp.add_argument("--dump-laydown", action="store_true", help="write <out>/laydown/<run_id>.csv")

    sp = add("train", cmd_train, "fit one blocked network per output")
    sp.add_argument("--stats", help="stats CSV (default: <out>/stats.csv)")
    sp.add_argument("--output", choices=report.OUTPUTS + ("all",), default="all")

    sp = add("effects", cmd_effects, "effect curves df/dx of the trained models")
    sp.add_argument("--models", nargs="+", help="model files (default: <out>/model_*.json)")
    sp.add_argument("--grid", type=int, help="grid points per input")
    sp.add_argument("--svg", action="store_true", help="also write <out>/effects.svg")

    sp = add("rank", cmd_rank, "average-elasticity table and commentary")
    sp.add_argument("--models", nargs="+")
    sp.add_argument("--stats")

    sp = add("web", cmd_web, "virtual web from one stats row")
    sp.add_argument("--stats")
    sp.add_argument("--run-id")
    sp.add_argument("--sigma1", type=float)
    sp.add_argument("--sigma2", type=float)
    sp.add_argument("--A", type=float)
    sp.add_argument("--n-fibers", type=int, default=1000)
    sp.add_argument("--length", type=float, default=1.0, help="fiber length [m]")
    sp.add_argument("--ds", type=float, default=1e-3, help="arc-length spacing [m]")

    sp = add("stats", cmd_stats, "characterize deposition record files")
    sp.add_argument("laydown", nargs="+", help="laydown CSV files")
    sp.add_argument("--write", action="store_true", help="write <out>/laydown_stats.csv")
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    args.out = args.out or "out"
    args.parallel = 1 if args.parallel is None else args.parallel
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.parallel < 1:
            raise ValidationError("parallel", "must be >= 1")
        os.makedirs(args.out, exist_ok=True)
        args.func(cfg, args)
    except (ValidationError, InsufficientDataError, EmptyResultError, FileNotFoundError,
            json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (RuntimeFailure, StepError, bnn.TrainingError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
