"""Command line: simulate, sweep, exact, identity-check, geometry-check."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from . import __version__, checks, exactchain
from .harness import ExperimentConfig, RunFailure, emit, run, task_streams, Task
from .system import dump_trace, run_trace


def _load(path, scale=None) -> ExperimentConfig:
    cfg = ExperimentConfig.load(path)
    if scale:
        h = dict(cfg.horizon)
        if h["rule"] == "fixed":
            h["slots"] = int(h["slots"] * scale)
        else:
            h["c"] = float(h["c"]) * scale
        cfg = replace(cfg, horizon=h)
    return cfg


def _progress(task, row):
    print(f"  {row.policy:28s} N={row.N} eps={row.epsilon:<5g} rep={row.replication:<3} "
          f"scaled_mean={row.scaled_mean:.4f}", file=sys.stderr)


def cmd_simulate(args, sweep=False) -> int:
    cfg = _load(args.config, args.horizon_scale)
    if sweep and len(cfg.epsilon_list) < 2:
        print("sweep needs at least two epsilon values", file=sys.stderr)
        return 2
    out = args.out or f"{cfg.name}.{args.format}"
    if args.trace:
        pol = cfg.policy_specs()[0]
        eps = cfg.epsilon_list[0]
        params = cfg.params(cfg.N[0], eps)
        _, tr = run_trace(params, pol, task_streams(cfg, Task(0, 0, 0, 0)), args.trace_slots, pol.threshold(eps))
        dump_trace(tr, args.trace)
    try:
        rows = run(cfg, workers=args.workers, progress=None if args.quiet else _progress)
    except RunFailure as fail:
        emit(fail.rows, args.format, out, cfg, status=f"failed: {fail}")
        print(f"error: {fail}", file=sys.stderr)
        return 1
    emit(rows, args.format, out, cfg)
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def cmd_exact(args) -> int:
    cfg = _load(args.config)
    B = args.buffer or cfg.buffer
    if not B:
        print("no buffer cap: pass --buffer or set 'buffer' in the config", file=sys.stderr)
        return 2
    reports = []
    for N in cfg.N:
        for eps in cfg.epsilon_list:
            params = cfg.params(N, eps)
            for pol in cfg.policy_specs():
                reports.append(exactchain.report(params, pol, B))
    doc = {"version": __version__, "config": cfg.to_dict(), "buffer": B, "results": reports}
    text = json.dumps(doc, indent=1)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        print(text)
    return 0


def cmd_identity(args) -> int:
    cfg = _load(args.config)
    B = args.buffer or cfg.buffer or 50
    results = checks.identity_check(cfg, B, args.tol)
    bad = 0
    for rep in results:
        flag = "ok " if rep["ok"] else "FAIL"
        res5 = "n/a" if rep["lemma5_residual"] is None else f"{rep['lemma5_residual']:+.2e}"
        print(f"{flag} {rep['policy']:28s} N={rep['N']} eps={rep['epsilon']:<5g} "
              f"E|U|-eps={rep['unused_l1'] - rep['epsilon']:+.2e} pairwise residual={res5} "
              f"boundary={rep['boundary_mass']:.1e}")
        bad += not rep["ok"]
    return 1 if bad else 0


def cmd_geometry(args) -> int:
    res = checks.geometry_check(args.trials, args.seed)
    print(f"trials={res['trials']} max_error={res['max_error']:.2e} grid_failures={len(res['grid_failures'])}")
    return 0 if res["ok"] else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pullbalance", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("simulate", "sweep"):
        s = sub.add_parser(name, help="run an experiment config" if name == "simulate" else "run an epsilon sweep")
        s.add_argument("--config", required=True, help="YAML file or bundled name (E1, E2, E3)")
        s.add_argument("--out")
        s.add_argument("--format", choices=("csv", "json"), default="csv")
        s.add_argument("--workers", type=int, default=1)
        s.add_argument("--horizon-scale", type=float, help="multiply every horizon (quick looks)")
        s.add_argument("--trace", help="also dump a per-slot trace of the first run to this CSV")
        s.add_argument("--trace-slots", type=int, default=1000)
        s.add_argument("--quiet", action="store_true")
    e = sub.add_parser("exact", help="exact truncated-chain functionals as JSON")
    e.add_argument("--config", required=True)
    e.add_argument("--buffer", type=int)
    e.add_argument("--out")
    i = sub.add_parser("identity-check", help="exact steady-state identities; nonzero exit on violation")
    i.add_argument("--config", required=True)
    i.add_argument("--buffer", type=int)
    i.add_argument("--tol", type=float, default=1e-6)
    g = sub.add_parser("geometry-check", help="region distances against a numeric nearest-point oracle")
    g.add_argument("--trials", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "simulate":
        return cmd_simulate(args)
    if args.command == "sweep":
        return cmd_simulate(args, sweep=True)
    if args.command == "exact":
        return cmd_exact(args)
    if args.command == "identity-check":
        return cmd_identity(args)
    return cmd_geometry(args)


if __name__ == "__main__":
    sys.exit(main())
