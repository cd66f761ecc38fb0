"""Command-line entry point: simulate, train, evaluate, fit, policy-surface.

Exit codes: 0 success, 2 usage or configuration error, 3 unreadable input
(CSV or checkpoint), 4 training divergence, 5 policy contract violation.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, derive_seed, load_config
from .dgm.network import CheckpointError, load_checkpoint
from .estimation import Target
from .dgm.train import TrainingDivergence, grid_max_error, toy_problem, train
from .market import CSVParseError, EventKind, PolicyContractError, simulate_batch, write_event_path_csv

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_DIVERGENCE, EXIT_CONTRACT = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


def _dump_json(obj, fname):
    with open(fname, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(args, cfg, sub) -> Path:
    out = Path(args.out) if args.out else Path(cfg.output_dir) / sub
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, cfg, purpose):
    return derive_seed(cfg.seed if args.seed is None else args.seed, purpose)


def _policy(args, cfg):
    from .strategy import policy_from_network

    if args.zero_network:
        params = None
    elif args.checkpoint:
        if not Path(args.checkpoint).exists():
            raise UsageError(f"checkpoint {args.checkpoint} not found")
        params, _ = load_checkpoint(args.checkpoint, expect=cfg.train.arch)
    else:
        raise UsageError("a --checkpoint (or --zero-network) is required")
    return policy_from_network(params, cfg.problem(), cfg.ell_max)


# ---------------------------------------------------------------------------


def cmd_simulate(args, cfg):
    if args.paths < 0:
        raise UsageError("--paths must be >= 0")
    out = _out_dir(args, cfg, "simulate")
    seed = _seed(args, cfg, "simulate")
    policy = _policy(args, cfg) if args.controlled else None
    summary = {"version": __version__, "paths": args.paths, "seed": seed, "controlled": bool(args.controlled), "T": cfg.T}
    if args.paths:
        res = simulate_batch(
            cfg.model, cfg.S0, cfg.r_x0, cfg.r_y0, args.paths, seed,
            agent=cfg.agent() if policy else None, policy=policy, T=cfg.T, record=True, running_cost=False,
        )
        counts = {k.name: 0 for k in EventKind if k != EventKind.INIT}
        for i, path in enumerate(res.paths):
            write_event_path_csv(path, out / f"path_{i:05d}.csv")
            for k in counts:
                counts[k] += path.count(EventKind[k])
        spreads = res.r_y / res.r_x - res.S
        summary.update(
            mean_exogenous_events=float(np.mean(res.n_exogenous)),
            mean_event_counts={k: v / args.paths for k, v in counts.items()},
            terminal_spread_mean=float(np.mean(spreads)),
            terminal_spread_std=float(np.std(spreads)),
            truncated=int(np.count_nonzero(res.truncated)),
        )
        if policy:
            summary["mean_terminal_z_y"] = float(np.mean(res.z_y))
    _dump_json(summary, out / "summary.json")
    print(json.dumps(summary, sort_keys=True))


def cmd_train(args, cfg):
    tc = cfg.train
    if args.iterations is not None:
        tc = replace(tc, iterations=args.iterations)
    if args.batch_size is not None:
        tc = replace(tc, batch_size=args.batch_size)
    if args.lr is not None:
        tc = replace(tc, lr_values=(args.lr,), lr_boundaries=())
    tc = replace(tc, seed=_seed(args, cfg, "train"))
    problem = toy_problem(cfg.problem(), args.toy_constant) if args.toy else cfg.problem()
    ckpt = Path(args.out or Path(cfg.output_dir) / "model.ckpt")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    hist = Path(args.history) if args.history else ckpt.with_name(ckpt.stem + "_loss.csv")

    def progress(it, value, lr):
        if not args.quiet:
            print(f"iteration {it}  loss {value:.6e}  lr {lr:.1e}", file=sys.stderr)

    result = train(tc, problem, checkpoint_path=ckpt, history_path=hist, progress=progress)
    info = {"checkpoint": str(ckpt), "history": str(hist), "iterations": tc.iterations, "seed": tc.seed}
    if result.history:
        info["final_loss"] = result.history[-1][1]
    if args.toy:
        info["toy_max_error"] = grid_max_error(result.params, args.toy_constant)
    print(json.dumps(info, sort_keys=True))


def cmd_evaluate(args, cfg):
    from .strategy import evaluate

    n = cfg.eval_paths if args.paths is None else args.paths
    if n < 1:
        raise UsageError("--paths must be >= 1")
    policy = _policy(args, cfg)
    out = _out_dir(args, cfg, "evaluate")
    rep = evaluate(policy, cfg.model, cfg.agent(), n, _seed(args, cfg, "evaluate"), cfg.S0, cfg.r_x0, cfg.r_y0, objective=args.objective)
    rep.to_json(out / "report.json")
    rep.write_paths_csv(out / "terminal_z_y.csv")
    print(f"naive benchmark: {rep.naive:.5f}")
    print(json.dumps(rep.summary(), sort_keys=True))


def cmd_fit(args, cfg):
    from . import estimation as est

    if args.events and (args.pool or args.spot):
        raise UsageError("give either --events or --pool/--spot, not both")
    if args.events:
        log = est.load_event_path_log(args.events)
    elif args.pool and args.spot:
        log = est.load_raw_log(args.pool, args.spot)
    else:
        raise UsageError("need --events, or both --pool and --spot")
    out = _out_dir(args, cfg, "fit")
    target = est.Target(args.target)
    delta, y = est.target_sample(log, target)
    fit = est.fit_target(log, target, args.order)
    fit.to_json(out / "fit.json")
    binned = est.bin_estimate((delta, y))
    grid = np.linspace(-1.75, 1.75, 141)
    est.write_curves_csv(out / "curve.csv", grid, {"fit": fit(grid)})
    est.write_curves_csv(out / "binned.csv", binned.centers, {"estimate": binned.values, "stderr": binned.stderr, "count": binned.counts})
    info = {"target": target.value, "n": fit.n, "score": fit.score, "coefficients": list(fit.basis.coefficients)}
    if args.bootstrap:
        boot = est.bootstrap_reliability(delta, y, fit, trials=args.bootstrap, fraction=args.fraction, seed=_seed(args, cfg, "fit"), grid=grid)
        lo, hi = boot.envelope
        est.write_curves_csv(out / "bootstrap.csv", grid, {"full": boot.full, "dev_min": lo, "dev_max": hi})
        info.update(bootstrap_trials=args.bootstrap, bootstrap_failed=boot.n_failed, max_abs_deviation=float(np.max(np.abs(np.r_[lo, hi]))))
    _dump_json(info, out / "summary.json")
    print(json.dumps(info, sort_keys=True))


def _parse_grid(text):
    try:
        parts = [int(v) for v in text.split(",")]
    except ValueError:
        parts = []
    if len(parts) != 3 or min(parts) < 1:
        raise UsageError("--grid takes three positive integers: times,spreads,inventories")
    return parts


def cmd_policy_surface(args, cfg):
    from .strategy import policy_surface

    nt, nd, nz = _parse_grid(args.grid)
    policy = _policy(args, cfg)
    rows = policy_surface(
        policy, np.linspace(0.0, cfg.T, nt), np.linspace(-args.spread, args.spread, nd),
        np.linspace(0.0, cfg.Q, nz), cfg.r_x0, cfg.r_y0,
    )
    out = Path(args.out or Path(cfg.output_dir) / "policy_surface.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write(f"# cpmm_exec policy-surface v1 T={cfg.T!r}\n")
        fh.write("t,spread,z_x,ell\n")
        for r in rows:
            fh.write(",".join(format(float(v), ".17g") for v in r) + "\n")
    print(f"wrote {out} ({len(rows)} rows)")


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="cpmm-exec", description="Optimal AMM execution: simulation, DGM training, evaluation, estimation.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, policy=False):
        sp.add_argument("--config", help="TOML config (default: shipped paper.toml)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output directory or file")
        if policy:
            sp.add_argument("--checkpoint", help="trained network")
            sp.add_argument("--zero-network", action="store_true", help="use v = 0 instead of a checkpoint")

    sp = sub.add_parser("simulate", help="simulate event paths")
    common(sp, policy=True)
    sp.add_argument("--paths", type=int, default=1)
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--controlled", action="store_true")
    g.add_argument("--uncontrolled", dest="controlled", action="store_false")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("train", help="train the value network")
    common(sp)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float, help="constant learning rate instead of the schedule")
    sp.add_argument("--history", help="loss-history CSV (default next to the checkpoint)")
    sp.add_argument("--toy", action="store_true", help="transport-only problem with a constant terminal value")
    sp.add_argument("--toy-constant", type=float, default=0.5)
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="Monte-Carlo evaluation against the naive benchmark")
    common(sp, policy=True)
    sp.add_argument("--paths", type=int)
    sp.add_argument("--objective", action="store_true", help="also integrate the running penalty (slow)")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("fit", help="estimate conditional curves from event logs")
    common(sp)
    sp.add_argument("--events", help="event-path CSV")
    sp.add_argument("--pool", help="pool_events.csv (time,side,price)")
    sp.add_argument("--spot", help="spot_quotes.csv (time,mid)")
    sp.add_argument("--target", default="P_BUY_POOL", choices=[t.value for t in Target])
    sp.add_argument("--order", type=int)
    sp.add_argument("--bootstrap", type=int, default=0, help="number of subsample refits")
    sp.add_argument("--fraction", type=float, default=0.8)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("policy-surface", help="feedback intensity on a (time, spread, inventory) grid")
    common(sp, policy=True)
    sp.add_argument("--grid", default="10,15,5", help="times,spreads,inventories")
    sp.add_argument("--spread", type=float, default=1.75, help="half-width of the spread axis")
    sp.set_defaults(func=cmd_policy_surface)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config)
        args.func(args, cfg)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CSVParseError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except TrainingDivergence as exc:
        print(f"error: training diverged at iteration {exc.iteration}: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except PolicyContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
