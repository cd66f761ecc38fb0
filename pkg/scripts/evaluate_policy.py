"""Evaluate a trained checkpoint against the naive benchmark and write the
report, per-path terminal values and a policy surface.

    python3 scripts/evaluate_policy.py artifacts/paper_it10000_seed0.ckpt --paths 10000
"""
import argparse
import json
from pathlib import Path

import numpy as np

from cpmm_exec.dgm.network import Architecture, load_checkpoint
from cpmm_exec.dgm.train import paper_problem
from cpmm_exec.market import RX0, RY0, ModelParams
from cpmm_exec.pide import Scaling
from cpmm_exec.strategy import evaluate, policy_from_network, policy_surface

PUBLISHED_MEDIAN = 51793.32


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("--paths", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--out", default=None)
    args = ap.parse_args(argv)
    ckpt = Path(args.checkpoint)
    out = Path(args.out) if args.out else ckpt.with_suffix("")
    out.mkdir(parents=True, exist_ok=True)

    params, header = load_checkpoint(ckpt, expect=Architecture())
    problem = paper_problem()
    policy = policy_from_network(params, problem)
    rep = evaluate(policy, ModelParams(), Scaling.from_initial().agent_params(), args.paths, args.seed)
    rep.to_json(out / "report.json")
    rep.write_paths_csv(out / "terminal_z_y.csv")

    rows = policy_surface(
        policy_from_network(params, problem), np.linspace(0, 900, 10), np.linspace(-1.75, 1.75, 15), np.linspace(0, 40, 5), RX0, RY0
    )
    np.savetxt(out / "policy_surface.csv", rows, delimiter=",", header="t,spread,z_x,ell", comments="", fmt="%.17g")

    s = rep.summary()
    s["iteration"] = header.get("iteration")
    s["median_vs_published_pct"] = 100 * (rep.q50 / PUBLISHED_MEDIAN - 1)
    print(json.dumps(s, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
