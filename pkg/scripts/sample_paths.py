"""Simulate a few uncontrolled and zero-network controlled paths and print
per-kind event counts and the terminal spread.

    python3 scripts/sample_paths.py --paths 5 --out artifacts/sample_paths
"""
import argparse
from pathlib import Path

import numpy as np

from cpmm_exec.dgm.train import paper_problem
from cpmm_exec.market import RX0, RY0, S0, EventKind, ModelParams, simulate_batch, write_event_path_csv
from cpmm_exec.pide import Scaling
from cpmm_exec.strategy import policy_from_network


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="artifacts/sample_paths")
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = ModelParams()
    agent = Scaling.from_initial().agent_params()
    runs = {
        "uncontrolled": simulate_batch(model, S0, RX0, RY0, args.paths, args.seed, T=900.0, record=True),
        "zero_network": simulate_batch(
            model, S0, RX0, RY0, args.paths, args.seed, agent=agent,
            policy=policy_from_network(None, paper_problem()), record=True,
        ),
    }
    kinds = [k for k in EventKind if k != EventKind.INIT]
    print("run            path " + " ".join(f"{k.name:>9}" for k in kinds) + "   spread_T     z_y")
    for name, res in runs.items():
        for i, path in enumerate(res.paths):
            write_event_path_csv(path, out / f"{name}_{i:03d}.csv")
            spread = res.r_y[i] / res.r_x[i] - res.S[i]
            counts = " ".join(f"{path.count(k):9d}" for k in kinds)
            print(f"{name:14s} {i:4d} {counts} {spread:10.4f} {res.z_y[i]:9.2f}")
    print(f"wrote {2 * args.paths} CSV files to {out}")


if __name__ == "__main__":
    main()
