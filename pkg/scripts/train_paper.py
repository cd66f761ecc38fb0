"""Train the value network on the default market configuration.

    python3 scripts/train_paper.py --iterations 10000 --seed 0

Writes artifacts/paper_it{N}_seed{S}.ckpt and the matching loss-history CSV.
"""
import argparse
import time
from pathlib import Path

from cpmm_exec.dgm.train import TrainConfig, paper_problem, train


def artifact_paths(iterations, seed, root="artifacts"):
    stem = Path(root) / f"paper_it{iterations}_seed{seed}"
    return stem.with_suffix(".ckpt"), stem.with_name(stem.name + "_loss.csv")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="artifacts")
    args = ap.parse_args(argv)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    ckpt, hist = artifact_paths(args.iterations, args.seed, args.out)
    t0 = time.time()

    def progress(it, value, lr):
        if it % 1000 == 0:
            print(f"{it:6d}  loss={value:.6e}  lr={lr:.0e}  {time.time() - t0:7.0f}s", flush=True)

    cfg = TrainConfig(iterations=args.iterations, seed=args.seed, checkpoint_every=1000)
    train(cfg, paper_problem(), checkpoint_path=ckpt, history_path=hist, progress=progress)
    print(f"wrote {ckpt}")


if __name__ == "__main__":
    main()
