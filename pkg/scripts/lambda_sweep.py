"""Curiosity weight sweep: Step 3 with several lambda values on one set of learned models.

    python scripts/lambda_sweep.py --lambdas 0 0.5 1 2 --seeds 0 1 --out runs/lambda
"""
import argparse
import logging
from pathlib import Path

import numpy as np

from ecl.config import ExperimentConfig
from ecl.harness import cmd_pipeline, cmd_step3
from ecl.metrics import read_csv_columns


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--lambdas", type=float, nargs="+", default=[0.0, 0.5, 1.0, 2.0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--topology", default="collider")
    p.add_argument("--episodes", type=int, default=300)
    p.add_argument("--out", type=Path, default=Path("runs/lambda"))
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = ExperimentConfig.for_env("chemical", args.topology, task={"episodes": args.episodes})
    dirs = cmd_pipeline(cfg, args.out, seeds=args.seeds, stop_after="step2")
    print("lambda,last50_task_reward_mean,stderr")
    for lam in args.lambdas:
        scores = []
        for seed, d in zip(args.seeds, dirs):
            out = d / f"lambda_{lam:g}"
            if not (out / "curves.csv").exists():
                cmd_step3(cfg.replace(planner={"lam": lam}), d, seed, out_dir=out)
            scores.append(np.mean(read_csv_columns(out / "curves.csv")["task_reward"][-50:]))
        se = np.std(scores, ddof=1) / np.sqrt(len(scores)) if len(scores) > 1 else 0.0
        print(f"{lam:g},{np.mean(scores):.3f},{se:.3f}")


if __name__ == "__main__":
    main()
