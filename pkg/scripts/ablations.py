"""Ablations: full pipeline vs no curiosity shaping, simultaneous training and no Step 2.

    python scripts/ablations.py --seeds 0 1 --out runs/ablations
"""
import argparse
import json
import logging
from pathlib import Path

import numpy as np

from ecl.config import ABLATIONS, ExperimentConfig
from ecl.harness import cmd_pipeline


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--topology", default="collider")
    p.add_argument("--ablations", nargs="+", default=list(ABLATIONS), choices=ABLATIONS)
    p.add_argument("--out", type=Path, default=Path("runs/ablations"))
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    print("ablation,graph_f1,last50_task_reward,random_last50,success_rate")
    for ablation in args.ablations:
        cfg = ExperimentConfig.for_env("chemical", args.topology, experiment={"ablation": ablation})
        dirs = cmd_pipeline(cfg, args.out / ablation, seeds=args.seeds)
        metrics = [json.loads((d / "metrics.json").read_text()) for d in dirs]
        cols = [np.mean([m["graph"]["f1"] for m in metrics])]
        cols += [np.mean([m["task"][k] for m in metrics])
                 for k in ("last50_task_reward", "random_last50_task_reward", "success_rate")]
        print(ablation + "," + ",".join(f"{c:.3f}" for c in cols))


if __name__ == "__main__":
    main()
