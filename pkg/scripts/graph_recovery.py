"""Graph-recovery table: F1 / precision / recall / ROC-AUC per environment and backend.

    python scripts/graph_recovery.py --seeds 0 1 2 3 --out runs/graphs
"""
import argparse
import json
import logging
from pathlib import Path

import numpy as np

from ecl.config import ExperimentConfig
from ecl.harness import cmd_pipeline

SETTINGS = [("chemical", "chain"), ("chemical", "collider"), ("chemical", "full"), ("physical", "chain")]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    p.add_argument("--backends", nargs="+", default=["constraint", "score"])
    p.add_argument("--out", type=Path, default=Path("runs/graphs"))
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    print("env,topology,backend,stage,accuracy,recall,precision,f1,roc_auc")
    for env, topology in SETTINGS:
        for backend in args.backends:
            cfg = ExperimentConfig.for_env(env, topology, experiment={"backend": backend})
            root = args.out / f"{env}_{topology}_{backend}"
            dirs = cmd_pipeline(cfg, root, seeds=args.seeds, stop_after="step2")
            for stage in ("before", "after"):
                rows = [json.loads((d / "metrics_step2.json").read_text())[stage] for d in dirs]
                means = [np.mean([r[k] for r in rows]) for k in ("accuracy", "recall", "precision", "f1", "roc_auc")]
                label = "step1" if stage == "before" else "step2"
                print(",".join([env, topology if env == "chemical" else "-", backend, label]
                               + [f"{m:.3f}" for m in means]))


if __name__ == "__main__":
    main()
