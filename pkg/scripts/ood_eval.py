"""One-step and multi-step prediction accuracy, in and out of distribution, causal vs dense.

    python scripts/ood_eval.py runs/graphs/chemical_full_constraint/seed_*
"""
import argparse
import json
from pathlib import Path

import numpy as np

from ecl.config import ExperimentConfig
from ecl.harness import run_phase


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("run_dirs", type=Path, nargs="+", help="run directories that finished Step 2")
    args = p.parse_args()
    results = []
    for d in args.run_dirs:
        if not (d / "metrics.json").exists():
            cfg = ExperimentConfig.load(d / "config.ini")
            run_phase(cfg, d, int(d.name.split("_")[-1]), "eval")
        results.append(json.loads((d / "metrics.json").read_text())["prediction"])
    horizon = len(results[0]["causal_id"])
    print("model,split," + ",".join(f"step{t + 1}" for t in range(horizon)))
    for key in ("causal_id", "causal_ood", "dense_id", "dense_ood"):
        acc = np.mean([r[key] for r in results], axis=0)
        model, split = key.split("_")
        print(f"{model},{split}," + ",".join(f"{a:.4f}" for a in acc))


if __name__ == "__main__":
    main()
