"""Compare one-step and two-step autoregressive dynamics training on graph recovery and accuracy.

    python scripts/prediction_steps.py --topology chain --seeds 0 --out runs/prediction_steps
"""
import argparse
import json
import logging
from pathlib import Path

from ecl.config import ExperimentConfig
from ecl.harness import cmd_pipeline, run_phase


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--topology", default="chain")
    p.add_argument("--out", type=Path, default=Path("runs/prediction_steps"))
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    print("prediction_steps,seed,step1_f1,step2_f1,causal_id_1step,causal_ood_1step")
    for steps in (1, 2):
        cfg = ExperimentConfig.for_env("chemical", args.topology, training={"prediction_steps": steps})
        for seed, d in zip(args.seeds, cmd_pipeline(cfg, args.out / f"steps_{steps}", seeds=args.seeds,
                                                    stop_after="step2")):
            if not (d / "metrics.json").exists():
                run_phase(cfg, d, seed, "eval")
            m = json.loads((d / "metrics.json").read_text())
            print(f"{steps},{seed},{m['graph_step1']['f1']:.3f},{m['graph']['f1']:.3f},"
                  f"{m['prediction']['causal_id'][0]:.4f},{m['prediction']['causal_ood'][0]:.4f}")


if __name__ == "__main__":
    main()
