"""Command-line entry point: ``ecl <subcommand> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ABLATIONS, BACKENDS, ExperimentConfig
from .harness import (OUTPUT_ROOT_VAR, cmd_pipeline, cmd_report, default_output_root, run_dir_for,
                      run_phase)

SUBCOMMANDS = ("generate-env", "collect", "step1", "step2", "step3", "eval", "report", "pipeline")


def build_parser():
    p = argparse.ArgumentParser(prog="ecl", description="Causal dynamics learning with empowerment-driven exploration.")
    p.add_argument("command", choices=SUBCOMMANDS)
    p.add_argument("--config", type=Path, help="INI experiment config (defaults are used when omitted)")
    p.add_argument("--env", choices=("chemical", "physical"), help="environment when no config is given")
    p.add_argument("--topology", choices=("chain", "collider", "full"), help="chemical topology")
    p.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    p.add_argument("--out", type=Path, help=f"output root (default: ${OUTPUT_ROOT_VAR} or ./runs)")
    p.add_argument("--backend", choices=BACKENDS)
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--lambda", dest="lam", type=float, help="curiosity weight in the shaped reward")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args):
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        if args.env or args.topology:
            cfg = cfg.replace(experiment={k: v for k, v in (("env", args.env), ("topology", args.topology)) if v})
    else:
        cfg = ExperimentConfig.for_env(args.env or "chemical", args.topology or "chain")
    exp = {}
    if args.backend:
        exp["backend"] = args.backend
    if args.ablation:
        exp["ablation"] = args.ablation
    if args.seed is not None:
        exp["seeds"] = (args.seed,)
    planner = {"lam": args.lam} if args.lam is not None else {}
    return cfg.replace(experiment=exp, planner=planner)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    cfg = resolve_config(args)
    out = args.out or default_output_root()
    if args.command == "pipeline":
        dirs = cmd_pipeline(cfg, out)
        print("\n".join(str(d) for d in dirs))
    elif args.command == "report":
        dirs = sorted(p for p in Path(out).glob("seed_*") if p.is_dir())
        for path in cmd_report(dirs, Path(out) / "report"):
            print(path)
    else:
        for seed in cfg.experiment.seeds:
            for path in run_phase(cfg, run_dir_for(out, seed), seed, args.command):
                print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
