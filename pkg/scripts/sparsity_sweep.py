"""Sweep a trained checkpoint over the full test sparsity grid of one style.

Example:
    python3 scripts/sparsity_sweep.py runs/trend/protonet/checkpoint_final.pt \
        --style scribbles --out runs/sweep
"""

import argparse
import sys
from pathlib import Path

import torch

from metaseg.config import ExperimentConfig
from metaseg.experiment import run_eval
from metaseg.methods import load_learner
from metaseg.report import emit_report


def main(argv=None):
    torch.set_num_threads(1)
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("checkpoint")
    ap.add_argument("--style", default="points")
    ap.add_argument("--shots", type=int, default=1)
    ap.add_argument("--holdout", default="ring")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args(argv)

    learner = load_learner(args.checkpoint)
    cfg = ExperimentConfig(
        method=learner.method,
        arch=learner.arch,
        width=learner.width,
        shots=args.shots,
        style=args.style,  # default grid: the full per-style test table
        holdout=args.holdout,
        eval_seed=args.seed,
        out_dir=str(Path(args.out) / learner.method),
    )
    records = run_eval(cfg, checkpoint=args.checkpoint)
    emit_report(records, Path(args.out) / "report")
    print(f"{len(records)} records; report in {Path(args.out) / 'report'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
