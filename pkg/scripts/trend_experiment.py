"""Meta-train learners on synthetic tasks, then compare them against the
paired from-scratch baseline on the held-out shape family.

Example:
    python3 scripts/trend_experiment.py --out runs/trend --steps 2000 \
        --learners protonet:mini-unet r2d2:mini-fcn-res
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np
import torch

from metaseg.config import ExperimentConfig
from metaseg.experiment import run_eval, run_meta_train
from metaseg.report import emit_report


def fold_means(records):
    by = {}
    for r in records:
        by.setdefault(r.sparsity, []).append(r.mean_iou)
    return {k: float(np.mean(v)) for k, v in sorted(by.items())}


def main(argv=None):
    torch.set_num_threads(1)
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/trend")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--shots", type=int, default=1)
    ap.add_argument("--style", default="points")
    ap.add_argument("--grid", default="n_pix=1,radius=2; n_pix=5,radius=2; n_pix=10,radius=2")
    ap.add_argument("--holdout", default="ring")
    ap.add_argument("--width", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument(
        "--learners", nargs="+", default=["protonet:mini-unet", "r2d2:mini-fcn-res"],
        metavar="METHOD:ARCH",
    )
    args = ap.parse_args(argv)

    out = Path(args.out)
    common = dict(
        shots=args.shots, style=args.style, steps=args.steps,
        width=args.width, test_grid=args.grid, holdout=args.holdout,
        master_seed=args.seed, eval_seed=args.seed, meta_batch_tasks=2,
    )
    t0 = time.time()
    all_records = []
    scores = {}
    archs = []
    for pair in args.learners:
        method, _, arch = pair.partition(":")
        cfg = ExperimentConfig(method=method, arch=arch, out_dir=str(out / method), **common)
        ckpt = run_meta_train(cfg)
        print(f"[{time.time() - t0:7.1f}s] {method}/{arch} trained ({args.steps} steps)")
        records = run_eval(cfg, checkpoint=ckpt)
        all_records += records
        scores[f"{method}/{arch}"] = fold_means(records)
        if arch not in archs:
            archs.append(arch)
    for arch in archs:
        cfg = ExperimentConfig(
            method="baseline", arch=arch, out_dir=str(out / f"baseline-{arch}"), **common
        )
        records = run_eval(cfg)
        all_records += records
        scores[f"baseline/{arch}"] = fold_means(records)
        print(f"[{time.time() - t0:7.1f}s] baseline/{arch} evaluated")

    emit_report(all_records, out / "report")
    print(f"\nper-point fold-mean IoU (style={args.style}, {args.shots}-shot):")
    for name, by_point in scores.items():
        print(f"  {name}")
        for point, value in by_point.items():
            print(f"    {point:<28} {value:.3f}")
    print(f"\nreport written to {out / 'report'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
