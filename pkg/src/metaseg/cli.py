"""Command line interface.

Subcommands: sparsify, synth-data, meta-train, evaluate, report.
Exit codes: 0 success, 2 config error, 3 data error, 4 runtime error.
"""

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import cv2
import numpy as np
import torch

from .config import load_config, parse_grid_point
from .data import GeneratorSpec, save_dataset_dir, save_weak_png, synth_meta_dataset
from .errors import (
    ConfigError,
    EpisodeSamplingError,
    EvalError,
    FormatError,
    InfeasibleSparsityError,
    IngestionError,
    MetasegError,
    ParameterError,
)
from .experiment import parse_results_csv, run_eval, run_meta_train
from .report import emit_report
from .weak_labels import STYLES, sparsify

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


def _load_dense_png(path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise IngestionError(f"could not read {path}")
    values = set(np.unique(raw))
    if not values <= {0, 255}:
        raise FormatError(f"{path} is not a binary 0/255 mask (values {sorted(values)})")
    return (raw == 255).astype(np.uint8)


def cmd_sparsify(args):
    dense = _load_dense_png(args.dense)
    params = replace(parse_grid_point(args.style, args.params), seed=args.seed)
    save_weak_png(args.output, sparsify(dense, params))
    print(f"wrote {args.output}")


def cmd_synth_data(args):
    config = load_config(args.config, args.set)
    spec = GeneratorSpec(
        families=config.family_list(),
        holdout_family=config.holdout,
        tasks_per_family=config.tasks_per_family,
        samples_per_task=config.samples_per_task,
        image_size=config.image_size,
    )
    meta = synth_meta_dataset(spec, config.synth_seed)
    save_dataset_dir(args.output, meta.tasks)
    n = sum(len(t) for t in meta.tasks)
    print(f"wrote {len(meta.tasks)} tasks / {n} samples to {args.output}")


def cmd_meta_train(args):
    config = load_config(args.config, args.set)
    path = run_meta_train(config, resume_from=args.resume)
    print(f"final checkpoint: {path}")


def cmd_evaluate(args):
    config = load_config(args.config, args.set)
    records = run_eval(config, checkpoint=args.checkpoint)
    print(f"wrote {len(records)} records to {Path(config.out_dir) / 'results.csv'}")


def cmd_report(args):
    path = Path(args.results)
    if not path.is_file():
        raise IngestionError(f"results file {path} not found")
    records = parse_results_csv(path.read_text())
    for written in emit_report(records, args.output):
        print(f"wrote {written}")


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metaseg",
        description="Few-shot binary segmentation from sparse annotations",
    )
    sub = parser.add_subparsers(required=True)

    p = sub.add_parser("sparsify", help="turn a dense 0/255 mask PNG into a weak mask")
    p.add_argument("dense", help="dense binary mask PNG")
    p.add_argument("--style", required=True, choices=STYLES)
    p.add_argument("--params", required=True, help='e.g. "n_pix=5,radius=2"')
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_sparsify)

    p = sub.add_parser("synth-data", help="render a synthetic meta-dataset to disk")
    p.add_argument("config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("meta-train", help="episodic meta-training run")
    p.add_argument("config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("evaluate", help="paired 5-fold evaluation on the holdout task")
    p.add_argument("config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="tables and plots from a results CSV")
    p.add_argument("results")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    torch.set_num_threads(1)
    args = _parser().parse_args(argv)
    try:
        args.func(args)
    except (ConfigError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (
        IngestionError,
        FormatError,
        InfeasibleSparsityError,
        EpisodeSamplingError,
        EvalError,
        FileNotFoundError,
    ) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MetasegError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
