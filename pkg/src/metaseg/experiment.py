"""Meta-training runs and paired 5-fold target evaluation.

Evaluation pairing: fold support indices come from the eval seed alone, and
every sparsity draw is seeded by (eval_seed, grid point, fold, shot). Two
runs that differ only in method/backbone therefore see byte-identical
support images and weak masks, so score differences isolate the learner.
"""

import csv
import io
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, parse_grid
from .data import (
    Episode,
    GeneratorSpec,
    MetaDataset,
    load_dataset_dir,
    sample_episode,
    save_weak_png,
    synth_meta_dataset,
)
from .errors import ConfigError, EvalError, FormatError
from .losses import iou
from .methods import (
    build_learner,
    deploy,
    last_meta_loss,
    load_learner,
    meta_step,
    save_learner,
    step_count,
)
from .preprocess import DEPLOY_HW, preprocess_deploy, resize_mask
from .seeding import derive_seed, rng_from
from .weak_labels import reseeded, sparsify, sparsity_test_grid

N_FOLDS = 5


def build_meta_dataset(config: ExperimentConfig) -> MetaDataset:
    if config.data_mode == "synth":
        spec = GeneratorSpec(
            families=config.family_list(),
            holdout_family=config.holdout,
            tasks_per_family=config.tasks_per_family,
            samples_per_task=config.samples_per_task,
            image_size=config.image_size,
        )
        return synth_meta_dataset(spec, config.synth_seed)
    tasks = load_dataset_dir(config.data_dir)
    ids = {t.dataset_id for t in tasks}
    holdout = {s.strip() for s in config.holdout.split(",") if s.strip()}
    missing = holdout - ids
    if missing:
        raise ConfigError(f"holdout tasks {sorted(missing)} not in {config.data_dir}")
    return MetaDataset(tasks=tasks, holdout=frozenset(holdout))


def resolve_target(meta: MetaDataset, config: ExperimentConfig):
    """The evaluation task; it must live in the holdout, never the train pool."""
    held = {t.dataset_id: t for t in meta.holdout_tasks()}
    if not held:
        raise ConfigError("meta-dataset has no holdout tasks")
    if config.target_task is None:
        return held[sorted(held)[0]]
    if config.target_task in held:
        return held[config.target_task]
    if any(t.dataset_id == config.target_task for t in meta.train_tasks()):
        raise ConfigError(
            f"target task {config.target_task!r} is in the meta-training pool"
        )
    raise ConfigError(f"target task {config.target_task!r} not found")


# ---------------------------------------------------------------------------
# meta-training


def run_meta_train(config: ExperimentConfig, resume_from=None) -> Path:
    if config.method == "baseline":
        raise ConfigError("the from-scratch baseline has no meta-training run")
    meta = build_meta_dataset(config)
    resolve_target(meta, config)  # hard-stops on holdout violations before training
    out = Path(config.out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        learner = load_learner(resume_from)
        if learner.method != config.method:
            raise ConfigError(
                f"checkpoint is {learner.method!r}, config wants {config.method!r}"
            )
    else:
        learner = build_learner(
            config.method,
            config.arch,
            config.width,
            rng_seed=config.master_seed,
            hyper=config.hyper(),
        )

    start = step_count(learner)
    curve_path = out / "loss_curve.csv"
    mode = "a" if (resume_from is not None and curve_path.exists()) else "w"
    with open(curve_path, mode) as curve:
        if mode == "w":
            curve.write("step,loss\n")
        for step in range(start, config.steps):
            episodes = [
                sample_episode(
                    meta,
                    config.shots,
                    config.style,
                    "train",
                    derive_seed(config.master_seed, "train-episode", step, i),
                )
                for i in range(config.meta_batch_tasks)
            ]
            meta_step(learner, episodes)
            curve.write(f"{step + 1},{last_meta_loss(learner):.6f}\n")
            done = step + 1
            if done % config.checkpoint_every == 0 and done < config.steps:
                save_learner(out / "checkpoints" / f"step{done:06d}.pt", learner)
    final = out / "checkpoint_final.pt"
    save_learner(final, learner)
    return final


# ---------------------------------------------------------------------------
# paired evaluation


def eval_fold_indices(n_samples, shots, eval_seed) -> list:
    if n_samples < N_FOLDS * shots:
        raise EvalError(
            f"target task has {n_samples} samples, needs >= {N_FOLDS * shots}"
        )
    perm = rng_from(eval_seed, "folds").permutation(n_samples)
    return [
        tuple(sorted(int(i) for i in perm[f * shots : (f + 1) * shots]))
        for f in range(N_FOLDS)
    ]


def eval_grid_points(config: ExperimentConfig) -> list:
    if config.test_grid is not None:
        return parse_grid(config.style, config.test_grid)
    return sparsity_test_grid(config.style)


def sparsity_label(params) -> str:
    parts = []
    for name in ("n_pix", "spacing", "proportion", "radius"):
        value = getattr(params, name)
        if value is not None:
            parts.append(f"{name}={value:g}" if isinstance(value, float) else f"{name}={value}")
    return ",".join(parts)


def eval_episode(task, support_idx, params, shots) -> Episode:
    """Deployment-size episode; sparsification runs at that size so the weak
    masks are exact pixels of what the learner sees."""
    chosen = set(support_idx)
    query_idx = tuple(i for i in range(len(task.samples)) if i not in chosen)
    support = []
    for j, idx in enumerate(support_idx):
        img, dense = task.samples[idx]
        dense_d = resize_mask(dense, DEPLOY_HW)
        support.append(
            (preprocess_deploy(img), sparsify(dense_d, reseeded(params, "sup", j)))
        )
    query = tuple(
        (preprocess_deploy(task.samples[i][0]), resize_mask(task.samples[i][1], DEPLOY_HW))
        for i in query_idx
    )
    return Episode(
        support=tuple(support),
        query=query,
        shots=shots,
        sparsity=params,
        task_ref=task.dataset_id,
        support_indices=tuple(support_idx),
        query_indices=query_idx,
    )


@dataclass(frozen=True)
class ResultRecord:
    method: str
    backbone: str
    style: str
    sparsity: str
    shots: int
    fold: int
    iou_pos: float
    iou_neg: float
    mean_iou: float
    wall_time: float


CSV_COLUMNS = (
    "method", "backbone", "style", "sparsity", "shots", "fold",
    "iou_pos", "iou_neg", "mean_iou", "wall_time",
)


def _round6(x) -> float:
    return float(f"{float(x):.6f}")


def records_to_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow(
            [r.method, r.backbone, r.style, r.sparsity, r.shots, r.fold]
            + [f"{v:.6f}" for v in (r.iou_pos, r.iou_neg, r.mean_iou, r.wall_time)]
        )
    return buf.getvalue()


def parse_results_csv(text) -> list:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise FormatError("results CSV header does not match the record schema")
    records = []
    for row in rows[1:]:
        if len(row) != len(CSV_COLUMNS):
            raise FormatError(f"results CSV row has {len(row)} fields")
        records.append(
            ResultRecord(
                method=row[0], backbone=row[1], style=row[2], sparsity=row[3],
                shots=int(row[4]), fold=int(row[5]),
                iou_pos=float(row[6]), iou_neg=float(row[7]),
                mean_iou=float(row[8]), wall_time=float(row[9]),
            )
        )
    return records


def _load_eval_learner(config: ExperimentConfig, checkpoint):
    # the baseline must stay blind to any checkpoint: fresh init, always
    if config.method == "baseline":
        return build_learner(
            "baseline",
            config.arch,
            config.width,
            rng_seed=config.master_seed,
            hyper=config.hyper(),
        )
    if checkpoint is None:
        raise ConfigError(f"method {config.method!r} needs --checkpoint")
    learner = load_learner(checkpoint)
    if learner.method != config.method:
        raise ConfigError(
            f"checkpoint is {learner.method!r}, config wants {config.method!r}"
        )
    return learner


def run_eval(config: ExperimentConfig, checkpoint=None) -> list:
    meta = build_meta_dataset(config)
    task = resolve_target(meta, config)
    learner = _load_eval_learner(config, checkpoint)
    folds = eval_fold_indices(len(task.samples), config.shots, config.eval_seed)
    points = eval_grid_points(config)
    out = Path(config.out_dir)
    mask_dir = out / "support_masks"
    mask_dir.mkdir(parents=True, exist_ok=True)

    records = []
    for gi, point in enumerate(points):
        label = sparsity_label(point)
        for f, sup_idx in enumerate(folds):
            seeded = replace(point, seed=derive_seed(config.eval_seed, "sparsify", gi, f))
            episode = eval_episode(task, sup_idx, seeded, config.shots)
            for j, (_, weak) in enumerate(episode.support):
                save_weak_png(mask_dir / f"point{gi}_fold{f}_shot{j}.png", weak)
            t0 = time.perf_counter()
            preds = deploy(learner, episode)
            wall = time.perf_counter() - t0
            scores = [iou(p, gt) for p, (_, gt) in zip(preds, episode.query)]
            records.append(
                ResultRecord(
                    method=config.method,
                    backbone=config.arch,
                    style=config.style,
                    sparsity=label,
                    shots=config.shots,
                    fold=f,
                    iou_pos=_round6(np.mean([s.iou_pos for s in scores])),
                    iou_neg=_round6(np.mean([s.iou_neg for s in scores])),
                    mean_iou=_round6(np.mean([s.mean_iou for s in scores])),
                    wall_time=_round6(wall),
                )
            )
    (out / "results.csv").write_text(records_to_csv(records))
    return records
