"""Segmentation tasks, episodic sampling, synthetic tasks, and disk IO.

A task is a named pool of (image, dense mask) pairs for one target structure.
Episodes draw disjoint support/query samples from one task, sparsify the
support masks, and never touch holdout tasks. The synthetic generator renders
shape families whose foreground and background share the same mean intensity
and differ only in texture scale, so per-task adaptation is actually required.
"""

import warnings
from dataclasses import dataclass, field

import cv2
import numpy as np
from pathlib import Path
from scipy.ndimage import binary_fill_holes, label
from scipy.ndimage import gaussian_filter

from .errors import (
    ConfigError,
    EpisodeSamplingError,
    FormatError,
    IngestionError,
    InfeasibleSparsityError,
    ParameterError,
)
from .preprocess import DEPLOY_HW, preprocess_deploy, preprocess_train, resize_mask
from .seeding import rng_from
from .weak_labels import (
    UNKNOWN,
    SparsityParams,
    reseeded,
    sample_sparsity_params,
    sparsify,
)

SHOT_CHOICES = (1, 5, 10)


@dataclass
class SegTask:
    dataset_id: str
    target_class: str
    samples: tuple  # ((image float32 [0,1] HxW, dense uint8 HxW), ...)

    def __len__(self):
        return len(self.samples)


@dataclass
class Episode:
    support: tuple  # ((image, weak uint8), ...)
    query: tuple  # ((image, dense uint8), ...)
    shots: int
    sparsity: SparsityParams
    task_ref: str
    support_indices: tuple
    query_indices: tuple

    def __post_init__(self):
        if self.shots not in SHOT_CHOICES:
            raise ParameterError(f"shots must be one of {SHOT_CHOICES}")
        if set(self.support_indices) & set(self.query_indices):
            raise ParameterError("support and query indices overlap")


@dataclass
class MetaDataset:
    tasks: list
    holdout: frozenset = field(default_factory=frozenset)

    def train_tasks(self):
        return [t for t in self.tasks if t.dataset_id not in self.holdout]

    def holdout_tasks(self):
        return [t for t in self.tasks if t.dataset_id in self.holdout]


# ---------------------------------------------------------------------------
# episode sampling


def sample_episode(
    meta: MetaDataset,
    shots: int,
    style: str,
    phase: str,
    rng_seed,
    query_size: int | None = None,
    sparsity: SparsityParams | None = None,
) -> Episode:
    """Draw one episode from the meta-training pool.

    phase selects preprocessing (train: CLAHE+augment+crop; test: CLAHE+resize)
    and, when sparsity is not pinned, the sparsity parameter distribution.
    Holdout tasks are never eligible. Infeasible sparsification retries a
    fresh draw, at most 16 times.
    """
    if phase not in ("train", "test"):
        raise ParameterError(f"unknown phase {phase!r}")
    if shots not in SHOT_CHOICES:
        raise ParameterError(f"shots must be one of {SHOT_CHOICES}")
    pool = [t for t in meta.train_tasks() if len(t) >= shots + 1]
    if not pool:
        raise EpisodeSamplingError(f"no task has more than {shots} samples")
    rng = rng_from(rng_seed, "episode")
    last = None
    for _ in range(16):
        task = pool[int(rng.integers(len(pool)))]
        n = len(task)
        q = query_size if query_size is not None else (shots if phase == "train" else n - shots)
        q = min(q, n - shots)
        if q < 1:
            raise ParameterError("query batch would be empty")
        perm = rng.permutation(n)
        sup_idx = [int(i) for i in perm[:shots]]
        qry_idx = [int(i) for i in perm[shots : shots + q]]
        params = (
            sparsity
            if sparsity is not None
            else sample_sparsity_params(style, phase, int(rng.integers(1 << 62)))
        )
        tf_seed = int(rng.integers(1 << 62))  # one transform for the whole episode

        def prep(i):
            img, dense = task.samples[i]
            if phase == "train":
                return preprocess_train(img, dense, tf_seed)
            return preprocess_deploy(img), resize_mask(dense, DEPLOY_HW)

        try:
            support = []
            for j, i in enumerate(sup_idx):
                img, dense = prep(i)
                support.append((img, sparsify(dense, reseeded(params, "sup", j))))
        except InfeasibleSparsityError as err:
            last = err
            continue
        query = tuple(prep(i) for i in qry_idx)
        return Episode(
            support=tuple(support),
            query=query,
            shots=shots,
            sparsity=params,
            task_ref=task.dataset_id,
            support_indices=tuple(sup_idx),
            query_indices=tuple(qry_idx),
        )
    raise EpisodeSamplingError(f"16 sparsification attempts failed; last: {last}")


def support_arrays(episode: Episode):
    """(images (k,H,W) float32, weak masks (k,H,W) uint8)."""
    imgs = np.stack([img for img, _ in episode.support])
    masks = np.stack([m for _, m in episode.support])
    return imgs, masks


def query_arrays(episode: Episode):
    """(images (q,H,W) float32, dense masks (q,H,W) uint8)."""
    imgs = np.stack([img for img, _ in episode.query])
    masks = np.stack([m for _, m in episode.query])
    return imgs, masks


# ---------------------------------------------------------------------------
# synthetic meta-dataset

FAMILIES = ("ellipse", "rectangle", "ring", "blob")


@dataclass(frozen=True)
class GeneratorSpec:
    families: tuple = FAMILIES
    holdout_family: str = "ring"
    tasks_per_family: int = 4
    samples_per_task: int = 12
    image_size: int = 144
    area_range: tuple = (0.06, 0.45)
    texture_amp: float = 0.18
    noise_sigma: float = 0.02
    fine_scale: tuple = (0.4, 1.2)
    coarse_scale: tuple = (3.0, 6.0)

    def __post_init__(self):
        if len(self.families) < 2:
            raise ConfigError("need at least 2 shape families")
        unknown = set(self.families) - set(FAMILIES)
        if unknown:
            raise ConfigError(f"unknown families {sorted(unknown)}")
        if self.holdout_family not in self.families:
            raise ConfigError(f"holdout {self.holdout_family!r} not in families")
        if self.image_size < 32:
            raise ConfigError("image_size must be at least 32")


def _rot_coords(size, rng):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.30, 0.70, 2) * size
    th = rng.uniform(0.0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dy * np.cos(th) + dx * np.sin(th)
    v = -dy * np.sin(th) + dx * np.cos(th)
    return u, v, yy - cy, xx - cx


def _draw_shape(family, size, rng):
    u, v, dy, dx = _rot_coords(size, rng)
    if family == "ellipse":
        a, b = rng.uniform(0.12, 0.35, 2) * size
        return ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.uint8)
    if family == "rectangle":
        hy, hx = rng.uniform(0.12, 0.32, 2) * size
        return ((np.abs(u) <= hy) & (np.abs(v) <= hx)).astype(np.uint8)
    if family == "ring":
        r = rng.uniform(0.16, 0.36) * size
        inner = rng.uniform(0.35, 0.70) * r
        d = np.sqrt(dy**2 + dx**2)
        return ((d <= r) & (d >= inner)).astype(np.uint8)
    if family == "blob":
        f = gaussian_filter(rng.standard_normal((size, size)), size / 8.0)
        m = f > np.quantile(f, 1.0 - rng.uniform(0.10, 0.35))
        lab, n = label(m)
        if n == 0:
            return np.zeros((size, size), dtype=np.uint8)
        biggest = 1 + np.argmax([(lab == i + 1).sum() for i in range(n)])
        return binary_fill_holes(lab == biggest).astype(np.uint8)
    raise ConfigError(f"unknown family {family!r}")


def render_mask(family, size, area_range, rng) -> np.ndarray:
    """Rejection-sample one dense mask with area fraction inside area_range."""
    lo, hi = area_range
    for _ in range(200):
        m = _draw_shape(family, size, rng)
        frac = float(m.mean())
        if lo <= frac <= hi and (m == 0).any():
            return m
    raise ConfigError(f"could not render {family} mask within area {area_range}")


def _texture_field(size, sigma, rng):
    f = gaussian_filter(rng.standard_normal((size, size)), sigma)
    f -= f.mean()
    return f / f.std()


def render_sample(family, regime, spec: GeneratorSpec, rng):
    """One (image, dense mask) pair; fg/bg means match, texture scale differs."""
    size = spec.image_size
    mask = render_mask(family, size, spec.area_range, rng)
    fg = _texture_field(size, regime[0], rng)
    bg = _texture_field(size, regime[1], rng)
    img = 0.5 + spec.texture_amp * np.where(mask == 1, fg, bg)
    img = img + rng.normal(0.0, spec.noise_sigma, (size, size))
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask


def synth_meta_dataset(spec: GeneratorSpec, rng_seed) -> MetaDataset:
    """Procedural tasks: one shape family and one texture regime per task."""
    tasks = []
    holdout = set()
    for family in spec.families:
        for t in range(spec.tasks_per_family):
            reg_rng = rng_from(rng_seed, "synth", family, t, "regime")
            fine = float(reg_rng.uniform(*spec.fine_scale))
            coarse = float(reg_rng.uniform(*spec.coarse_scale))
            regime = (fine, coarse) if reg_rng.integers(2) else (coarse, fine)
            samples = []
            for i in range(spec.samples_per_task):
                rng = rng_from(rng_seed, "synth", family, t, i)
                samples.append(render_sample(family, regime, spec, rng))
            task_id = f"{family}-{t:02d}"
            tasks.append(SegTask(task_id, family, tuple(samples)))
            if family == spec.holdout_family:
                holdout.add(task_id)
    return MetaDataset(tasks=tasks, holdout=frozenset(holdout))


# ---------------------------------------------------------------------------
# disk IO

_WEAK_TO_PNG = np.zeros(3, dtype=np.uint8)
_WEAK_TO_PNG[0], _WEAK_TO_PNG[1], _WEAK_TO_PNG[UNKNOWN] = 0, 255, 128


def encode_weak_png(weak) -> np.ndarray:
    w = np.asarray(weak, dtype=np.uint8)
    if not np.isin(w, (0, 1, UNKNOWN)).all():
        raise FormatError("weak mask values must be 0, 1 or UNKNOWN")
    return _WEAK_TO_PNG[w]


def decode_weak_png(png) -> np.ndarray:
    p = np.asarray(png, dtype=np.uint8)
    bad = set(np.unique(p)) - {0, 128, 255}
    if bad:
        raise FormatError(f"weak mask PNG has values {sorted(bad)}")
    out = np.full_like(p, UNKNOWN)
    out[p == 0] = 0
    out[p == 255] = 1
    return out


def save_weak_png(path, weak):
    if not cv2.imwrite(str(path), encode_weak_png(weak)):
        raise IngestionError(f"could not write {path}")


def load_weak_png(path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise IngestionError(f"could not read {path}")
    return decode_weak_png(raw)


def load_dataset_dir(root) -> list:
    """<root>/<dataset_id>/<class_tag>/imgNNN.png + imgNNN_mask.png."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"{root} is not a directory")
    tasks = []
    for ds_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for cls_dir in sorted(p for p in ds_dir.iterdir() if p.is_dir()):
            samples = []
            for img_path in sorted(cls_dir.glob("*.png")):
                if img_path.stem.endswith("_mask"):
                    continue
                mask_path = cls_dir / f"{img_path.stem}_mask.png"
                if not mask_path.exists():
                    raise IngestionError(f"missing mask for {img_path}")
                img = cv2.imread(str(img_path), cv2.IMREAD_GRAYSCALE)
                raw = cv2.imread(str(mask_path), cv2.IMREAD_GRAYSCALE)
                if img is None or raw is None:
                    raise IngestionError(f"unreadable PNG pair for {img_path}")
                if img.shape != raw.shape:
                    raise IngestionError(f"image/mask shape mismatch at {img_path}")
                vals = set(np.unique(raw))
                if not vals <= {0, 255}:
                    raise FormatError(f"mask {mask_path} has values outside 0/255")
                samples.append(
                    (img.astype(np.float32) / 255.0, (raw == 255).astype(np.uint8))
                )
            if samples:
                tasks.append(SegTask(ds_dir.name, cls_dir.name, tuple(samples)))
    if not tasks:
        warnings.warn(f"no image/mask pairs found under {root}")
    return tasks


def save_dataset_dir(root, tasks, class_tag_of=None):
    """Inverse of load_dataset_dir; images quantized to 8 bit."""
    root = Path(root)
    for task in tasks:
        cls = class_tag_of(task) if class_tag_of else task.target_class
        d = root / task.dataset_id / cls
        d.mkdir(parents=True, exist_ok=True)
        for i, (img, mask) in enumerate(task.samples):
            as8 = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
            ok = cv2.imwrite(str(d / f"img{i:03d}.png"), as8)
            ok &= cv2.imwrite(str(d / f"img{i:03d}_mask.png"), mask.astype(np.uint8) * 255)
            if not ok:
                raise IngestionError(f"could not write sample {i} of {task.dataset_id}")
