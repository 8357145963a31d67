"""Experiment configuration: a flat `key = value` text format plus overrides.

Schema
------
Every key below is optional in the file; omitted keys take the defaults.
Lines starting with `#` and blank lines are ignored. `none` clears a key.
CLI `--set key=value` pairs are applied after the file, last one wins.

  method            one of maml metasgd anil reptile protonet panet
                    guidednet r2d2 metaoptnet baseline
  arch              backbone name (mini-unet, mini-fcn-res, ...)
  width             base channel count
  shots             support size, one of 1 5 10
  style             annotation style: points grid scribbles skeleton
  steps             meta-training budget
  checkpoint_every  steps between periodic checkpoints
  master_seed       seeds meta-training (init + episode stream)
  eval_seed         seeds evaluation (folds + target sparsification)
  out_dir           run artifacts directory
  data_mode         synth | dir
  data_dir          dataset root for data_mode = dir
  families          comma list of synth shape families
  holdout           synth: held-out family; dir: comma list of task ids
  target_task       task id to evaluate on (default: first holdout task)
  tasks_per_family, samples_per_task, image_size, synth_seed
                    synthetic generator knobs
  test_grid         override of the per-style sparsity grid, e.g.
                    "n_pix=1,radius=2; n_pix=5,radius=2"
  baseline_steps    adaptation budget of the from-scratch baseline
  baseline_lr       its SGD learning rate
  inner_steps inner_lr outer_lr reptile_eps meta_batch_tasks cosine_scale
  lambda_par lam c_svm svm_iters row_cap
                    learner hyperparameters (None -> method defaults)
"""

from dataclasses import dataclass, fields
from pathlib import Path
from typing import get_args, get_origin, get_type_hints

from .backbones import ARCHS
from .data import FAMILIES, SHOT_CHOICES
from .errors import ConfigError, ParameterError
from .methods import METHODS
from .weak_labels import STYLES, SparsityParams


@dataclass
class ExperimentConfig:
    method: str = "protonet"
    arch: str = "mini-unet"
    width: int = 8
    shots: int = 1
    style: str = "points"
    steps: int = 2000
    checkpoint_every: int = 500
    master_seed: int = 0
    eval_seed: int = 0
    out_dir: str = "runs/exp"
    data_mode: str = "synth"
    data_dir: str | None = None
    families: str = "ellipse,rectangle,ring,blob"
    holdout: str = "ring"
    target_task: str | None = None
    tasks_per_family: int = 4
    samples_per_task: int = 12
    image_size: int = 144
    synth_seed: int = 0
    test_grid: str | None = None
    baseline_steps: int = 100
    baseline_lr: float = 0.1
    inner_steps: int | None = None
    inner_lr: float | None = None
    outer_lr: float | None = None
    reptile_eps: float | None = None
    meta_batch_tasks: int = 4
    cosine_scale: float | None = None
    lambda_par: float | None = None
    lam: float | None = None
    c_svm: float | None = None
    svm_iters: int | None = None
    row_cap: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.shots not in SHOT_CHOICES:
            raise ConfigError(f"shots must be one of {SHOT_CHOICES}")
        if self.style not in STYLES:
            raise ConfigError(f"unknown style {self.style!r}")
        if self.steps < 0 or self.checkpoint_every < 1:
            raise ConfigError("steps must be >= 0 and checkpoint_every >= 1")
        if self.data_mode not in ("synth", "dir"):
            raise ConfigError("data_mode must be synth or dir")
        if self.data_mode == "dir" and not self.data_dir:
            raise ConfigError("data_mode = dir needs data_dir")
        if self.data_mode == "synth":
            self.family_list()  # rejects unknown family names early

    def hyper(self) -> dict:
        keys = (
            "inner_steps", "inner_lr", "outer_lr", "reptile_eps",
            "meta_batch_tasks", "cosine_scale", "lambda_par", "lam",
            "c_svm", "svm_iters", "row_cap", "baseline_steps", "baseline_lr",
        )
        return {k: getattr(self, k) for k in keys}

    def family_list(self) -> tuple:
        out = tuple(s.strip() for s in self.families.split(",") if s.strip())
        unknown = set(out) - set(FAMILIES)
        if unknown:
            raise ConfigError(f"unknown families {sorted(unknown)}")
        return out


_HINTS = get_type_hints(ExperimentConfig)
_FIELDS = {f.name for f in fields(ExperimentConfig)}


def _coerce(key, raw):
    t = _HINTS[key]
    if get_origin(t) is not None:  # str | None style unions
        inner = [a for a in get_args(t) if a is not type(None)]
        if raw.strip().lower() in ("none", "null", ""):
            return None
        t = inner[0]
    try:
        if t is int:
            return int(raw)
        if t is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse {raw!r} as {t.__name__}")
    return raw.strip()


def parse_config_text(text) -> dict:
    items = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        items[key] = _coerce(key, raw.strip())
    return items


def apply_overrides(items: dict, overrides) -> dict:
    out = dict(items)
    for ov in overrides or ():
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} is not key=value")
        key, _, raw = ov.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"override: unknown key {key!r}")
        out[key] = _coerce(key, raw.strip())
    return out


def load_config(path, overrides=()) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    items = apply_overrides(parse_config_text(p.read_text()), overrides)
    return ExperimentConfig(**items)


def config_to_text(config: ExperimentConfig) -> str:
    lines = [f"{f.name} = {getattr(config, f.name)}" for f in fields(ExperimentConfig)]
    return "\n".join(lines) + "\n"


# sparsity grid points as text: "k=v,k=v; k=v,..." -- one point per ';'

_POINT_FIELDS = {"n_pix": int, "radius": int, "spacing": int, "proportion": float}


def parse_grid_point(style, text) -> SparsityParams:
    fields_out = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"grid point field {part!r} is not key=value")
        key, _, raw = part.partition("=")
        key = key.strip()
        if key not in _POINT_FIELDS:
            raise ConfigError(f"unknown sparsity field {key!r}")
        try:
            fields_out[key] = _POINT_FIELDS[key](raw.strip())
        except ValueError:
            raise ConfigError(f"sparsity field {key!r}: bad value {raw!r}")
    try:
        return SparsityParams(style=style, **fields_out)
    except ParameterError as exc:
        raise ConfigError(str(exc))


def parse_grid(style, text) -> list:
    points = [parse_grid_point(style, chunk) for chunk in text.split(";") if chunk.strip()]
    if not points:
        raise ConfigError("empty sparsity grid")
    return points
