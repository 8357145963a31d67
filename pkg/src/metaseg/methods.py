"""Uniform interface over all meta-learners plus the from-scratch baseline.

Every method exposes the same three verbs: build, meta_step, deploy. The
baseline has no meta-training; its deploy trains a freshly initialized
backbone on the target support alone, so evaluation can pair it against any
checkpointed learner on identical episodes.
"""

from dataclasses import asdict, dataclass, fields

import torch

from .backbones import build_model, load_checkpoint, save_checkpoint
from .errors import ConfigError
from .fusion import (
    FusionConfig,
    FusionState,
    build_mask_encoder,
    fusion_deploy,
    fusion_meta_step,
    init_fusion_state,
)
from .gradient import (
    GradientMetaConfig,
    gradient_deploy,
    gradient_meta_step,
    init_gradient_state,
)
from .metric import (
    MetricMetaConfig,
    init_metric_state,
    metric_deploy,
    metric_meta_step,
)
from .seeding import derive_seed

GRADIENT = ("maml", "metasgd", "anil", "reptile")
METRIC = ("protonet", "panet")
FUSION = ("guidednet", "r2d2", "metaoptnet")
METHODS = GRADIENT + METRIC + FUSION + ("baseline",)


def family_of(method) -> str:
    if method in GRADIENT:
        return "gradient"
    if method in METRIC:
        return "metric"
    if method in FUSION:
        return "fusion"
    if method == "baseline":
        return "baseline"
    raise ConfigError(f"unknown method {method!r}")


@dataclass
class Learner:
    method: str
    arch: str
    width: int
    rng_seed: int
    state: object | None  # family state; None for the baseline
    baseline_steps: int = 100
    baseline_lr: float = 0.1

    @property
    def family(self):
        return family_of(self.method)

    @property
    def model(self):
        return None if self.state is None else self.state.model


def _kept(config_cls, hyper):
    # method/variant selectors are passed positionally, never via hyper
    names = {f.name for f in fields(config_cls)} - {"method", "variant"}
    return {k: v for k, v in hyper.items() if k in names and v is not None}


def build_learner(method, arch, width, rng_seed=0, hyper=None) -> Learner:
    """hyper: flat dict of optional overrides; irrelevant/None keys ignored."""
    hyper = dict(hyper or {})
    family = family_of(method)
    extra = {}
    if family == "baseline":
        for k in ("baseline_steps", "baseline_lr"):
            if hyper.get(k) is not None:
                extra[k] = hyper[k]
        return Learner(method, arch, width, rng_seed, state=None, **extra)
    if family == "gradient":
        cfg = GradientMetaConfig(method=method, **_kept(GradientMetaConfig, hyper))
        state = init_gradient_state(cfg, build_model(arch, width, rng_seed=rng_seed))
    elif family == "metric":
        cfg = MetricMetaConfig(variant=method, **_kept(MetricMetaConfig, hyper))
        state = init_metric_state(cfg, build_model(arch, width, rng_seed=rng_seed))
    else:
        cfg = FusionConfig(method=method, **_kept(FusionConfig, hyper))
        if method == "guidednet":
            model = build_model(
                arch, width, rng_seed=rng_seed, head_in_channels=2 * width
            )
            enc = build_mask_encoder(width, rng_seed)
            state = init_fusion_state(cfg, model, enc, row_seed=rng_seed)
        else:
            model = build_model(arch, width, rng_seed=rng_seed)
            state = init_fusion_state(cfg, model, row_seed=rng_seed)
    return Learner(method, arch, width, rng_seed, state=state)


def meta_step(learner: Learner, episodes) -> Learner:
    if learner.family == "gradient":
        gradient_meta_step(learner.state, episodes)
    elif learner.family == "metric":
        metric_meta_step(learner.state, episodes)
    elif learner.family == "fusion":
        fusion_meta_step(learner.state, episodes)
    else:
        raise ConfigError("the from-scratch baseline has no meta-training step")
    return learner


def deploy(learner: Learner, episode):
    """Predict query masks; the baseline adapts a fresh backbone first."""
    if learner.family == "baseline":
        fresh = build_model(
            learner.arch, learner.width, rng_seed=derive_seed(learner.rng_seed, "baseline")
        )
        cfg = GradientMetaConfig(method="maml", inner_lr=learner.baseline_lr)
        return gradient_deploy(
            init_gradient_state(cfg, fresh), episode, steps=learner.baseline_steps
        )
    if learner.family == "gradient":
        return gradient_deploy(learner.state, episode)
    if learner.family == "metric":
        return metric_deploy(learner.state, episode)
    return fusion_deploy(learner.state, episode)


def step_count(learner: Learner) -> int:
    return 0 if learner.state is None else learner.state.step_count


def last_meta_loss(learner: Learner) -> float:
    return float("nan") if learner.state is None else learner.state.last_meta_loss


# ---------------------------------------------------------------------------
# persistence


def save_learner(path, learner: Learner):
    if learner.family == "baseline":
        raise ConfigError("the baseline is never checkpointed")
    st = learner.state
    extra = {
        "method": learner.method,
        "rng_seed": learner.rng_seed,
        "config": asdict(st.config),
        "step_count": st.step_count,
        "last_meta_loss": st.last_meta_loss,
        "optimizer": None if st.optimizer is None else st.optimizer.state_dict(),
    }
    if getattr(st, "alphas", None) is not None:
        extra["alphas"] = {n: t.detach().clone() for n, t in st.alphas.items()}
    if isinstance(st, FusionState) and st.mask_encoder is not None:
        extra["mask_encoder"] = st.mask_encoder.state_dict()
    if isinstance(st, FusionState):
        extra["row_seed"] = st.row_seed
    save_checkpoint(path, st.model, extra=extra)


def load_learner(path) -> Learner:
    model, extra = load_checkpoint(path)
    method = extra["method"]
    learner = build_learner(
        method, model.arch, model.width, rng_seed=extra["rng_seed"], hyper=extra["config"]
    )
    st = learner.state
    st.model.load_state_dict(model.state_dict())
    if extra.get("alphas") is not None:
        with torch.no_grad():
            for n, t in extra["alphas"].items():
                st.alphas[n].copy_(t)
    if isinstance(st, FusionState) and st.mask_encoder is not None:
        st.mask_encoder.load_state_dict(extra["mask_encoder"])
    if isinstance(st, FusionState):
        st.row_seed = extra.get("row_seed", learner.rng_seed)
    if extra["optimizer"] is not None:
        st.optimizer.load_state_dict(extra["optimizer"])
    st.step_count = extra["step_count"]
    st.last_meta_loss = extra["last_meta_loss"]
    return learner
