"""Gradient-based meta-learners: MAML, MetaSGD, ANIL, Reptile.

The inner loop is a functional SGD on a named parameter dict, so the same
code path serves real episodes and closed-form toy problems. MAML, MetaSGD
and ANIL keep the graph through the inner steps and differentiate the query
loss back to the initialization (and, for MetaSGD, to the per-parameter step
sizes). Reptile is first order: it moves the initialization toward the mean
of task-adapted parameter sets.
"""

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbones import SegModel, functional_forward, named_params
from .data import query_arrays, support_arrays
from .errors import (
    ConfigError,
    MetaStepError,
    NoLabelsError,
    ParameterError,
    ShapeError,
)
from .losses import sce_loss

GRADIENT_METHODS = ("maml", "metasgd", "anil", "reptile")
_DEFAULT_INNER_STEPS = {"maml": 2, "metasgd": 2, "anil": 10, "reptile": 5}


@dataclass
class GradientMetaConfig:
    method: str = "maml"
    inner_steps: int | None = None
    inner_lr: float = 0.1
    outer_lr: float = 1e-3
    reptile_eps: float = 0.5
    meta_batch_tasks: int = 4

    def __post_init__(self):
        if self.method not in GRADIENT_METHODS:
            raise ConfigError(f"unknown gradient method {self.method!r}")
        if self.inner_steps is None:
            self.inner_steps = _DEFAULT_INNER_STEPS[self.method]
        if self.inner_steps < 1:
            raise ConfigError("inner_steps must be >= 1")
        if self.inner_lr <= 0 or self.outer_lr <= 0 or self.reptile_eps <= 0:
            raise ConfigError("learning rates must be positive")
        if self.meta_batch_tasks < 1:
            raise ConfigError("meta_batch_tasks must be >= 1")


@dataclass
class GradientState:
    config: GradientMetaConfig
    model: SegModel
    optimizer: torch.optim.Optimizer | None
    alphas: OrderedDict | None = None
    step_count: int = 0
    last_meta_loss: float = float("nan")
    last_inner_params: list = field(default_factory=list)


def init_gradient_state(config: GradientMetaConfig, model: SegModel) -> GradientState:
    alphas = None
    groups = [{"params": list(model.parameters())}]
    if config.method == "metasgd":
        alphas = OrderedDict(
            (n, torch.full_like(p, config.inner_lr, requires_grad=True))
            for n, p in model.named_parameters()
        )
        groups.append({"params": list(alphas.values())})
    optimizer = None if config.method == "reptile" else torch.optim.Adam(groups, lr=config.outer_lr)
    return GradientState(config=config, model=model, optimizer=optimizer, alphas=alphas)


# ---------------------------------------------------------------------------
# functional inner loop


def scoped_names(params, scope) -> list:
    if scope == "all":
        return list(params)
    if scope == "head_only":
        return [n for n in params if n.startswith("head.")]
    raise ParameterError(f"unknown scope {scope!r}")


def inner_adapt_params(
    params,
    loss_fn,
    steps,
    lr=None,
    update_names=None,
    alphas=None,
    create_graph=False,
) -> OrderedDict:
    """`steps` SGD steps of loss_fn over the named subset of params.

    With create_graph the chain stays differentiable w.r.t. the inputs;
    without it every step detaches, which is the deployment/Reptile regime.
    Exactly one of lr / alphas supplies the step size(s).
    """
    cur = OrderedDict(params)
    upd = list(cur) if update_names is None else list(update_names)
    for _ in range(steps):
        loss = loss_fn(cur)
        grads = torch.autograd.grad(loss, [cur[n] for n in upd], create_graph=create_graph)
        for n, g in zip(upd, grads):
            step = (alphas[n] if alphas is not None else lr) * g
            new = cur[n] - step
            if not create_graph:
                new = new.detach().requires_grad_(True)
            cur[n] = new
    return cur


def episode_loss_fns(model: SegModel, episode):
    """(support loss closure, query loss closure) over named params."""
    sup_imgs, sup_masks = support_arrays(episode)
    qry_imgs, qry_masks = query_arrays(episode)

    def sup_fn(params):
        _, logits = functional_forward(model, params, sup_imgs)
        return sce_loss(sup_masks, torch.sigmoid(logits))

    def qry_fn(params):
        _, logits = functional_forward(model, params, qry_imgs)
        return sce_loss(qry_masks, torch.sigmoid(logits))

    return sup_fn, qry_fn


def joint_loss_fn(model: SegModel, episode):
    """Support+query labels in one batch (Reptile's inner objective)."""
    sup_imgs, sup_masks = support_arrays(episode)
    qry_imgs, qry_masks = query_arrays(episode)
    imgs = np.concatenate([sup_imgs, qry_imgs])
    masks = np.concatenate([sup_masks, qry_masks])

    def fn(params):
        _, logits = functional_forward(model, params, imgs)
        return sce_loss(masks, torch.sigmoid(logits))

    return fn


def meta_outer_loss(params, tasks, steps, lr=None, update_names=None, alphas=None):
    """Mean query loss after differentiable inner adaptation per task.

    tasks: iterable of (support_loss_fn, query_loss_fn) closures.
    """
    terms = []
    for sup_fn, qry_fn in tasks:
        theta = inner_adapt_params(
            params, sup_fn, steps, lr, update_names, alphas, create_graph=True
        )
        terms.append(qry_fn(theta))
    return torch.stack(terms).mean()


# ---------------------------------------------------------------------------
# meta steps

_EPISODE_ERRORS = (NoLabelsError, ShapeError)


def _second_order_step(state: GradientState, episodes, scope) -> GradientState:
    cfg = state.config
    params = named_params(state.model)
    update_names = scoped_names(params, scope)
    terms = []
    for ep in episodes:
        try:
            terms.append(
                meta_outer_loss(
                    params,
                    [episode_loss_fns(state.model, ep)],
                    steps=cfg.inner_steps,
                    lr=cfg.inner_lr,
                    update_names=update_names,
                    alphas=state.alphas,
                )
            )
        except _EPISODE_ERRORS:
            continue
    if not terms:
        raise MetaStepError("every episode in the meta-batch failed")
    meta_loss = torch.stack(terms).mean()
    state.optimizer.zero_grad()
    meta_loss.backward()
    state.optimizer.step()
    state.step_count += 1
    state.last_meta_loss = float(meta_loss.detach())
    return state


def maml_meta_step(state: GradientState, episodes) -> GradientState:
    return _second_order_step(state, episodes, scope="all")


def metasgd_meta_step(state: GradientState, episodes) -> GradientState:
    return _second_order_step(state, episodes, scope="all")


def anil_meta_step(state: GradientState, episodes) -> GradientState:
    # inner loop touches only the head; the outer step still updates phi
    return _second_order_step(state, episodes, scope="head_only")


def reptile_apply(model: SegModel, inner_params_list, eps):
    """theta <- theta + eps * (mean_i theta_i - theta), in place.

    Written as mean + (1-eps)*(theta - mean), which is exact at both
    endpoints: unchanged parameters stay bitwise unchanged, and eps=1 lands
    bitwise on the mean of the inner parameters.
    """
    with torch.no_grad():
        for name, p in model.named_parameters():
            mean = torch.stack([ip[name] for ip in inner_params_list]).mean(dim=0)
            p.copy_(mean + (1.0 - eps) * (p - mean))


def reptile_meta_step(state: GradientState, episodes) -> GradientState:
    cfg = state.config
    params = named_params(state.model)
    inner_list, losses = [], []
    for ep in episodes:
        try:
            fn = joint_loss_fn(state.model, ep)
            theta = inner_adapt_params(params, fn, cfg.inner_steps, cfg.inner_lr)
            with torch.no_grad():
                losses.append(float(fn(theta)))
            inner_list.append(OrderedDict((n, t.detach()) for n, t in theta.items()))
        except _EPISODE_ERRORS:
            continue
    if not inner_list:
        raise MetaStepError("every episode in the meta-batch failed")
    reptile_apply(state.model, inner_list, cfg.reptile_eps)
    state.step_count += 1
    state.last_meta_loss = float(np.mean(losses))
    state.last_inner_params = inner_list
    return state


_META_STEP_FNS = {
    "maml": maml_meta_step,
    "metasgd": metasgd_meta_step,
    "anil": anil_meta_step,
    "reptile": reptile_meta_step,
}


def gradient_meta_step(state: GradientState, episodes) -> GradientState:
    return _META_STEP_FNS[state.config.method](state, episodes)


# ---------------------------------------------------------------------------
# deployment


def predict_masks(model: SegModel, params, images) -> np.ndarray:
    with torch.no_grad():
        _, logits = functional_forward(model, params, images)
        return (torch.sigmoid(logits) >= 0.5).numpy().astype(np.uint8)


def gradient_deploy(state: GradientState, episode, steps=None) -> np.ndarray:
    """Adapt on the target support, predict its query; no meta side effects."""
    cfg = state.config
    params = OrderedDict(
        (n, p.detach().clone().requires_grad_(True))
        for n, p in state.model.named_parameters()
    )
    scope = "head_only" if cfg.method == "anil" else "all"
    sup_fn, _ = episode_loss_fns(state.model, episode)
    adapted = inner_adapt_params(
        params,
        sup_fn,
        steps=cfg.inner_steps if steps is None else steps,
        lr=cfg.inner_lr,
        update_names=scoped_names(params, scope),
        alphas=state.alphas,
    )
    qry_imgs, _ = query_arrays(episode)
    return predict_masks(state.model, adapted, qry_imgs)
