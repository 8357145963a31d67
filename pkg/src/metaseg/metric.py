"""Metric-based meta-learners: prototype networks and aligned variants.

Per-pixel embeddings from phi are pooled into one centroid per class over the
labeled support pixels; query pixels are classified by distance to the two
centroids. Meta-training updates phi only. The aligned variant (panet) also
builds prototypes from the densely labeled query and segments the support
with them, adding that reverse loss with weight lambda_par.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .backbones import SegModel, images_to_batch
from .data import query_arrays, support_arrays
from .errors import (
    ConfigError,
    MetaStepError,
    MissingClassError,
    NoLabelsError,
    ParameterError,
)
from .losses import sce_loss

METRIC_VARIANTS = ("protonet", "panet")
_DEFAULT_METRIC = {"protonet": "euclidean", "panet": "cosine"}


@dataclass(frozen=True)
class PrototypePair:
    mu0: torch.Tensor  # (C,)
    mu1: torch.Tensor  # (C,)


@dataclass
class MetricMetaConfig:
    variant: str = "protonet"
    metric: str | None = None  # euclidean | cosine; default depends on variant
    cosine_scale: float = 20.0
    lambda_par: float = 1.0
    outer_lr: float = 1e-3
    meta_batch_tasks: int = 4

    def __post_init__(self):
        if self.variant not in METRIC_VARIANTS:
            raise ConfigError(f"unknown metric variant {self.variant!r}")
        if self.metric is None:
            self.metric = _DEFAULT_METRIC[self.variant]
        if self.metric not in ("euclidean", "cosine"):
            raise ConfigError(f"unknown metric {self.metric!r}")
        if self.cosine_scale <= 0 or self.outer_lr <= 0:
            raise ConfigError("cosine_scale and outer_lr must be positive")
        if self.lambda_par < 0:
            raise ConfigError("lambda_par must be >= 0")


@dataclass
class MetricState:
    config: MetricMetaConfig
    model: SegModel
    optimizer: torch.optim.Optimizer
    step_count: int = 0
    last_meta_loss: float = float("nan")


def init_metric_state(config: MetricMetaConfig, model: SegModel) -> MetricState:
    optimizer = torch.optim.Adam(model.phi.parameters(), lr=config.outer_lr)
    return MetricState(config=config, model=model, optimizer=optimizer)


def compute_prototypes(embeddings: torch.Tensor, masks) -> PrototypePair:
    """Class centroids over labeled pixels of a (k,C,H,W) embedding batch."""
    w = torch.as_tensor(np.asarray(masks))
    if w.dim() == 2:
        w = w.unsqueeze(0)
    if embeddings.dim() == 3:
        embeddings = embeddings.unsqueeze(0)
    vecs = embeddings.permute(0, 2, 3, 1)  # (k,H,W,C)
    mus = []
    for c in (0, 1):
        sel = w == c
        if not bool(sel.any()):
            raise MissingClassError(f"class {c} has no labeled pixel")
        mus.append(vecs[sel].mean(dim=0))
    return PrototypePair(mu0=mus[0], mu1=mus[1])


def proto_logits(query_emb: torch.Tensor, protos: PrototypePair, metric, scale=20.0):
    """(q,2,H,W) class logits from distances to the two prototypes."""
    f = query_emb if query_emb.dim() == 4 else query_emb.unsqueeze(0)
    mus = torch.stack([protos.mu0, protos.mu1])  # (2,C)
    if metric == "euclidean":
        diff = f.unsqueeze(1) - mus[None, :, :, None, None]
        return -torch.linalg.vector_norm(diff, dim=2)
    if metric == "cosine":
        dots = torch.einsum("qchw,kc->qkhw", f, mus)
        fn = torch.linalg.vector_norm(f, dim=1, keepdim=True)  # (q,1,H,W)
        mn = torch.linalg.vector_norm(mus, dim=1)[None, :, None, None]
        denom = fn * mn
        cos = torch.where(denom > 0, dots / denom.clamp_min(1e-12), torch.zeros_like(dots))
        return scale * cos
    raise ParameterError(f"unknown metric {metric!r}")


def positive_probs(logits) -> torch.Tensor:
    """2-way softmax over the class axis; returns P(class 1) per pixel."""
    return torch.softmax(logits, dim=1)[:, 1]


def episode_metric_loss(state: MetricState, episode) -> torch.Tensor:
    cfg = state.config
    sup_imgs, sup_weak = support_arrays(episode)
    qry_imgs, qry_dense = query_arrays(episode)
    emb_sup = state.model.phi(images_to_batch(sup_imgs))
    emb_qry = state.model.phi(images_to_batch(qry_imgs))
    protos = compute_prototypes(emb_sup, sup_weak)
    loss = sce_loss(qry_dense, positive_probs(proto_logits(emb_qry, protos, cfg.metric, cfg.cosine_scale)))
    if cfg.variant == "panet" and cfg.lambda_par > 0:
        # aligned regularization: prototypes from the dense query labels
        # segment the support, scored on its labeled pixels only
        protos_q = compute_prototypes(emb_qry, qry_dense)
        probs_sup = positive_probs(proto_logits(emb_sup, protos_q, cfg.metric, cfg.cosine_scale))
        loss = loss + cfg.lambda_par * sce_loss(sup_weak, probs_sup)
    return loss


def metric_meta_step(state: MetricState, episodes) -> MetricState:
    terms = []
    for ep in episodes:
        try:
            terms.append(episode_metric_loss(state, ep))
        except (MissingClassError, NoLabelsError):
            continue
    if not terms:
        raise MetaStepError("every episode in the meta-batch failed")
    total = torch.stack(terms).sum()
    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step()
    state.step_count += 1
    state.last_meta_loss = float(total.detach())
    return state


def metric_deploy(state: MetricState, episode) -> np.ndarray:
    """Frozen phi; nearest-prototype argmax on the query; no thresholds."""
    cfg = state.config
    sup_imgs, sup_weak = support_arrays(episode)
    qry_imgs, _ = query_arrays(episode)
    with torch.no_grad():
        emb_sup = state.model.phi(images_to_batch(sup_imgs))
        emb_qry = state.model.phi(images_to_batch(qry_imgs))
        protos = compute_prototypes(emb_sup, sup_weak)
        logits = proto_logits(emb_qry, protos, cfg.metric, cfg.cosine_scale)
        return logits.argmax(dim=1).numpy().astype(np.uint8)
