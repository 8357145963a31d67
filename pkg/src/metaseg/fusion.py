"""Fusion meta-learners: guided late fusion and closed-form linear heads.

Guided nets encode the weak support mask with a separate encoder, average the
elementwise product with the support features into one guidance vector, tile
it onto the query features, and segment with a widened head; everything is
trained jointly and deployment is a single forward pass. The linear-head
methods (ridge regression solved in closed form, and an SVM dual solved by a
fixed number of projected-gradient steps) fit a per-pixel classifier on the
labeled support pixels and backpropagate the query loss through the solver
into phi.
"""

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .backbones import SegModel, build_model, images_to_batch
from .data import query_arrays, support_arrays
from .errors import (
    ConfigError,
    MetaStepError,
    MissingClassError,
    NoLabelsError,
    ShapeError,
)
from .losses import sce_loss
from .seeding import derive_seed
from .weak_labels import UNKNOWN

FUSION_METHODS = ("guidednet", "r2d2", "metaoptnet")
_DEFAULT_OUTER_LR = {"guidednet": 1e-3, "r2d2": 1e-2, "metaoptnet": 1e-2}


@dataclass
class FusionConfig:
    method: str = "guidednet"
    lam: float = 1.0  # ridge regularizer
    c_svm: float = 0.1
    svm_iters: int = 15
    row_cap: int = 2048
    outer_lr: float | None = None
    meta_batch_tasks: int = 4

    def __post_init__(self):
        if self.method not in FUSION_METHODS:
            raise ConfigError(f"unknown fusion method {self.method!r}")
        if self.outer_lr is None:
            self.outer_lr = _DEFAULT_OUTER_LR[self.method]
        if self.lam <= 0 or self.c_svm <= 0 or self.outer_lr <= 0:
            raise ConfigError("lam, c_svm and outer_lr must be positive")
        if self.svm_iters < 0 or self.row_cap < 1:
            raise ConfigError("svm_iters must be >= 0 and row_cap >= 1")


@dataclass
class FusionState:
    config: FusionConfig
    model: SegModel
    mask_encoder: nn.Module | None
    optimizer: torch.optim.Optimizer
    row_seed: int = 0
    step_count: int = 0
    last_meta_loss: float = float("nan")


def build_mask_encoder(width, rng_seed=0) -> nn.Module:
    """Encoder for one-hot weak masks; parameters disjoint from phi."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(rng_seed, "mask-encoder", width))
        return nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1),
            nn.BatchNorm2d(width, track_running_stats=False),
            nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1),
            nn.BatchNorm2d(width, track_running_stats=False),
            nn.ReLU(),
        )


def build_guidednet(arch, width, in_channels=1, rng_seed=0):
    """(SegModel with a 2C-input head, mask encoder) pair."""
    model = build_model(
        arch, width, in_channels=in_channels, rng_seed=rng_seed, head_in_channels=2 * width
    )
    return model, build_mask_encoder(width, rng_seed)


def init_fusion_state(config: FusionConfig, model: SegModel, mask_encoder=None, row_seed=0):
    if config.method == "guidednet":
        if mask_encoder is None:
            raise ConfigError("guidednet needs a mask encoder")
        params = (
            list(model.phi.parameters())
            + list(mask_encoder.parameters())
            + list(model.head.parameters())
        )
        optimizer = torch.optim.Adam(params, lr=config.outer_lr)
    else:
        optimizer = torch.optim.SGD(model.phi.parameters(), lr=config.outer_lr)
    return FusionState(
        config=config,
        model=model,
        mask_encoder=mask_encoder,
        optimizer=optimizer,
        row_seed=row_seed,
    )


# ---------------------------------------------------------------------------
# guided fusion


def onehot_weak(weak) -> torch.Tensor:
    """(k,H,W) trinary mask -> (k,3,H,W) float one-hot [neg, pos, unknown]."""
    w = torch.as_tensor(np.asarray(weak)).long()
    if w.dim() == 2:
        w = w.unsqueeze(0)
    return torch.stack([(w == 0), (w == 1), (w == UNKNOWN)], dim=1).float()


def fuse_support(f_sup: torch.Tensor, f_m: torch.Tensor) -> torch.Tensor:
    """Average the elementwise product over shots and space -> (C,) guidance."""
    if f_sup.shape != f_m.shape:
        raise ShapeError(f"support features {tuple(f_sup.shape)} vs mask features {tuple(f_m.shape)}")
    return (f_sup * f_m).mean(dim=(0, 2, 3))


def fuse_query(f_qry: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Tile the guidance vector and concatenate -> (q,2C,H,W)."""
    q, c, h, w = f_qry.shape
    if g.shape != (c,):
        raise ShapeError(f"guidance has shape {tuple(g.shape)}, expected ({c},)")
    tiled = g[None, :, None, None].expand(q, c, h, w)
    return torch.cat([f_qry, tiled], dim=1)


def _guidednet_logits(state: FusionState, episode):
    sup_imgs, sup_weak = support_arrays(episode)
    qry_imgs, _ = query_arrays(episode)
    if not np.isin(sup_weak, (0, 1)).any():
        raise MissingClassError("support mask carries no labels")
    f_sup = state.model.phi(images_to_batch(sup_imgs))
    f_m = state.mask_encoder(onehot_weak(sup_weak))
    g = fuse_support(f_sup, f_m)
    f_qry = state.model.phi(images_to_batch(qry_imgs))
    return state.model.head(fuse_query(f_qry, g)).squeeze(1)


def guidednet_meta_step(state: FusionState, episodes) -> FusionState:
    terms = []
    for ep in episodes:
        try:
            logits = _guidednet_logits(state, ep)
            _, qry_dense = query_arrays(ep)
            terms.append(sce_loss(qry_dense, torch.sigmoid(logits)))
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


def guidednet_deploy(state: FusionState, episode) -> np.ndarray:
    """Pure forward pass; guided nets adapt nothing at deployment."""
    with torch.no_grad():
        logits = _guidednet_logits(state, episode)
        return (torch.sigmoid(logits) >= 0.5).numpy().astype(np.uint8)


# ---------------------------------------------------------------------------
# linear heads on labeled support pixels


@dataclass
class LinearHeadSolution:
    weights: torch.Tensor  # (C, 2)
    bias: torch.Tensor  # (2,)
    lam: float
    alphas: torch.Tensor | None = None  # SVM dual variables
    objective_trace: tuple | None = None  # SVM dual objective per iteration


def support_pixel_rows(embeddings: torch.Tensor, weak, cap, rng_seed):
    """(X (N,C), Y (N,2)) from labeled support pixels, seeded cap on N."""
    w = torch.as_tensor(np.asarray(weak))
    if w.dim() == 2:
        w = w.unsqueeze(0)
    sel = w != UNKNOWN
    if not bool(sel.any()):
        raise NoLabelsError("support has no labeled pixels")
    x = embeddings.permute(0, 2, 3, 1)[sel]  # (N,C)
    labels = w[sel].long()
    if x.shape[0] > cap:
        rng = np.random.default_rng(derive_seed(rng_seed, "rows"))
        keep = torch.from_numpy(
            np.sort(rng.choice(x.shape[0], size=cap, replace=False))
        )
        x, labels = x[keep], labels[keep]
    y = torch.stack([(labels == 0), (labels == 1)], dim=1).to(x.dtype)
    return x, y


def r2d2_solve(x: torch.Tensor, y: torch.Tensor, lam, form="auto") -> LinearHeadSolution:
    """Ridge regression W = X^T (XX^T + lam I)^-1 Y == (X^T X + lam I)^-1 X^T Y.

    The N x N (woodbury) and C x C (primal) forms are algebraically equal;
    auto picks the smaller solve. Differentiable w.r.t. x.
    """
    lam = max(float(lam), 1e-6)
    n, c = x.shape
    if form == "auto":
        form = "woodbury" if n <= c else "primal"
    if form == "woodbury":
        gram = x @ x.T + lam * torch.eye(n, dtype=x.dtype)
        w = x.T @ torch.linalg.solve(gram, y)
    elif form == "primal":
        cov = x.T @ x + lam * torch.eye(c, dtype=x.dtype)
        w = torch.linalg.solve(cov, x.T @ y)
    else:
        raise ConfigError(f"unknown ridge form {form!r}")
    return LinearHeadSolution(weights=w, bias=torch.zeros(2, dtype=x.dtype), lam=lam)


def metaoptnet_solve(x: torch.Tensor, y: torch.Tensor, c_svm, iters) -> LinearHeadSolution:
    """Box-constrained SVM dual by projected gradient ascent, unrolled.

    maximize sum(alpha) - 0.5 * alpha^T Q alpha, Q = (y y^T) * (X X^T),
    0 <= alpha <= c_svm. Step size 1/lambda_max(Q) keeps every iteration
    nondecreasing. The biasless weight vector w = sum_i alpha_i y_i x_i is
    split into class columns (-w/2, +w/2).
    """
    signs = y[:, 1] * 2.0 - 1.0  # one-hot -> {-1,+1}
    if bool((signs > 0).all()) or bool((signs < 0).all()):
        raise MissingClassError("SVM needs both classes in the support rows")
    n = x.shape[0]
    q = (signs[:, None] * signs[None, :]) * (x @ x.T)
    # step size is a hyperparameter of the unrolled loop, not a graph node
    lam_max = torch.linalg.eigvalsh(q.detach()).max().clamp_min(1e-12)
    eta = 1.0 / lam_max
    alpha = torch.zeros(n, dtype=x.dtype)
    trace = [float(alpha.sum() - 0.5 * alpha @ (q.detach() @ alpha))]
    for _ in range(iters):
        alpha = (alpha + eta * (1.0 - q @ alpha)).clamp(0.0, float(c_svm))
        with torch.no_grad():
            trace.append(float(alpha.sum() - 0.5 * alpha @ (q @ alpha)))
    w = ((alpha * signs)[:, None] * x).sum(dim=0)  # (C,)
    weights = torch.stack([-w / 2.0, w / 2.0], dim=1)
    return LinearHeadSolution(
        weights=weights,
        bias=torch.zeros(2, dtype=x.dtype),
        lam=float(c_svm),
        alphas=alpha,
        objective_trace=tuple(trace),
    )


def apply_linear_head(embeddings: torch.Tensor, sol: LinearHeadSolution) -> torch.Tensor:
    """(q,C,H,W) features -> (q,2,H,W) class logits."""
    logits = torch.einsum("qchw,ck->qkhw", embeddings, sol.weights)
    return logits + sol.bias[None, :, None, None]


def _solve_for(state: FusionState, x, y) -> LinearHeadSolution:
    cfg = state.config
    if cfg.method == "r2d2":
        return r2d2_solve(x, y, cfg.lam)
    return metaoptnet_solve(x, y, cfg.c_svm, cfg.svm_iters)


def episode_linear_loss(state: FusionState, episode, row_seed) -> torch.Tensor:
    sup_imgs, sup_weak = support_arrays(episode)
    qry_imgs, qry_dense = query_arrays(episode)
    emb_sup = state.model.phi(images_to_batch(sup_imgs))
    emb_qry = state.model.phi(images_to_batch(qry_imgs))
    x, y = support_pixel_rows(emb_sup, sup_weak, state.config.row_cap, row_seed)
    sol = _solve_for(state, x, y)
    probs = torch.softmax(apply_linear_head(emb_qry, sol), dim=1)[:, 1]
    return sce_loss(qry_dense, probs)


def linearhead_meta_step(state: FusionState, episodes) -> FusionState:
    terms = []
    for i, ep in enumerate(episodes):
        try:
            seed = derive_seed(state.row_seed, state.step_count, i)
            terms.append(episode_linear_loss(state, ep, seed))
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


def linearhead_deploy(state: FusionState, episode) -> np.ndarray:
    """Solve on the target support, classify the query; phi stays frozen."""
    sup_imgs, sup_weak = support_arrays(episode)
    qry_imgs, _ = query_arrays(episode)
    with torch.no_grad():
        emb_sup = state.model.phi(images_to_batch(sup_imgs))
        emb_qry = state.model.phi(images_to_batch(qry_imgs))
        x, y = support_pixel_rows(
            emb_sup, sup_weak, state.config.row_cap, derive_seed(state.row_seed, "deploy")
        )
        sol = _solve_for(state, x, y)
        logits = apply_linear_head(emb_qry, sol)
        return logits.argmax(dim=1).numpy().astype(np.uint8)


def fusion_meta_step(state: FusionState, episodes) -> FusionState:
    if state.config.method == "guidednet":
        return guidednet_meta_step(state, episodes)
    return linearhead_meta_step(state, episodes)


def fusion_deploy(state: FusionState, episode) -> np.ndarray:
    if state.config.method == "guidednet":
        return guidednet_deploy(state, episode)
    return linearhead_deploy(state, episode)
