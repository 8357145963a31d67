"""Fusion layer algebra, closed-form head solvers, and episode behavior."""

import numpy as np
import pytest
import torch

from metaseg.backbones import build_model, clone_params, params_equal
from metaseg.data import Episode
from metaseg.errors import (
    ConfigError,
    MissingClassError,
    NoLabelsError,
    ShapeError,
)
from metaseg.fusion import (
    FusionConfig,
    apply_linear_head,
    build_guidednet,
    build_mask_encoder,
    fuse_query,
    fuse_support,
    fusion_deploy,
    fusion_meta_step,
    guidednet_deploy,
    init_fusion_state,
    linearhead_deploy,
    metaoptnet_solve,
    onehot_weak,
    r2d2_solve,
    support_pixel_rows,
)
from metaseg.gradient import GradientMetaConfig, gradient_deploy, init_gradient_state
from metaseg.losses import iou
from metaseg.weak_labels import UNKNOWN, SparsityParams, sparsify

torch.set_num_threads(1)


def ridge_oracle(x, y, lam):
    """Normal equations in float64 numpy, independent of the torch path."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    c = x.shape[1]
    return np.linalg.solve(x.T @ x + lam * np.eye(c), x.T @ y)


def toy_episode(seed=0, size=32, shots=1, queries=1):
    """Mean-separated disk task, weak points on the support."""
    rng = np.random.default_rng(seed)
    yy, xx = np.ogrid[:size, :size]
    pairs = []
    for _ in range(shots + queries):
        m = np.zeros((size, size), dtype=np.uint8)
        cy, cx = rng.integers(10, size - 10, 2)
        r = int(rng.integers(5, 9))
        m[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 1
        img = np.where(m == 1, 0.8, 0.2) + rng.normal(0, 0.05, (size, size))
        pairs.append((np.clip(img, 0, 1).astype(np.float32), m))
    support = []
    for img, m in pairs[:shots]:
        p = SparsityParams(style="points", n_pix=10, radius=2, seed=int(rng.integers(1 << 30)))
        support.append((img, sparsify(m, p)))
    return Episode(
        support=tuple(support),
        query=tuple(pairs[shots:]),
        shots=shots,
        sparsity=None,
        task_ref="toy",
        support_indices=tuple(range(shots)),
        query_indices=tuple(range(shots, shots + queries)),
    )


# ---------------------------------------------------------------------------
# fusion algebra


def test_fuse_support_all_ones_mask_features_is_spatial_mean():
    f = torch.randn(3, 4, 5, 5, dtype=torch.float64)
    g = fuse_support(f, torch.ones_like(f))
    assert torch.allclose(g, f.mean(dim=(0, 2, 3)), atol=1e-12)


def test_fuse_support_zero_mask_features_is_zero():
    f = torch.randn(2, 4, 6, 6)
    assert torch.equal(fuse_support(f, torch.zeros_like(f)), torch.zeros(4))


def test_fuse_support_two_shots_average_per_shot_guidance():
    f = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    m = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    g1 = fuse_support(f[:1], m[:1])
    g2 = fuse_support(f[1:], m[1:])
    assert torch.allclose(fuse_support(f, m), (g1 + g2) / 2, atol=1e-12)


def test_fuse_support_shot_permutation_invariance():
    f = torch.randn(4, 3, 5, 5, dtype=torch.float64)
    m = torch.randn(4, 3, 5, 5, dtype=torch.float64)
    perm = torch.tensor([2, 0, 3, 1])
    assert torch.allclose(fuse_support(f, m), fuse_support(f[perm], m[perm]), atol=1e-12)


def test_fuse_support_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        fuse_support(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 5, 5))


def test_fuse_query_layout():
    f = torch.randn(2, 3, 4, 4)
    g = torch.tensor([1.0, 2.0, 3.0])
    fused = fuse_query(f, g)
    assert fused.shape == (2, 6, 4, 4)
    assert torch.equal(fused[:, :3], f)
    # guidance is constant over queries and space
    assert torch.equal(fused[:, 3:], g[None, :, None, None].expand(2, 3, 4, 4))


def test_fuse_query_wrong_guidance_length():
    with pytest.raises(ShapeError):
        fuse_query(torch.zeros(1, 3, 4, 4), torch.zeros(5))


def test_onehot_weak_channels():
    w = np.array([[0, 1], [UNKNOWN, 1]], dtype=np.uint8)
    oh = onehot_weak(w)
    assert oh.shape == (1, 3, 2, 2)
    assert torch.equal(oh.sum(dim=1), torch.ones(1, 2, 2))
    assert oh[0, 0, 0, 0] == 1 and oh[0, 1, 0, 1] == 1 and oh[0, 2, 1, 0] == 1


# ---------------------------------------------------------------------------
# guided fusion episodes


def guided_state(seed=0, width=8):
    model, enc = build_guidednet("mini-efficient", width, rng_seed=seed)
    return init_fusion_state(FusionConfig(method="guidednet"), model, enc)


def test_mask_encoder_params_disjoint_from_phi():
    model, enc = build_guidednet("mini-unet", 8, rng_seed=3)
    phi_ids = {id(p) for p in model.phi.parameters()}
    assert phi_ids.isdisjoint({id(p) for p in enc.parameters()})


def test_guidednet_deploy_deterministic_and_frozen():
    state = guided_state(seed=1)
    ep = toy_episode(seed=5, queries=2)
    before = clone_params(dict(state.model.named_parameters()))
    first = guidednet_deploy(state, ep)
    second = guidednet_deploy(state, ep)
    assert first.shape == (2, 32, 32) and first.dtype == np.uint8
    assert np.array_equal(first, second)
    assert params_equal(before, dict(state.model.named_parameters()))


def test_guidednet_training_reduces_query_loss():
    state = guided_state(seed=2)
    episodes = [toy_episode(seed=s, queries=2) for s in (1, 2)]
    losses = []
    for _ in range(50):
        state = fusion_meta_step(state, episodes)
        losses.append(state.last_meta_loss)
    assert losses[-1] < 0.8 * losses[0]


def test_guidednet_all_unknown_support_rejected():
    state = guided_state(seed=4)
    ep = toy_episode(seed=7)
    img, weak = ep.support[0]
    blank = Episode(
        support=((img, np.full_like(weak, UNKNOWN)),),
        query=ep.query,
        shots=1,
        sparsity=None,
        task_ref="toy",
        support_indices=(0,),
        query_indices=(1,),
    )
    with pytest.raises(MissingClassError):
        guidednet_deploy(state, blank)


# ---------------------------------------------------------------------------
# support pixel rows


def test_support_pixel_rows_excludes_unknown():
    emb = torch.arange(2 * 3 * 2 * 2, dtype=torch.float64).reshape(2, 3, 2, 2)
    weak = np.array(
        [[[0, UNKNOWN], [1, UNKNOWN]], [[UNKNOWN, 1], [UNKNOWN, UNKNOWN]]],
        dtype=np.uint8,
    )
    x, y = support_pixel_rows(emb, weak, cap=100, rng_seed=0)
    assert x.shape == (3, 3) and y.shape == (3, 2)
    # row order follows shot-major raster order of the labeled pixels
    assert torch.equal(x[0], emb[0, :, 0, 0])
    assert torch.equal(x[1], emb[0, :, 1, 0])
    assert torch.equal(x[2], emb[1, :, 0, 1])
    assert torch.equal(y, torch.tensor([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]], dtype=torch.float64))


def test_support_pixel_rows_cap_is_seeded_subset():
    emb = torch.randn(1, 4, 10, 10, dtype=torch.float64)
    weak = np.zeros((1, 10, 10), dtype=np.uint8)
    weak[0, :5] = 1
    full_x, _ = support_pixel_rows(emb, weak, cap=1000, rng_seed=0)
    x1, y1 = support_pixel_rows(emb, weak, cap=16, rng_seed=0)
    x2, y2 = support_pixel_rows(emb, weak, cap=16, rng_seed=0)
    x3, _ = support_pixel_rows(emb, weak, cap=16, rng_seed=1)
    assert x1.shape == (16, 4)
    assert torch.equal(x1, x2) and torch.equal(y1, y2)
    assert not torch.equal(x1, x3)
    rows = {tuple(r.tolist()) for r in full_x}
    assert all(tuple(r.tolist()) in rows for r in x1)


def test_support_pixel_rows_no_labels():
    with pytest.raises(NoLabelsError):
        support_pixel_rows(
            torch.zeros(1, 2, 3, 3), np.full((1, 3, 3), UNKNOWN, dtype=np.uint8), 10, 0
        )


# ---------------------------------------------------------------------------
# ridge head


def test_ridge_single_basis_row_halves_the_label():
    x = torch.zeros(1, 6, dtype=torch.float64)
    x[0, 0] = 1.0
    y = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    for form in ("woodbury", "primal"):
        sol = r2d2_solve(x, y, lam=1.0, form=form)
        expected = torch.zeros(6, 2, dtype=torch.float64)
        expected[0, 1] = 0.5
        assert torch.allclose(sol.weights, expected, atol=1e-12)
        assert torch.equal(sol.bias, torch.zeros(2, dtype=torch.float64))


def test_ridge_matches_normal_equations_oracle():
    rng = np.random.default_rng(0)
    x = torch.from_numpy(rng.normal(size=(20, 8)))
    y = torch.from_numpy((rng.random((20, 1)) < 0.5).astype(np.float64))
    y = torch.cat([1 - y, y], dim=1)
    w_ref = ridge_oracle(x, y, lam=1.0)
    for form in ("woodbury", "primal", "auto"):
        sol = r2d2_solve(x, y, lam=1.0, form=form)
        assert np.allclose(sol.weights.numpy(), w_ref, atol=1e-5)


@pytest.mark.parametrize("n,c", [(3, 8), (8, 3), (64, 16), (16, 64), (32, 32)])
def test_ridge_forms_agree_across_shapes(n, c):
    rng = np.random.default_rng(n * 100 + c)
    x = torch.from_numpy(rng.normal(size=(n, c)))
    y = torch.from_numpy(rng.normal(size=(n, 2)))
    a = r2d2_solve(x, y, lam=0.7, form="woodbury").weights
    b = r2d2_solve(x, y, lam=0.7, form="primal").weights
    assert torch.allclose(a, b, atol=1e-5)


def test_ridge_huge_lambda_washes_out_weights():
    rng = np.random.default_rng(3)
    x = torch.from_numpy(rng.normal(size=(12, 4)))
    y = torch.zeros(12, 2, dtype=torch.float64)
    y[:6, 1] = 1
    y[6:, 0] = 1
    sol = r2d2_solve(x, y, lam=1e8)
    assert sol.weights.abs().max() < 1e-5
    emb = torch.from_numpy(rng.normal(size=(1, 4, 3, 3)))
    probs = torch.softmax(apply_linear_head(emb, sol), dim=1)
    assert torch.allclose(probs, torch.full_like(probs, 0.5), atol=1e-4)


def test_ridge_lambda_floor():
    x = torch.zeros(2, 3, dtype=torch.float64)  # singular without the floor
    y = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    sol = r2d2_solve(x, y, lam=0.0)
    assert sol.lam == 1e-6
    assert torch.isfinite(sol.weights).all()


def test_ridge_invalid_form():
    with pytest.raises(ConfigError):
        r2d2_solve(torch.zeros(1, 2), torch.zeros(1, 2), 1.0, form="qr")


def test_ridge_gradient_flows_to_embedding_rows():
    x = torch.randn(6, 4, dtype=torch.float64, requires_grad=True)
    y = torch.zeros(6, 2, dtype=torch.float64)
    y[:3, 1] = 1
    y[3:, 0] = 1
    sol = r2d2_solve(x, y, lam=1.0)
    sol.weights.pow(2).sum().backward()
    assert x.grad is not None
    assert torch.isfinite(x.grad).all() and x.grad.abs().sum() > 0


# ---------------------------------------------------------------------------
# SVM head


def test_svm_two_point_max_margin():
    # analytic optimum: w = (1, 0), alpha = (1/2, 1/2), dual objective 1/2
    x = torch.tensor([[1.0, 0.0], [-1.0, 0.0]], dtype=torch.float64)
    y = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
    sol = metaoptnet_solve(x, y, c_svm=1.0, iters=15)
    w = sol.weights[:, 1] - sol.weights[:, 0]
    assert torch.allclose(w, torch.tensor([1.0, 0.0], dtype=torch.float64), atol=1e-9)
    assert torch.allclose(sol.alphas, torch.full((2,), 0.5, dtype=torch.float64), atol=1e-9)
    assert sol.objective_trace[-1] == pytest.approx(0.5, abs=1e-9)
    logits = apply_linear_head(x.T.reshape(1, 2, 2, 1), sol)
    diff = (logits[:, 1] - logits[:, 0]).squeeze()
    assert diff[0] > 0 and diff[1] < 0


def test_svm_zero_iterations_gives_uniform_head():
    x = torch.randn(5, 3, dtype=torch.float64)
    y = torch.zeros(5, 2, dtype=torch.float64)
    y[:2, 1] = 1
    y[2:, 0] = 1
    sol = metaoptnet_solve(x, y, c_svm=0.1, iters=0)
    assert torch.equal(sol.weights, torch.zeros(3, 2, dtype=torch.float64))
    emb = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    probs = torch.softmax(apply_linear_head(emb, sol), dim=1)
    assert torch.equal(probs, torch.full_like(probs, 0.5))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_svm_dual_feasible_and_objective_nondecreasing(seed):
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.normal(size=(12, 4)))
    labels = rng.integers(0, 2, 12)
    labels[:2] = [0, 1]  # force both classes
    y = torch.from_numpy(np.stack([labels == 0, labels == 1], axis=1).astype(np.float64))
    sol = metaoptnet_solve(x, y, c_svm=0.1, iters=15)
    assert (sol.alphas >= -1e-12).all() and (sol.alphas <= 0.1 + 1e-12).all()
    trace = np.asarray(sol.objective_trace)
    assert trace.shape == (16,)
    assert (np.diff(trace) >= -1e-9).all()


def test_svm_single_class_rejected():
    x = torch.randn(4, 3, dtype=torch.float64)
    y = torch.zeros(4, 2, dtype=torch.float64)
    y[:, 1] = 1
    with pytest.raises(MissingClassError):
        metaoptnet_solve(x, y, c_svm=0.1, iters=5)


# ---------------------------------------------------------------------------
# linear-head episodes


def linear_state(method, seed=0, width=8, **kw):
    model = build_model("mini-efficient", width, rng_seed=seed)
    return init_fusion_state(FusionConfig(method=method, **kw), model)


def test_linearhead_meta_step_updates_phi_only():
    state = linear_state("r2d2", seed=1)
    phi_before = clone_params(dict(state.model.phi.named_parameters()))
    head_before = clone_params(dict(state.model.head.named_parameters()))
    fusion_meta_step(state, [toy_episode(seed=3)])
    assert not params_equal(phi_before, dict(state.model.phi.named_parameters()))
    assert params_equal(head_before, dict(state.model.head.named_parameters()))
    assert state.step_count == 1


def test_r2d2_training_reduces_query_loss():
    state = linear_state("r2d2", seed=2, row_cap=512)
    episodes = [toy_episode(seed=s, queries=2) for s in (1, 2)]
    losses = []
    for _ in range(50):
        state = fusion_meta_step(state, episodes)
        losses.append(state.last_meta_loss)
    assert losses[-1] < 0.8 * losses[0]


@pytest.mark.parametrize("method", ["r2d2", "metaoptnet"])
def test_linearhead_deploy_deterministic_and_frozen(method):
    state = linear_state(method, seed=3, row_cap=64)  # small cap exercises subsampling
    ep = toy_episode(seed=9, queries=2)
    before = clone_params(dict(state.model.named_parameters()))
    first = linearhead_deploy(state, ep)
    second = fusion_deploy(state, ep)
    assert first.shape == (2, 32, 32) and first.dtype == np.uint8
    assert np.array_equal(first, second)
    assert params_equal(before, dict(state.model.named_parameters()))


def test_r2d2_one_shot_beats_short_from_scratch_baseline():
    state = linear_state("r2d2", seed=4, row_cap=512)
    train_eps = [toy_episode(seed=s, queries=2) for s in (21, 22, 23, 24)]
    for step in range(30):
        fusion_meta_step(state, [train_eps[step % 4], train_eps[(step + 1) % 4]])
    eval_eps = [toy_episode(seed=s, queries=2) for s in (11, 12, 13)]

    def mean_iou(preds, ep):
        return np.mean(
            [iou(p, gt).mean_iou for p, (_, gt) in zip(preds, ep.query)]
        )

    r2d2_scores, scratch_scores = [], []
    for ep in eval_eps:
        r2d2_scores.append(mean_iou(linearhead_deploy(state, ep), ep))
        fresh = init_gradient_state(
            GradientMetaConfig(method="maml", inner_lr=0.1),
            build_model("mini-efficient", 8, rng_seed=4),
        )
        scratch_scores.append(mean_iou(gradient_deploy(fresh, ep, steps=20), ep))
    assert np.mean(r2d2_scores) > np.mean(scratch_scores)


def test_fusion_config_validation():
    assert FusionConfig(method="r2d2").outer_lr == 1e-2
    assert FusionConfig(method="guidednet").outer_lr == 1e-3
    assert FusionConfig(method="metaoptnet").svm_iters == 15
    assert FusionConfig(method="r2d2").row_cap == 2048
    with pytest.raises(ConfigError):
        FusionConfig(method="protomaml")
    with pytest.raises(ConfigError):
        FusionConfig(method="r2d2", lam=0.0)
    with pytest.raises(ConfigError):
        FusionConfig(method="metaoptnet", svm_iters=-1)
    with pytest.raises(ConfigError):
        init_fusion_state(FusionConfig(method="guidednet"), build_model("mini-unet", 8))
