"""Prototype computation, distance logits, and the metric meta-learners."""

import math

import numpy as np
import pytest
import torch

from metaseg.backbones import build_model, clone_params, named_params, params_equal
from metaseg.data import Episode
from metaseg.errors import ConfigError, MissingClassError
from metaseg.metric import (
    MetricMetaConfig,
    PrototypePair,
    compute_prototypes,
    episode_metric_loss,
    init_metric_state,
    metric_deploy,
    metric_meta_step,
    positive_probs,
    proto_logits,
)
from metaseg.losses import iou
from metaseg.weak_labels import UNKNOWN

torch.set_num_threads(1)


def two_region_episode(size=64, r=14, fg=0.9, bg=0.1, weak_from_dense=True, seed=0):
    yy, xx = np.ogrid[:size, :size]
    dense = ((yy - size // 2) ** 2 + (xx - size // 2) ** 2 <= r * r).astype(np.uint8)
    img = np.where(dense == 1, fg, bg).astype(np.float32)
    weak = dense.copy() if weak_from_dense else dense
    return Episode(
        support=((img, weak),),
        query=((img, dense),),
        shots=1,
        sparsity=None,
        task_ref="fixture",
        support_indices=(0,),
        query_indices=(1,),
    )


# ---------------------------------------------------------------------------
# prototypes


def test_single_pixel_prototype():
    emb = torch.zeros(1, 3, 2, 2)
    emb[0, :, 0, 1] = torch.tensor([1.0, 2.0, 3.0])
    weak = np.full((1, 2, 2), UNKNOWN, dtype=np.uint8)
    weak[0, 0, 1] = 1
    weak[0, 1, 1] = 0
    protos = compute_prototypes(emb, weak)
    assert torch.equal(protos.mu1, torch.tensor([1.0, 2.0, 3.0]))
    assert torch.equal(protos.mu0, torch.zeros(3))


def test_two_pixel_prototype_is_mean():
    emb = torch.zeros(1, 2, 1, 3)
    u = torch.tensor([2.0, 0.0])
    v = torch.tensor([0.0, 4.0])
    emb[0, :, 0, 0] = u
    emb[0, :, 0, 1] = v
    weak = np.array([[[1, 1, 0]]], dtype=np.uint8)
    protos = compute_prototypes(emb, weak)
    assert torch.allclose(protos.mu1, (u + v) / 2)


def test_unknown_pixels_do_not_move_prototypes():
    rng = np.random.default_rng(0)
    emb = torch.from_numpy(rng.normal(size=(2, 4, 6, 6)).astype(np.float32))
    weak = rng.integers(0, 2, size=(2, 6, 6)).astype(np.uint8)
    base = compute_prototypes(emb, weak)
    blanked = weak.copy()
    blanked[0, :3] = UNKNOWN  # drop some labels entirely
    emb2 = emb.clone()
    emb2[0, :, :3] = 99.0  # and corrupt embeddings only where UNKNOWN
    masked = compute_prototypes(emb2, blanked)
    ref = compute_prototypes(emb, blanked)
    assert torch.allclose(masked.mu0, ref.mu0) and torch.allclose(masked.mu1, ref.mu1)
    assert base is not ref


def test_missing_class_raises():
    emb = torch.zeros(1, 2, 2, 2)
    weak = np.full((1, 2, 2), UNKNOWN, dtype=np.uint8)
    weak[0, 0, 0] = 1
    with pytest.raises(MissingClassError):
        compute_prototypes(emb, weak)


def test_prototype_permutation_invariance():
    rng = np.random.default_rng(1)
    emb = torch.from_numpy(rng.normal(size=(1, 3, 4, 4)).astype(np.float64))
    weak = rng.integers(0, 3, size=(1, 4, 4)).astype(np.uint8)
    weak[0, 0, 0], weak[0, 0, 1] = 0, 1
    base = compute_prototypes(emb, weak)
    perm = rng.permutation(16)
    emb_p = emb.reshape(1, 3, 16)[:, :, perm].reshape(1, 3, 4, 4)
    weak_p = weak.reshape(1, 16)[:, perm].reshape(1, 4, 4)
    shuffled = compute_prototypes(emb_p, weak_p)
    assert torch.allclose(base.mu0, shuffled.mu0, atol=1e-12)
    assert torch.allclose(base.mu1, shuffled.mu1, atol=1e-12)


# ---------------------------------------------------------------------------
# logits


def test_euclidean_logits_at_prototype():
    protos = PrototypePair(mu0=torch.tensor([3.0, 0.0]), mu1=torch.tensor([0.0, 4.0]))
    q = torch.zeros(1, 2, 1, 1)
    q[0, :, 0, 0] = protos.mu1
    logits = proto_logits(q, protos, "euclidean")
    assert logits[0, 1, 0, 0].item() == 0.0
    assert logits[0, 0, 0, 0].item() == -5.0
    assert logits.argmax(dim=1)[0, 0, 0].item() == 1


def test_equal_prototypes_tie():
    mu = torch.tensor([1.0, 1.0])
    protos = PrototypePair(mu0=mu, mu1=mu.clone())
    q = torch.randn(1, 2, 3, 3)
    probs = positive_probs(proto_logits(q, protos, "euclidean"))
    assert torch.allclose(probs, torch.full_like(probs, 0.5))


def test_cosine_toy_example():
    protos = PrototypePair(
        mu0=torch.tensor([0.0, 1.0], dtype=torch.float64),
        mu1=torch.tensor([1.0, 0.0], dtype=torch.float64),
    )
    q = torch.zeros(1, 2, 1, 1, dtype=torch.float64)
    q[0, :, 0, 0] = torch.tensor([1.0, 0.0], dtype=torch.float64)
    logits = proto_logits(q, protos, "cosine", scale=20.0)
    assert logits[0, 0, 0, 0].item() == 0.0
    assert logits[0, 1, 0, 0].item() == 20.0
    p1 = positive_probs(logits)[0, 0, 0].item()
    assert abs(p1 - 1.0 / (1.0 + math.exp(-20.0))) < 1e-15


def test_zero_norm_query_cosine_is_neutral():
    protos = PrototypePair(mu0=torch.tensor([1.0, 0.0]), mu1=torch.tensor([0.0, 1.0]))
    q = torch.zeros(1, 2, 2, 2)
    logits = proto_logits(q, protos, "cosine")
    assert torch.equal(logits, torch.zeros_like(logits))


def test_euclidean_argmax_matches_bruteforce():
    rng = np.random.default_rng(2)
    emb = torch.from_numpy(rng.normal(size=(2, 3, 4, 4)).astype(np.float64))
    protos = PrototypePair(
        mu0=torch.from_numpy(rng.normal(size=3)),
        mu1=torch.from_numpy(rng.normal(size=3)),
    )
    pred = proto_logits(emb, protos, "euclidean").argmax(dim=1).numpy()
    for q in range(2):
        for y in range(4):
            for x in range(4):
                f = emb[q, :, y, x].numpy()
                d0 = np.linalg.norm(f - protos.mu0.numpy())
                d1 = np.linalg.norm(f - protos.mu1.numpy())
                assert pred[q, y, x] == int(d1 < d0)


def test_cosine_scale_invariance_of_argmax():
    rng = np.random.default_rng(3)
    emb = torch.from_numpy(rng.normal(size=(1, 4, 5, 5)).astype(np.float32))
    protos = PrototypePair(
        mu0=torch.from_numpy(rng.normal(size=4).astype(np.float32)),
        mu1=torch.from_numpy(rng.normal(size=4).astype(np.float32)),
    )
    a = proto_logits(emb, protos, "cosine").argmax(dim=1)
    b = proto_logits(emb * 3.0, protos, "cosine").argmax(dim=1)
    assert torch.equal(a, b)


# ---------------------------------------------------------------------------
# meta step


def test_protonet_loss_is_plain_query_loss_sum():
    cfg = MetricMetaConfig(variant="protonet")
    state = init_metric_state(cfg, build_model("mini-efficient", width=4, rng_seed=4))
    eps = [two_region_episode(seed=0), two_region_episode(r=10, seed=1)]
    expected = torch.stack([episode_metric_loss(state, e) for e in eps]).sum().detach()
    metric_meta_step(state, eps)
    assert abs(state.last_meta_loss - float(expected)) < 1e-6


def test_panet_par_doubles_symmetric_fixture_loss():
    ep = two_region_episode()
    model_seed = 5
    base = MetricMetaConfig(variant="panet", lambda_par=0.0)
    on = MetricMetaConfig(variant="panet", lambda_par=1.0)
    s_base = init_metric_state(base, build_model("mini-efficient", width=4, rng_seed=model_seed))
    s_on = init_metric_state(on, build_model("mini-efficient", width=4, rng_seed=model_seed))
    l_base = float(episode_metric_loss(s_base, ep).detach())
    l_on = float(episode_metric_loss(s_on, ep).detach())
    # support == query with dense support labels, so the aligned term equals
    # the forward term and lambda_par=1 exactly doubles the loss
    assert abs(l_on - 2.0 * l_base) < 1e-6


def test_gradient_reaches_phi_only():
    cfg = MetricMetaConfig(variant="panet")
    state = init_metric_state(cfg, build_model("mini-efficient", width=4, rng_seed=6))
    metric_meta_step(state, [two_region_episode()])
    phi_norms = [p.grad.norm().item() for p in state.model.phi.parameters()]
    assert any(n > 0 for n in phi_norms)
    assert all(p.grad is None for p in state.model.head.parameters())


def test_panet_lambda_zero_equals_protonet_updates():
    eps = [two_region_episode(seed=2)]
    a = init_metric_state(
        MetricMetaConfig(variant="protonet"),
        build_model("mini-efficient", width=4, rng_seed=7),
    )
    b = init_metric_state(
        MetricMetaConfig(variant="panet", lambda_par=0.0, metric="euclidean"),
        build_model("mini-efficient", width=4, rng_seed=7),
    )
    metric_meta_step(a, eps)
    metric_meta_step(b, eps)
    assert params_equal(named_params(a.model), named_params(b.model))


def test_all_episodes_failing_raises():
    from metaseg.errors import MetaStepError

    cfg = MetricMetaConfig(variant="protonet")
    state = init_metric_state(cfg, build_model("mini-efficient", width=4, rng_seed=8))
    ep = two_region_episode()
    img, _ = ep.support[0]
    blank = np.full_like(ep.support[0][1], UNKNOWN)
    bad = Episode(
        support=((img, blank),),
        query=ep.query,
        shots=1,
        sparsity=None,
        task_ref="fixture",
        support_indices=(0,),
        query_indices=(1,),
    )
    with pytest.raises(MetaStepError):
        metric_meta_step(state, [bad])


# ---------------------------------------------------------------------------
# deployment


def test_deploy_separates_two_texture_fixture():
    cfg = MetricMetaConfig(variant="protonet")
    state = init_metric_state(cfg, build_model("mini-efficient", width=8, rng_seed=9))
    ep = two_region_episode(size=96, r=24)
    pred = metric_deploy(state, ep)[0]
    dense = ep.query[0][1]
    assert iou(pred, dense).mean_iou > 0.9


def test_deploy_no_parameter_updates_and_deterministic():
    cfg = MetricMetaConfig(variant="panet")
    state = init_metric_state(cfg, build_model("mini-efficient", width=4, rng_seed=10))
    before = clone_params(named_params(state.model))
    ep = two_region_episode(seed=3)
    a = metric_deploy(state, ep)
    b = metric_deploy(state, ep)
    assert np.array_equal(a, b)
    assert params_equal(named_params(state.model), before)


def test_variant_swap_changes_metric_not_prototypes():
    model = build_model("mini-efficient", width=4, rng_seed=11)
    ep = two_region_episode(seed=4)
    s_euc = init_metric_state(MetricMetaConfig(variant="protonet"), model)
    s_cos = init_metric_state(MetricMetaConfig(variant="panet"), model)
    assert s_euc.config.metric == "euclidean"
    assert s_cos.config.metric == "cosine"
    from metaseg.backbones import images_to_batch
    from metaseg.data import support_arrays

    imgs, weak = support_arrays(ep)
    with torch.no_grad():
        emb = model.phi(images_to_batch(imgs))
    protos = compute_prototypes(emb, weak)  # shared by both variants
    with torch.no_grad():
        le = proto_logits(emb, protos, "euclidean")
        lc = proto_logits(emb, protos, "cosine")
    assert not torch.allclose(le, lc)


def test_deploy_missing_class_is_hard_error():
    cfg = MetricMetaConfig(variant="protonet")
    state = init_metric_state(cfg, build_model("mini-efficient", width=4, rng_seed=12))
    ep = two_region_episode()
    img, weak = ep.support[0]
    pos_only = np.full_like(weak, UNKNOWN)
    pos_only[weak == 1] = 1
    bad = Episode(
        support=((img, pos_only),),
        query=ep.query,
        shots=1,
        sparsity=None,
        task_ref="fixture",
        support_indices=(0,),
        query_indices=(1,),
    )
    with pytest.raises(MissingClassError):
        metric_deploy(state, bad)


def test_config_validation():
    with pytest.raises(ConfigError):
        MetricMetaConfig(variant="matchingnet")
    with pytest.raises(ConfigError):
        MetricMetaConfig(variant="panet", lambda_par=-0.5)
    with pytest.raises(ConfigError):
        MetricMetaConfig(variant="protonet", metric="manhattan")
