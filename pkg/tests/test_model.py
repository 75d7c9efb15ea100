"""Classifier and angular-margin loss: closed-form oracles and gradient checks."""

import math

import numpy as np
import pytest

import afpa.tensor as T
from afpa import model
from afpa.errors import ContractError, ShapeError
from afpa.tensor import Tensor

TINY_CHANNELS = (4, 8, 8, 16, 16)


def tiny_params(n_classes=3, seed=0, embed_dim=8, margin=1.0, scale=30.0):
    return model.ClassifierParams.create(
        n_classes=n_classes, channels=TINY_CHANNELS, block_strides=(2, 1, 1, 1),
        embed_dim=embed_dim, margin=margin, scale=scale,
        rng=np.random.default_rng(seed))


def params_with_weights(w, margin=1.0, scale=30.0):
    p = tiny_params(n_classes=w.shape[0], embed_dim=w.shape[1], margin=margin, scale=scale)
    p.class_w = Tensor(np.asarray(w, dtype=np.float64), requires_grad=True)
    return p


# ---------------------------------------------------------------------------
# classifier forward


def test_embedding_shape_and_finite_on_zero_input():
    params = tiny_params()
    x = Tensor(np.zeros((2, 16, 24)))
    emb = model.classifier_forward(x, params)
    assert emb.shape == (8,)
    assert np.all(np.isfinite(emb.values))


def test_default_embedding_length_128():
    params = model.ClassifierParams.create(n_classes=4, rng=np.random.default_rng(1))
    x = Tensor(np.random.default_rng(2).standard_normal((2, 128, 312)))
    emb = model.classifier_forward(x, params)
    assert emb.shape == (128,)


def test_classifier_rejects_bad_shape():
    with pytest.raises(ShapeError):
        model.classifier_forward(Tensor(np.zeros((3, 8, 8))), tiny_params())


def test_gradcheck_classifier_stem():
    params = tiny_params(seed=3)
    x0 = np.random.default_rng(4).standard_normal((2, 12, 16))

    def loss(w):
        fresh = model.ClassifierParams(
            stem_w=w, stem_b=params.stem_b, stem_gain=params.stem_gain,
            stem_bias=params.stem_bias, blocks=params.blocks,
            head_w=params.head_w, head_b=params.head_b, class_w=params.class_w)
        return T.tensor_sum(model.classifier_forward(Tensor(x0), fresh))

    w = Tensor(params.stem_w.values.copy(), requires_grad=True)
    assert T.grad_check(loss, w, max_coords=24) < 1e-5


def test_gradcheck_classifier_input():
    params = tiny_params(seed=5)
    x0 = np.random.default_rng(6).standard_normal((2, 12, 16))
    x = Tensor(x0, requires_grad=True)
    err = T.grad_check(lambda t: T.tensor_sum(model.classifier_forward(t, params)), x,
                       max_coords=32)
    assert err < 1e-5


# ---------------------------------------------------------------------------
# arcface logits


def test_margin_free_reduction_is_plain_cosine():
    w = np.eye(3, 4)
    params = params_with_weights(w, margin=0.0, scale=1.0)
    e = np.array([1.0, 1.0, 0.0, 0.0])
    logits = model.arcface_logits(Tensor(e), params, target=1)
    e_hat = e / np.linalg.norm(e)
    np.testing.assert_allclose(logits.values, w @ e_hat, atol=1e-6)


def test_parallel_embedding_target_logit_closed_form():
    # theta = 0, margin 1.0, scale 30: target logit = 30 cos(1.0) = 16.2091.
    # The cosine clamp moves theta from 0 to sqrt(2e-7), shifting the logit
    # by 30 sin(1) sqrt(2e-7) ~ 0.011, so compare at that resolution.
    w = np.eye(2, 4)
    params = params_with_weights(w, margin=1.0, scale=30.0)
    logits = model.arcface_logits(Tensor(np.array([2.0, 0.0, 0.0, 0.0])), params, target=0)
    assert abs(logits.values[0] - 16.2091) < 0.02
    assert abs(logits.values[0] - 30.0 * math.cos(1.0)) < 0.02


def test_orthonormal_nontarget_logits_zero():
    w = np.eye(3, 5)
    params = params_with_weights(w, margin=1.0, scale=30.0)
    logits = model.arcface_logits(Tensor(np.array([1.0, 0, 0, 0, 0.0])), params, target=0)
    np.testing.assert_allclose(logits.values[1:], [0.0, 0.0], atol=1e-4)


def test_scale_invariance_of_logits():
    params = tiny_params(n_classes=4, seed=7)
    rng = np.random.default_rng(8)
    e = rng.standard_normal(8)
    a = model.arcface_logits(Tensor(e), params, target=None).values
    for c in (0.5, 3.0, 250.0):
        b = model.arcface_logits(Tensor(c * e), params, target=None).values
        np.testing.assert_allclose(a, b, atol=1e-9)


def test_margin_penalizes_target_logit():
    params = tiny_params(n_classes=3, seed=9)
    e = np.random.default_rng(10).standard_normal(8)
    plain = model.arcface_logits(Tensor(e), params, target=None).values
    margined = model.arcface_logits(Tensor(e), params, target=1).values
    assert margined[1] < plain[1]
    np.testing.assert_allclose(np.delete(margined, 1), np.delete(plain, 1), atol=1e-12)


def test_wraparound_fallback_keeps_logit_monotone():
    # sweep theta across the wrap-around point; margined logit must decrease
    w = np.eye(2, 4)
    params = params_with_weights(w, margin=1.0, scale=30.0)
    thetas = np.linspace(0.05, math.pi - 0.05, 60)
    values = []
    for theta in thetas:
        e = np.array([math.cos(theta), math.sin(theta), 0.0, 0.0])
        values.append(model.arcface_logits(Tensor(e), params, target=0).values[0])
    diffs = np.diff(values)
    assert np.all(diffs < 1e-9)


def test_target_out_of_range():
    with pytest.raises(ContractError):
        model.arcface_logits(Tensor(np.zeros(8)), tiny_params(), target=7)


def test_normalized_rows_unit_norm():
    params = tiny_params(n_classes=5, seed=11)
    w_hat = T.l2_normalize_rows(params.class_w).values
    np.testing.assert_allclose(np.linalg.norm(w_hat, axis=1), np.ones(5), atol=1e-9)


# ---------------------------------------------------------------------------
# loss and anomaly score


def test_id_loss_uniform_logits():
    loss = model.id_loss(Tensor(np.zeros(5)), 2)
    assert abs(loss.item() - math.log(5)) < 1e-12


def test_id_loss_vanishes_as_target_dominates():
    previous = None
    for margin_logit in (2.0, 5.0, 10.0, 50.0):
        z = np.zeros(4)
        z[1] = margin_logit
        loss = model.id_loss(Tensor(z), 1).item()
        if previous is not None:
            assert loss < previous
        previous = loss
    assert previous < 1e-10


def test_id_loss_matches_neg_log_softmax_oracle():
    rng = np.random.default_rng(12)
    for _ in range(5):
        z = rng.standard_normal(6) * 4
        t = int(rng.integers(0, 6))
        want = -math.log(np.exp(z[t]) / np.sum(np.exp(z)))
        assert abs(model.id_loss(Tensor(z), t).item() - want) < 1e-12


def test_gradcheck_arcface_composite():
    params = tiny_params(n_classes=3, seed=13)
    e = Tensor(np.random.default_rng(14).standard_normal(8), requires_grad=True)
    err = T.grad_check(lambda t: model.id_loss(model.arcface_logits(t, params, target=1), 1), e)
    assert err < 1e-5

    def loss_wrt_w(w):
        fresh = params_with_weights(w.values)
        fresh.class_w = w
        e2 = Tensor(np.random.default_rng(14).standard_normal(8))
        return model.id_loss(model.arcface_logits(e2, fresh, target=1), 1)

    w = Tensor(params.class_w.values.copy(), requires_grad=True)
    assert T.grad_check(loss_wrt_w, w) < 1e-5


def test_anomaly_score_uniform_posterior():
    params = tiny_params(n_classes=4, seed=15)
    params.class_w = Tensor(np.zeros((4, 8)) + 1e-30, requires_grad=True)
    # zero-ish class weights give identical logits -> uniform posterior
    x = Tensor(np.random.default_rng(16).standard_normal((2, 12, 16)))
    score = model.anomaly_score(x, params, claimed_id=0)
    assert abs(score - math.log(4)) < 1e-6


def test_score_closed_forms():
    # posterior concentrated on the claim -> 0; [0.9, 0.1] claim 0 -> -ln 0.9
    assert abs(model.score_from_logits(np.log([0.9, 0.1]), 0) - 0.10536) < 1e-4
    assert model.score_from_logits(np.array([60.0, 0.0]), 0) < 1e-12


def test_anomaly_score_decreasing_in_posterior():
    probs = np.linspace(0.05, 0.95, 10)
    scores = [model.score_from_logits(np.log([p, 1 - p]), 0) for p in probs]
    assert np.all(np.diff(scores) < 0)
