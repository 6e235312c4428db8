import math

import numpy as np
import pytest

from gpq import encoder
from gpq.errors import DegenerateBatch, ShapeMismatch
from gpq.numerics import SubspaceShape, intra_normalize, l2_normalize
from gpq.objectives import Prototypes, cls_loss, init_prototypes, npq_loss, sem_loss, total_objective
from gpq.quantizer import init_codebook, soft_quantize
from gpq.trainer import TrainConfig, compute_gradients, init_state

from conftest import central_diff, random_features, rel_error

SHAPE = SubspaceShape(M=2, d=3, K=4)
# default sub-vector size: soft assignment at alpha=20 is far less saturated
# than at d=3, so codeword gradients stay above finite-difference noise
WIDE = SubspaceShape(M=2, d=12, K=16)


def test_npq_two_identical_items_is_ln2():
    x = intra_normalize(np.array([[1.0, 2, 3, 4, 5, 6]] * 2), SHAPE)
    loss, _, _ = npq_loss(x, x.copy(), [1, 1])
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_npq_hand_computed_mixed_batch():
    x = np.array([[1.0, 0, 0, 1, 0, 0], [0, 1.0, 0, 0, 1, 0]])
    q = np.array([[1.0, 0, 0, 1, 0, 0], [0, 0, 1.0, 0, 0, 1]])
    loss, _, _ = npq_loss(x, q, [0, 1])
    # row 0: S = [2, 0], target [1, 0]; row 1: S = [0, 0], target [0, 1]
    expected = 0.5 * (math.log(1 + math.exp(-2)) + math.log(2))
    assert loss == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_npq_gradients(seed):
    rng = np.random.default_rng(seed)
    x = random_features(rng, 5, SHAPE)
    q = random_features(rng, 5, SHAPE)
    labels = rng.integers(0, 3, size=5)
    loss, gx, gq = npq_loss(x, q, labels)
    assert rel_error(gx, central_diff(lambda: npq_loss(x, q, labels)[0], x)) < 1e-4
    assert rel_error(gq, central_diff(lambda: npq_loss(x, q, labels)[0], q)) < 1e-4


def test_npq_permutation_and_relabeling(rng):
    x = random_features(rng, 6, SHAPE)
    q = random_features(rng, 6, SHAPE)
    labels = np.array([0, 1, 2, 0, 1, 2])
    base = npq_loss(x, q, labels)[0]
    perm = rng.permutation(6)
    assert npq_loss(x[perm], q[perm], labels[perm])[0] == pytest.approx(base, abs=1e-12)
    relabel = np.array([2, 0, 1])[labels]
    assert npq_loss(x, q, relabel)[0] == pytest.approx(base, abs=1e-12)


def test_npq_multilabel_and_errors(rng):
    x = random_features(rng, 3, SHAPE)
    multi = np.array([[1, 1, 0], [0, 1, 0], [0, 0, 1]])
    assert np.isfinite(npq_loss(x, x, multi)[0])
    with pytest.raises(DegenerateBatch):
        npq_loss(x[:1], x[:1], [0])
    with pytest.raises(DegenerateBatch):
        npq_loss(x, x, np.array([[1, 0, 0], [0, 0, 0], [0, 0, 1]]))
    with pytest.raises(ShapeMismatch):
        npq_loss(x, x[:2], [0, 1, 2])


def test_cls_closed_form():
    nc, d = 10, 12
    shape = SubspaceShape(M=1, d=d)
    W = Prototypes(np.eye(d)[:, :nc][None], beta=4.0)
    x = np.eye(d)[2]
    loss, _, _ = cls_loss(x, 2, W)
    assert loss == pytest.approx(-math.log(math.exp(4) / (math.exp(4) + nc - 1)), abs=1e-12)
    assert loss == pytest.approx(0.1525843823938475, abs=1e-12)


def test_cls_identical_prototypes_is_log_nc(rng):
    col = l2_normalize(rng.standard_normal(3))
    W = Prototypes(np.tile(col[None, :, None], (2, 1, 5)))
    x = random_features(rng, 4, SHAPE)
    assert cls_loss(x, [0, 1, 2, 3], W)[0] == pytest.approx(math.log(5), abs=1e-12)
    assert sem_loss(x, W)[0] == pytest.approx(math.log(5), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_cls_and_sem_gradients(seed):
    rng = np.random.default_rng(seed)
    proto = init_prototypes(SHAPE, 4, seed)
    x = random_features(rng, 3, SHAPE)
    labels = rng.integers(0, 4, size=3)
    _, gx, gW = cls_loss(x, labels, proto)
    assert rel_error(gx, central_diff(lambda: cls_loss(x, labels, proto)[0], x)) < 1e-4
    assert rel_error(gW, central_diff(lambda: cls_loss(x, labels, proto)[0], proto.W)) < 1e-4
    _, gx, gW = sem_loss(x, proto)
    assert rel_error(gx, central_diff(lambda: sem_loss(x, proto)[0], x)) < 1e-4
    assert rel_error(gW, central_diff(lambda: sem_loss(x, proto)[0], proto.W)) < 1e-4


def test_sem_bounds_and_confident_limit(rng):
    proto = init_prototypes(SHAPE, 6, 0)
    for _ in range(20):
        loss = sem_loss(random_features(rng, 5, SHAPE), proto)[0]
        assert 0 <= loss <= math.log(6)
    W = Prototypes(np.stack([np.eye(3), np.eye(3)]), beta=200.0)
    x = np.array([[1.0, 0, 0, 0, 1, 0]])
    assert sem_loss(x, W)[0] < 1e-60


def _total_setup(seed, lam1=0.1, lam2=0.1):
    rng = np.random.default_rng(seed)
    xl = random_features(rng, 4, WIDE)
    xu = random_features(rng, 4, WIDE)
    labels = rng.integers(0, 3, size=4)
    cb = init_codebook(WIDE, seed)
    proto = init_prototypes(WIDE, 3, seed + 100)
    return xl, labels, xu, cb, proto


def test_total_is_composition(rng):
    xl, labels, xu, cb, proto = _total_setup(3)
    res = total_objective(xl, labels, xu, cb, proto, 0.3, 0.7)
    npq = npq_loss(xl, soft_quantize(xl, cb), labels)[0]
    cls = cls_loss(xl, labels, proto)[0]
    sem = sem_loss(xu, proto)[0]
    assert res.total == pytest.approx(npq + 0.3 * cls - 0.7 * sem, abs=1e-10)


def test_total_without_classifier_weights(rng):
    xl, labels, xu, cb, proto = _total_setup(4)
    res = total_objective(xl, labels, xu, cb, proto, 0.0, 0.0)
    assert res.total == res.npq
    assert not res.grad_W.any() and not res.grad_unlabeled.any()


@pytest.mark.parametrize("seed", range(5))
def test_total_codeword_and_prototype_gradients(seed):
    xl, labels, xu, cb, proto = _total_setup(seed)
    f = lambda: total_objective(xl, labels, xu, cb, proto, 0.1, 0.1).total
    res = total_objective(xl, labels, xu, cb, proto, 0.1, 0.1)
    assert rel_error(res.grad_Z, central_diff(f, cb.Z)) < 1e-4
    assert rel_error(res.grad_W, central_diff(f, proto.W)) < 1e-4
    assert rel_error(res.grad_labeled, central_diff(f, xl)) < 1e-4
    assert rel_error(res.grad_unlabeled, central_diff(f, xu)) < 1e-4


def _state_setup(seed):
    cfg = TrainConfig(M=2, d=12, K=16, hidden=4, seed=seed, lambda1=0.3, lambda2=0.5)
    rng = np.random.default_rng(seed)
    state = init_state(5, 3, cfg)
    raw_l = rng.standard_normal((4, 5))
    raw_u = rng.standard_normal((4, 5))
    labels = np.eye(3)[rng.integers(0, 3, size=4)]
    return cfg, state, raw_l, labels, raw_u


def _losses(state, raw_l, labels, raw_u):
    xl, _ = encoder.encode(state.params, raw_l, state.shape)
    xu, _ = encoder.encode(state.params, raw_u, state.shape)
    return total_objective(xl, labels, xu, state.codebook, state.prototypes, 0.3, 0.5)


@pytest.mark.parametrize("seed", range(5))
def test_routed_gradients_through_encoder(seed):
    cfg, state, raw_l, labels, raw_u = _state_setup(seed)
    step = compute_gradients(state, raw_l, labels, raw_u, cfg)

    def surrogate():
        r = _losses(state, raw_l, labels, raw_u)
        return r.npq + 0.3 * r.cls + 0.5 * r.sem

    total = lambda: _losses(state, raw_l, labels, raw_u).total
    for name in encoder.PARAM_NAMES:
        numeric = central_diff(surrogate, getattr(state.params, name))
        assert rel_error(step.grads[name], numeric) < 1e-4, name
    assert rel_error(step.grads["Z"], central_diff(total, state.codebook.Z)) < 1e-4
    assert rel_error(step.grads["W"], central_diff(total, state.prototypes.W)) < 1e-4


def test_sem_path_encoder_gradient_is_reversed():
    cfg, state, raw_l, labels, raw_u = _state_setup(7)
    xu, cache = encoder.encode(state.params, raw_u, state.shape)
    _, g_sem, _ = sem_loss(xu, state.prototypes)
    plain = encoder.backward(state.params, cache, -0.5 * g_sem)
    routed = encoder.backward(state.params, cache, np.zeros_like(xu), -0.5 * g_sem)
    for name in encoder.PARAM_NAMES:
        np.testing.assert_allclose(getattr(routed, name), -getattr(plain, name), atol=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_entropy_minimax_directions(seed):
    cfg, state, raw_l, labels, raw_u = _state_setup(seed)
    lr = 1e-4
    xu, cache = encoder.encode(state.params, raw_u, state.shape)
    before, g_x, g_w = sem_loss(xu, state.prototypes)
    lam2 = 0.5
    W_up = Prototypes(state.prototypes.W - lr * (-lam2 * g_w), state.prototypes.beta)
    assert sem_loss(xu, W_up)[0] >= before - 1e-8
    grads = encoder.backward(state.params, cache, np.zeros_like(xu), -lam2 * g_x)
    moved = encoder.EncoderParams(*(getattr(state.params, n) - lr * getattr(grads, n) for n in encoder.PARAM_NAMES))
    xu2, _ = encoder.encode(moved, raw_u, state.shape)
    assert sem_loss(xu2, state.prototypes)[0] <= before + 1e-8
