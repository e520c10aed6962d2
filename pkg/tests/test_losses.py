import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskood import losses as L
from maskood import tensor as T
from maskood.model import QueryOutput

import oracles


def f(x):
    return float(T.as_tensor(x).data)


# ---------------------------------------------------------------- bce

def test_bce_closed_form():
    assert f(L.bce_loss(np.array([0.0]), np.array([1.0]))) == pytest.approx(math.log(2), abs=1e-7)


def test_bce_saturation():
    assert abs(f(L.bce_loss(np.array([50.0]), np.array([1.0])))) < 1e-9


def test_bce_random_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 5)) * 3
    t = (rng.random((3, 5)) > 0.5).astype(float)
    assert f(L.bce_loss(T.Tensor(x), t)) == pytest.approx(oracles.bce(x, t), rel=1e-12)


# ---------------------------------------------------------------- dice

def test_dice_perfect_overlap():
    t = np.array([1.0, 0.0, 1.0, 1.0])
    assert abs(f(L.dice_loss(t, t))) < 1e-7


def test_dice_disjoint():
    t = np.array([1.0, 0.0, 1.0, 0.0])
    assert f(L.dice_loss(1 - t, t, eps=1e-9)) == pytest.approx(1.0, abs=1e-6)


def test_dice_half():
    assert f(L.dice_loss(np.array([0.5, 0.5]), np.array([1.0, 0.0]), eps=1e-9)) == pytest.approx(0.5, abs=1e-6)


def test_dice_random_oracle():
    rng = np.random.default_rng(1)
    p = rng.random(12)
    t = (rng.random(12) > 0.5).astype(float)
    assert f(L.dice_loss(T.Tensor(p), t)) == pytest.approx(oracles.dice(p, t), rel=1e-12)


# ---------------------------------------------------------------- ce

def test_ce_uniform_real_target():
    assert f(L.ce_loss(np.zeros((1, 4)), [1])) == pytest.approx(2.0 * math.log(4), rel=1e-6)


def test_ce_uniform_phi_target():
    assert f(L.ce_loss(np.zeros((1, 4)), [3])) == pytest.approx(0.1 * math.log(4), rel=1e-6)


def test_ce_random_oracle():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(5, 4))
    tgt = [0, 3, 2, 3, 1]
    assert f(L.ce_loss(T.Tensor(logits), tgt)) == pytest.approx(oracles.ce(logits, tgt, 4), rel=1e-12)


def test_ce_target_out_of_range():
    with pytest.raises(ValueError):
        L.ce_loss(np.zeros((2, 4)), [0, 4])


# ---------------------------------------------------------------- match cost

def test_match_cost_strong_match():
    gt = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert f(L.match_cost(T.Tensor((gt * 2 - 1) * 30), gt)) < 1e-2


def test_match_cost_anti_gt():
    gt = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert f(L.match_cost(T.Tensor((1 - 2 * gt) * 30), gt)) > 5


def test_match_cost_compositional():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 4))
    t = (rng.random((4, 4)) > 0.5).astype(float)
    want = 5 * oracles.bce(x, t) + 5 * oracles.dice([oracles.sigmoid(v) for v in x.ravel()], t)
    assert f(L.match_cost(T.Tensor(x), t)) == pytest.approx(want, rel=1e-12)


def test_cost_matrix_matches_pairwise():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 10))
    t = (rng.random((2, 10)) > 0.5).astype(float)
    cm = L.match_cost_matrix(x, t)
    for i in range(2):
        for j in range(3):
            assert cm[i, j] == pytest.approx(f(L.match_cost(T.Tensor(x[j]), t[i])), rel=1e-10)


# ---------------------------------------------------------------- segmentation loss

def _fixture(seed, n=4, k=3, h=3, w=3, g=None):
    rng = np.random.default_rng(seed)
    cls = rng.normal(size=(n, k + 1))
    msk = rng.normal(size=(n, h, w)) * 2
    labels = rng.integers(1, k + 1, size=(h, w))
    present = np.unique(labels)[: g or n]
    gt = np.stack([labels == c for c in present]).astype(float)
    return cls, msk, gt, present


def test_segmentation_exact_reproduction():
    gt = np.zeros((2, 4, 4))
    gt[0, :2] = 1
    gt[1, 2:] = 1
    classes = np.array([1, 2])
    cls = np.full((3, 3), -20.0)
    cls[0, 0] = cls[1, 1] = cls[2, 2] = 20.0
    msk = np.stack([(gt[0] * 2 - 1) * 30, (gt[1] * 2 - 1) * 30, np.full((4, 4), -30.0)])
    assert f(L.segmentation_loss(QueryOutput(T.Tensor(cls), T.Tensor(msk)), gt, classes)) < 0.1


def test_segmentation_matches_bruteforce_n4():
    cls, msk, gt, present = _fixture(5)
    got = f(L.segmentation_loss(QueryOutput(T.Tensor(cls), T.Tensor(msk)), gt, present))
    assert got == pytest.approx(oracles.segmentation_loss_bruteforce(cls, msk, gt, present), rel=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.permutations(range(3)))
def test_segmentation_permutation_invariant(seed, perm):
    cls, msk, gt, present = _fixture(seed, n=4, k=4, h=4, w=4)
    g = len(present)
    p = [i for i in perm if i < g] + list(range(3, g))
    out = QueryOutput(T.Tensor(cls.astype(np.float32)), T.Tensor(msk.astype(np.float32)))
    a = L.segmentation_loss(out, gt, present).data
    b = L.segmentation_loss(out, gt[p], present[p]).data
    assert a.tobytes() == b.tobytes()


def test_segmentation_too_many_gt():
    cls, msk, gt, present = _fixture(6, n=2, k=3, h=4, w=4)
    gt3 = np.concatenate([gt, gt, gt])[:3]
    with pytest.raises(ValueError):
        L.segmentation_loss(QueryOutput(cls, msk), gt3, np.array([1, 2, 3]))


def test_segmentation_valid_mask_ignores_pixels():
    cls, msk, gt, present = _fixture(7, n=4, k=3, h=4, w=4)
    valid = np.ones((4, 4))
    valid[0] = 0
    out = QueryOutput(T.Tensor(cls), T.Tensor(msk))
    a = f(L.segmentation_loss(out, gt, present, valid=valid))
    msk2 = msk.copy()
    msk2[:, 0] = 99.0
    b = f(L.segmentation_loss(QueryOutput(T.Tensor(cls), T.Tensor(msk2)), gt, present, valid=valid))
    assert a == pytest.approx(b, rel=1e-12)


# ---------------------------------------------------------------- negative likelihood

def test_neg_likelihood_confident_inlier():
    c = np.array([[50.0, -50.0, -50.0]])
    m = np.full((1, 1, 1), 50.0)
    assert f(L.neg_likelihood_map(c, m)[0, 0]) == pytest.approx(-1.0, abs=1e-6)


def test_neg_likelihood_empty_masks():
    c = np.random.default_rng(8).normal(size=(3, 4))
    out = L.neg_likelihood_map(c, np.full((3, 2, 2), -50.0)).data
    assert np.all(np.abs(out) < 1e-9)


def test_neg_likelihood_two_query_enumeration():
    c = np.log(np.array([[0.9, 0.05, 0.05], [0.1, 0.45, 0.45]]))
    m = np.array([50.0, 0.0]).reshape(2, 1, 1)
    want = -oracles.marginal(c, m)[0, 0]
    assert want == pytest.approx(-0.95, abs=1e-12)
    assert f(L.neg_likelihood_map(T.Tensor(c), T.Tensor(m))[0, 0]) == pytest.approx(want, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_neg_likelihood_range_and_oracle(seed):
    rng = np.random.default_rng(seed)
    c = rng.normal(size=(3, 4)) * 3
    m = rng.normal(size=(3, 2, 3)) * 3
    out = L.neg_likelihood_map(T.Tensor(c), T.Tensor(m)).data
    assert np.all((out >= -1) & (out <= 0))
    np.testing.assert_allclose(out, -np.clip(oracles.marginal(c, m), 0, 1), atol=1e-12)


def test_neg_likelihood_batched():
    rng = np.random.default_rng(9)
    c = rng.normal(size=(2, 3, 4))
    m = rng.normal(size=(2, 3, 2, 2))
    both = L.neg_likelihood_map(T.Tensor(c), T.Tensor(m)).data
    np.testing.assert_allclose(both[1], L.neg_likelihood_map(T.Tensor(c[1]), T.Tensor(m[1])).data)


# ---------------------------------------------------------------- contrastive

def test_cl_inlier_printed():
    assert f(L.mask_contrastive_loss(np.array([[-1.0]]), np.array([[0.0]]))) == pytest.approx(0.5)


def test_cl_ood_pixel():
    assert f(L.mask_contrastive_loss(np.array([[0.0]]), np.array([[1.0]]), 0.75)) == pytest.approx(0.28125)


def test_cl_mixed_oracle():
    ln = np.array([[-0.2, -0.9], [-0.5, 0.0]])
    ood = np.array([[1, 0], [1, 0]])
    per = [0.5 * (max(0.0, 0.75 - v) if o else v) ** 2 for v, o in zip(ln.ravel(), ood.ravel())]
    assert f(L.mask_contrastive_loss(T.Tensor(ln), ood)) == pytest.approx(sum(per) / 4, rel=1e-12)


def test_cl_shifted_form():
    assert f(L.mask_contrastive_loss(np.array([[-1.0]]), np.array([[0.0]]), inlier_form="shifted")) == 0.0
    with pytest.raises(ValueError):
        L.mask_contrastive_loss(np.zeros((1, 1)), np.zeros((1, 1)), inlier_form="xx")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_cl_nonnegative(seed):
    rng = np.random.default_rng(seed)
    ln = -rng.random((3, 3))
    assert f(L.mask_contrastive_loss(ln, rng.random((3, 3)) > 0.5)) >= 0


# ---------------------------------------------------------------- outlier bce

def test_obce_confident_ood():
    assert f(L.outlier_bce_loss(T.Tensor(np.array([[-1e-6]])), np.array([[1.0]]))) < 1e-5


def test_obce_confident_inlier():
    assert f(L.outlier_bce_loss(np.array([[-1.0]]), np.array([[0.0]]))) < 1e-5


def test_obce_half():
    ood = np.array([[1.0, 0.0]])
    assert f(L.outlier_bce_loss(np.full((1, 2), -0.5), ood)) == pytest.approx(math.log(2), rel=1e-6)


# ---------------------------------------------------------------- total

def test_total_loss():
    assert f(L.total_loss_m2a(0.0, 0.0)) == 0.0
    assert f(L.total_loss_m2a(1.5, 0.25)) == 1.75


def test_total_loss_gradient_linearity():
    x = T.Tensor(np.array([0.3, -0.2]), requires_grad=True)
    a = T.sum(T.square(x))
    b = T.sum(T.exp(x))
    (g,) = T.gradient(L.total_loss_m2a(a, b), [x])
    (ga,) = T.gradient(T.sum(T.square(x)), [x])
    (gb,) = T.gradient(T.sum(T.exp(x)), [x])
    np.testing.assert_allclose(g, ga + gb, rtol=1e-12)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        L.LossWeights(bce=-1)
    with pytest.raises(ValueError):
        L.LossWeights(margin=0.0)
