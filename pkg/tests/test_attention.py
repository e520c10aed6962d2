import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskood import attention as A
from maskood import tensor as T

import oracles

NEG = -np.inf


def _rand(seed, n=2, p=3, c=4):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=s).astype(np.float32) for s in ((n, c), (n, c), (p, c), (p, c))]


# ---------------------------------------------------------------- masks

def test_masks_all_ones_prior():
    m = A.build_attention_masks(np.ones((2, 3)))
    assert np.all(m.foreground == 0) and np.all(m.background == NEG)


def test_masks_all_zeros_prior():
    m = A.build_attention_masks(np.zeros((2, 3)))
    assert np.all(m.foreground == NEG) and np.all(m.background == 0)


def test_masks_tie_goes_to_foreground():
    m = A.build_attention_masks(np.array([[0.5, 0.4999]]))
    assert m.foreground[0, 0] == 0 and m.background[0, 0] == NEG
    assert m.foreground[0, 1] == NEG and m.background[0, 1] == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_masks_partition(seed):
    p = np.random.default_rng(seed).random((3, 5))
    m = A.build_attention_masks(p)
    assert np.array_equal(m.foreground == 0, m.background == NEG)


# ---------------------------------------------------------------- cross attention

def test_ca_single_key():
    x, q, k, v = _rand(0, p=1)
    np.testing.assert_allclose(A.cross_attention(x, q, k, v).data, v + x, rtol=1e-6)


def test_ca_zero_values_is_residual():
    x, q, k, v = _rand(1)
    np.testing.assert_array_equal(A.cross_attention(x, q, k, np.zeros_like(v)).data, x)


def test_ca_matches_reference_oracle():
    x, q, k, v = _rand(2)
    np.testing.assert_allclose(A.cross_attention(x, q, k, v).data,
                               oracles.reference_attention(x, q, k, v), rtol=1e-5, atol=1e-6)


def test_ca_shape_mismatch():
    x, q, k, v = _rand(3)
    with pytest.raises(T.DimensionError):
        A.cross_attention(x, q, k[:, :2], v)
    with pytest.raises(T.DimensionError):
        A.cross_attention(x, q, k, v[:2])


# ---------------------------------------------------------------- masked attention

def test_ma_zero_mask_equals_ca():
    x, q, k, v = _rand(4)
    np.testing.assert_array_equal(A.masked_attention(x, q, k, v, np.zeros((2, 3))).data,
                                  A.cross_attention(x, q, k, v).data)


def test_ma_fully_masked_is_residual():
    x, q, k, v = _rand(5)
    np.testing.assert_array_equal(A.masked_attention(x, q, k, v, np.full((2, 3), NEG)).data, x)


def test_ma_collapses_to_unmasked_key():
    x, q, k, v = _rand(6, n=1, p=2)
    out = A.masked_attention(x, q, k, v, np.array([[NEG, 0.0]]))
    np.testing.assert_allclose(out.data, v[1:] + x, rtol=1e-6)


def test_ma_matches_reference_oracle():
    x, q, k, v = _rand(7)
    fg = np.array([[0, NEG, 0], [NEG, NEG, 0]])
    np.testing.assert_allclose(A.masked_attention(x, q, k, v, fg).data,
                               oracles.reference_attention(x, q, k, v, fg), rtol=1e-5, atol=1e-6)


# ---------------------------------------------------------------- global masked attention

def test_gma_all_foreground_equals_ca():
    x, q, k, v = _rand(8)
    masks = A.build_attention_masks(np.ones((2, 3)))
    np.testing.assert_allclose(A.global_masked_attention(x, q, k, v, masks).data,
                               A.cross_attention(x, q, k, v).data, atol=1e-6)


def test_gma_hand_evaluation():
    x = np.array([[0.5, -1.0]], np.float32)
    q = np.zeros((1, 2), np.float32)
    k = np.ones((2, 2), np.float32)
    v = np.array([[1.0, 2.0], [10.0, 20.0]], np.float32)
    masks = A.AttentionMaskPair(np.array([[0.0, NEG]]), np.array([[NEG, 0.0]]))
    np.testing.assert_allclose(A.global_masked_attention(x, q, k, v, masks).data, v[0] + v[1] + x)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gma_foreground_term_identity(seed):
    x, q, k, v = _rand(seed)
    masks = A.build_attention_masks(np.random.default_rng(seed).random((2, 3)))
    fg_term = A.foreground_term(q, k, v, masks.foreground).data
    ma = A.masked_attention(x, q, k, v, masks.foreground).data
    np.testing.assert_allclose(fg_term, ma - x, atol=1e-6)
    np.testing.assert_allclose(fg_term, oracles.attention_term(q, k, v, masks.foreground), atol=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gma_complement_invariance(seed):
    x, q, k, v = _rand(seed, n=3, p=5)
    p = np.random.default_rng(seed + 1).random((3, 5))
    a = A.global_masked_attention(x, q, k, v, A.build_attention_masks(p)).data
    # strict complement so ties at 0.5 do not straddle the threshold
    b = A.global_masked_attention(x, q, k, v, A.build_attention_masks(p).complement()).data
    np.testing.assert_allclose(a, b, atol=1e-6)
    c = A.global_masked_attention(x, q, k, v, A.build_attention_masks(1 - p)).data
    np.testing.assert_allclose(a, c, atol=1e-6)


def test_gma_weights_rows_are_distributions():
    x, q, k, v = _rand(9)
    masks = A.build_attention_masks(np.array([[1, 0, 0], [0, 0, 0]]))
    _, w = A.global_masked_attention(x, q, k, v, masks, return_weights=True)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("kind", ["ca", "ma", "gma"])
def test_mechanisms_pass_grad_check(kind):
    rng = np.random.default_rng(10)
    x, q, k, v = (rng.normal(size=s) for s in ((3, 4), (3, 4), (5, 4), (5, 4)))
    prior = rng.random((3, 5))

    def fn(xi, qi, ki, vi):
        return T.sum(T.square(A.attend(kind, xi, qi, ki, vi, prior)))

    assert T.grad_check(fn, [x, q, k, v], eps=1e-5) < 1e-4


def test_attend_unknown_kind():
    x, q, k, v = _rand(11)
    with pytest.raises(ValueError):
        A.attend("xx", x, q, k, v, np.zeros((2, 3)))


def test_scaled_flag_divides_logits():
    x, q, k, v = _rand(12)
    a = A.cross_attention(x, q / 2.0, k, v).data
    b = A.cross_attention(x, q, k, v, scale=True).data  # sqrt(4) = 2
    np.testing.assert_allclose(a, b, rtol=1e-6)


# ---------------------------------------------------------------- negative attention

def test_negative_attention_uniform():
    np.testing.assert_allclose(A.negative_attention_map(np.full((3, 4), 0.25)), 0.75)


def test_negative_attention_extreme():
    w = np.zeros((3, 4))
    w[:, 2] = 1
    np.testing.assert_array_equal(A.negative_attention_map(w), [1, 1, 0, 1])


def test_negative_attention_random():
    w = np.random.default_rng(13).dirichlet(np.ones(5), size=4)
    expected = [min(1.0, max(0.0, 1 - sum(w[i, j] for i in range(4)) / 4)) for j in range(5)]
    np.testing.assert_allclose(A.negative_attention_map(w), expected, rtol=1e-12)
