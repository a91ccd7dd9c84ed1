import numpy as np
import pytest

import oracles
from videoreid import ops
from videoreid.attention import (AttentionConfig, AttentionVector,
                                 attention_pool, attention_scores,
                                 descriptor_from_features, init_attention,
                                 mean_pool, triangular_upsample_taps,
                                 video_descriptor, zero_attention)
from videoreid.frame_cnn import init_cnn
from videoreid.tensor import ShapeError, Tensor, grad_check


def _features(n, rng):
    return Tensor(rng.normal(size=(n, 128)))


# ---------------------------------------------------------------------------
# attention_scores


def test_zero_network_scores_are_half():
    att = zero_attention()
    rng = np.random.default_rng(0)
    vec = attention_scores(att, _features(16, rng))
    np.testing.assert_array_equal(vec.alphas.data, 0.0)
    np.testing.assert_array_equal(vec.lambdas.data, 0.5)


def test_score_count_and_range():
    att = init_attention(1)
    rng = np.random.default_rng(1)
    for n in (4, 5, 7, 16, 23, 32):
        vec = attention_scores(att, _features(n, rng))
        assert vec.lambdas.data.shape == (n,)
        assert np.all(vec.lambdas.data > 0.0) and np.all(vec.lambdas.data < 1.0)


def test_short_inputs_edge_replicated():
    att = init_attention(2)
    rng = np.random.default_rng(2)
    for n in (1, 2, 3):
        vec = attention_scores(att, _features(n, rng))
        assert vec.lambdas.data.shape == (n,)


def test_lambda_is_sigmoid_of_alpha_exactly():
    att = init_attention(3)
    rng = np.random.default_rng(3)
    vec = attention_scores(att, _features(16, rng))
    # bitwise identical to the library sigmoid (same code path)
    recomputed = ops.sigmoid(Tensor(vec.alphas.data.copy())).data
    np.testing.assert_array_equal(vec.lambdas.data, recomputed)
    # and within an ulp of the textbook form
    np.testing.assert_allclose(vec.lambdas.data,
                               1.0 / (1.0 + np.exp(-vec.alphas.data)),
                               rtol=1e-15, atol=0)


def test_constant_features_interior_scores_equal():
    att = init_attention(4)
    row = np.random.default_rng(4).normal(size=128)
    for n in (16, 32):
        vec = attention_scores(att, Tensor(np.tile(row, (n, 1))))
        interior = vec.alphas.data[4:n - 4]
        assert interior.max() - interior.min() < 1e-9


def test_interior_shift_equivariance_small_shifts():
    # Constant-padded sequence: shifting by |s| <= 2 with edge fill leaves the
    # sequence unchanged, so interior scores must be shift-equal too.
    att = init_attention(5)
    row = np.random.default_rng(5).normal(size=128)
    n = 24
    base = np.tile(row, (n, 1))
    vec = attention_scores(att, Tensor(base)).alphas.data
    for s in (-2, -1, 1, 2):
        shifted = np.roll(base, s, axis=0)
        if s > 0:
            shifted[:s] = base[0]
        else:
            shifted[s:] = base[-1]
        vec_s = attention_scores(att, Tensor(shifted)).alphas.data
        for j in range(6, n - 6):
            assert abs(vec[j] - vec_s[j + s]) < 1e-9


def test_interior_shift_equivariance_full_stride():
    # A structured sequence shifted by the total downsampling stride (4)
    # shifts the interior raw scores by exactly 4.
    att = init_attention(6)
    rng = np.random.default_rng(6)
    n = 48
    base = np.tile(rng.normal(size=128), (n, 1))
    base[20:28] += rng.normal(size=(8, 128))  # bump in the middle
    shifted = np.roll(base, 4, axis=0)
    a0 = attention_scores(att, Tensor(base)).alphas.data
    a4 = attention_scores(att, Tensor(shifted)).alphas.data
    interior = slice(16, 36)
    np.testing.assert_allclose(a4[20:40], a0[16:36], atol=1e-9)


def test_feature_width_validation():
    att = init_attention(7)
    with pytest.raises(ShapeError):
        attention_scores(att, Tensor(np.zeros((8, 64))))


def test_softmax_variant_behind_flag():
    cfg = AttentionConfig(score_activation="softmax")
    att = init_attention(8, cfg)
    vec = attention_scores(att, _features(12, np.random.default_rng(8)))
    assert vec.lambdas.data.sum() == pytest.approx(1.0)


def test_upsample_taps_sum_per_phase():
    taps = triangular_upsample_taps(8, 4)
    for phase in range(4):
        assert taps[phase] + taps[phase + 4] == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# pooling


def test_attention_pool_one_hot_selects_frame():
    rng = np.random.default_rng(9)
    feats = _features(5, rng)
    lam = np.zeros(5)
    lam[3] = 1.0
    out = attention_pool(feats, Tensor(lam))
    np.testing.assert_allclose(out.data, feats.data[3], atol=1e-12)


def test_attention_pool_uniform_half():
    rng = np.random.default_rng(10)
    feats = _features(2, rng)
    out = attention_pool(feats, Tensor(np.array([0.5, 0.5])))
    np.testing.assert_allclose(out.data, 0.5 * (feats.data[0] + feats.data[1]),
                               atol=1e-12)


def test_attention_pool_matches_loop_oracle():
    rng = np.random.default_rng(11)
    for _ in range(10):
        n = int(rng.integers(1, 20))
        feats = rng.normal(size=(n, 128))
        lam = rng.uniform(0, 1, size=n)
        ours = attention_pool(Tensor(feats), Tensor(lam)).data
        np.testing.assert_allclose(ours, oracles.weighted_pool_loops(feats, lam),
                                   atol=1e-12)


def test_attention_pool_length_mismatch():
    with pytest.raises(ShapeError):
        attention_pool(Tensor(np.zeros((4, 128))), Tensor(np.zeros(5)))


def test_attention_pool_homogeneous_in_lambda():
    rng = np.random.default_rng(12)
    feats = _features(6, rng)
    lam = rng.uniform(0, 1, size=6)
    base = attention_pool(feats, Tensor(lam)).data
    # power-of-two scales commute with float dot products exactly
    np.testing.assert_array_equal(attention_pool(feats, Tensor(4.0 * lam)).data,
                                  4.0 * base)
    np.testing.assert_allclose(attention_pool(feats, Tensor(3.0 * lam)).data,
                               3.0 * base, rtol=1e-12)


def test_mean_pool_examples_and_oracle():
    rng = np.random.default_rng(13)
    single = _features(1, rng)
    np.testing.assert_array_equal(mean_pool(single).data, single.data[0])
    v = rng.normal(size=128)
    opposite = Tensor(np.stack([v, -v]))
    np.testing.assert_allclose(mean_pool(opposite).data, 0.0, atol=1e-15)
    feats = rng.normal(size=(16, 128))
    np.testing.assert_allclose(mean_pool(Tensor(feats)).data,
                               oracles.mean_pool_loops(feats), atol=1e-12)


# ---------------------------------------------------------------------------
# descriptor


def test_descriptor_norm_is_one():
    cnn = init_cnn(0)
    att = init_attention(1)
    rng = np.random.default_rng(14)
    frames = [Tensor(rng.normal(size=(5, 56, 40))) for _ in range(6)]
    f = video_descriptor(cnn, att, frames)
    assert abs(np.linalg.norm(f.data) - 1.0) < 1e-9


def test_single_frame_descriptor_is_normalized_feature():
    att = init_attention(2)
    rng = np.random.default_rng(15)
    feats = _features(1, rng)
    f = descriptor_from_features(att, feats)
    expected = feats.data[0] / np.linalg.norm(feats.data[0])
    np.testing.assert_allclose(f.data, expected, atol=1e-9)


def test_descriptor_scale_invariance_with_zero_attention():
    att = zero_attention()
    rng = np.random.default_rng(16)
    probe = rng.normal(size=(8, 128))
    gallery = [rng.normal(size=(8, 128)) for _ in range(5)]

    def ranking(scale_factor):
        p = descriptor_from_features(att, Tensor(scale_factor * probe)).data
        dists = []
        for g in gallery:
            d = descriptor_from_features(att, Tensor(scale_factor * g)).data
            dists.append(np.linalg.norm(p - d))
        return int(np.argmin(dists))

    assert ranking(1.0) == ranking(37.5)


def test_descriptor_gradient_through_attention_conv():
    cnn = init_cnn(3, input_hw=(8, 8))
    att = init_attention(4)
    rng = np.random.default_rng(17)
    frames1 = [Tensor(rng.normal(size=(5, 8, 8))) for _ in range(4)]
    frames2 = [Tensor(rng.normal(size=(5, 8, 8))) for _ in range(4)]

    def f(_):
        f1 = video_descriptor(cnn, att, frames1)
        f2 = video_descriptor(cnn, att, frames2)
        return ops.euclidean_distance(f1, f2)

    err = grad_check(f, att.conv1_kernel, h=1e-5, max_entries=10, pick="largest")
    assert err < 1e-4
