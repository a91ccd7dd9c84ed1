import numpy as np
import pytest

import oracles
import videoreid.tensor
from videoreid import ops
from videoreid.tensor import ShapeError, Tensor, backward, grad_check


@pytest.fixture(autouse=True)
def finite_checks():
    videoreid.tensor.CHECK_FINITE = True
    yield
    videoreid.tensor.CHECK_FINITE = False


def t(a, grad=False):
    return Tensor(np.asarray(a, dtype=float), requires_grad=grad)


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_identity_kernel():
    out = ops.conv2d(t(np.ones((1, 3, 3))), t(np.ones((1, 1, 1, 1))), t([0.0]))
    np.testing.assert_array_equal(out.data, np.ones((1, 3, 3)))


def test_conv2d_pipeline_shape():
    # 56x40 input, 5x5 kernel, stride 1, padding 4 -> 60x44
    out = ops.conv2d(t(np.zeros((1, 56, 40))), t(np.zeros((1, 1, 5, 5))), t([0.0]),
                     stride=(1, 1), padding=(4, 4))
    assert out.data.shape == (1, 60, 44)


def test_conv2d_hand_case():
    x = t(np.arange(1, 17, dtype=float).reshape(1, 4, 4))
    k = t(np.ones((1, 1, 2, 2)))
    out = ops.conv2d(x, k, t([0.0]))
    expected = [[14, 18, 22], [30, 34, 38], [46, 50, 54]]
    np.testing.assert_array_equal(out.data[0], expected)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        ops.conv2d(t(np.zeros((3, 5, 5))), t(np.zeros((1, 2, 3, 3))), t([0.0]))


def test_conv2d_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for case in range(10):
        c_in = int(rng.integers(1, 4))
        c_out = int(rng.integers(1, 4))
        h, w = int(rng.integers(5, 12)), int(rng.integers(5, 12))
        kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        stride = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
        padding = (int(rng.integers(0, 3)), int(rng.integers(0, 3)))
        x = rng.normal(size=(c_in, h, w))
        k = rng.normal(size=(c_out, c_in, kh, kw))
        b = rng.normal(size=c_out)
        ours = ops.conv2d(t(x), t(k), t(b), stride, padding).data
        ref = oracles.conv2d_loops(x, k, b, stride, padding)
        np.testing.assert_allclose(ours, ref, atol=1e-10)


def test_conv2d_oracle_at_spec_max_size():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(8, 32, 32))
    k = rng.normal(size=(4, 8, 5, 5))
    b = rng.normal(size=4)
    ours = ops.conv2d(t(x), t(k), t(b), (1, 1), (2, 2)).data
    ref = oracles.conv2d_loops(x, k, b, (1, 1), (2, 2))
    np.testing.assert_allclose(ours, ref, atol=1e-10)


def test_conv2d_linearity():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 9, 9))
    y = rng.normal(size=(2, 9, 9))
    k = t(rng.normal(size=(3, 2, 3, 3)))
    zero_bias = t(np.zeros(3))
    a, b = 1.7, -0.6
    combined = ops.conv2d(t(a * x + b * y), k, zero_bias, (1, 1), (1, 1)).data
    separate = (a * ops.conv2d(t(x), k, zero_bias, (1, 1), (1, 1)).data
                + b * ops.conv2d(t(y), k, zero_bias, (1, 1), (1, 1)).data)
    np.testing.assert_allclose(combined, separate, atol=1e-9)


# ---------------------------------------------------------------------------
# conv1d


def test_conv1d_scaling_kernel():
    out = ops.conv1d(t([[1, 2, 3, 4, 5]]), t([[[2.0]]]), t([0.0]))
    np.testing.assert_array_equal(out.data, [[2, 4, 6, 8, 10]])


def test_conv1d_hand_case():
    out = ops.conv1d(t([[1, 0, 0, 1]]), t([[[1, 1, 1]]]), t([0.0]), 1, 1)
    np.testing.assert_array_equal(out.data, [[1, 1, 1, 1]])


def test_conv1d_shape_case():
    out = ops.conv1d(t(np.zeros((128, 16))), t(np.zeros((64, 128, 5))), t(np.zeros(64)),
                     1, 2)
    assert out.data.shape == (64, 16)


def test_conv1d_matches_loop_oracle():
    rng = np.random.default_rng(3)
    for case in range(10):
        c_in = int(rng.integers(1, 5))
        c_out = int(rng.integers(1, 5))
        n = int(rng.integers(4, 16))
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 3))
        x = rng.normal(size=(c_in, n))
        kern = rng.normal(size=(c_out, c_in, k))
        b = rng.normal(size=c_out)
        ours = ops.conv1d(t(x), t(kern), t(b), stride, padding).data
        ref = oracles.conv1d_loops(x, kern, b, stride, padding)
        np.testing.assert_allclose(ours, ref, atol=1e-10)


# ---------------------------------------------------------------------------
# transposed_conv1d


def test_transposed_conv1d_single_tap():
    out = ops.transposed_conv1d(t([[1.0]]), t([[[1, 2, 3, 4]]]), 4)
    np.testing.assert_array_equal(out.data, [[1, 2, 3, 4]])


def test_transposed_conv1d_scatter_add():
    out = ops.transposed_conv1d(t([[1.0, 1.0]]), t([[[1.0, 1.0]]]), 1)
    np.testing.assert_array_equal(out.data, [[1, 2, 1]])


def test_transposed_conv1d_shape():
    out = ops.transposed_conv1d(t(np.zeros((1, 4))), t(np.zeros((1, 1, 8))), 4)
    assert out.data.shape == (1, 20)


def test_transposed_conv1d_matches_loop_oracle():
    rng = np.random.default_rng(4)
    for case in range(10):
        c_in = int(rng.integers(1, 4))
        c_out = int(rng.integers(1, 4))
        n = int(rng.integers(1, 8))
        k = int(rng.integers(1, 6))
        stride = int(rng.integers(1, 4))
        x = rng.normal(size=(c_in, n))
        kern = rng.normal(size=(c_in, c_out, k))
        ours = ops.transposed_conv1d(t(x), t(kern), stride).data
        ref = oracles.transposed_conv1d_loops(x, kern, stride)
        np.testing.assert_allclose(ours, ref, atol=1e-10)


# ---------------------------------------------------------------------------
# maxpool


def test_maxpool_1d_example():
    out = ops.maxpool(t([1, 3, 2, 8]), 2, 2)
    np.testing.assert_array_equal(out.data, [3, 8])


def test_maxpool_2d_example():
    out = ops.maxpool(t([[1, 2], [3, 4]]), (2, 2), (2, 2))
    np.testing.assert_array_equal(out.data, [[4]])


def test_maxpool_tie_routes_to_first():
    x = t([5.0, 5.0, 1.0], grad=True)
    out = ops.maxpool(x, 2, 2)
    np.testing.assert_array_equal(out.data, [5.0])
    backward(ops.reduce_sum(out))
    np.testing.assert_array_equal(x.grad, [1.0, 0.0, 0.0])


def test_maxpool_floor_semantics():
    out = ops.maxpool(t([1, 9, 2, 7, 100]), 2, 2)
    np.testing.assert_array_equal(out.data, [9, 7])  # trailing 100 dropped


def test_maxpool_window_too_large():
    with pytest.raises(ShapeError):
        ops.maxpool(t([1.0]), 2, 2)


def test_maxpool_matches_loop_oracles():
    rng = np.random.default_rng(5)
    for case in range(10):
        c = int(rng.integers(1, 4))
        n = int(rng.integers(4, 20))
        w = int(rng.integers(1, 4))
        s = int(rng.integers(1, 4))
        if w > n:
            w = n
        x = rng.normal(size=(c, n))
        ours = ops.maxpool(t(x), w, s).data
        np.testing.assert_allclose(ours, oracles.maxpool1d_loops(x, w, s), atol=1e-10)

        h, wd = int(rng.integers(4, 12)), int(rng.integers(4, 12))
        x2 = rng.normal(size=(c, h, wd))
        win = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        st = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        ours2 = ops.maxpool(t(x2), win, st).data
        np.testing.assert_allclose(ours2, oracles.maxpool2d_loops(x2, win, st),
                                   atol=1e-10)


# ---------------------------------------------------------------------------
# pointwise, linear, vector ops


def test_sigmoid_and_tanh_at_zero():
    assert ops.sigmoid(t(0.0)).item() == 0.5
    assert ops.tanh(t(0.0)).item() == 0.0


def test_sigmoid_stable_for_large_negative():
    out = ops.sigmoid(t(-700.0)).item()
    assert 0.0 < out <= 1e-300
    out_pos = ops.sigmoid(t(700.0)).item()
    assert out_pos == 1.0


def test_linear_identity_and_hand_cases():
    out = ops.linear(t([3.0, 4.0]), t(np.eye(2)), t(np.zeros(2)))
    np.testing.assert_array_equal(out.data, [3, 4])
    out = ops.linear(t([2.0, 3.0]), t([[1.0, 1.0]]), t([1.0]))
    np.testing.assert_array_equal(out.data, [6])


def test_linear_matches_loop_oracle():
    rng = np.random.default_rng(6)
    w = rng.normal(size=(5, 3))
    x = rng.normal(size=3)
    b = rng.normal(size=5)
    ours = ops.linear(t(x), t(w), t(b)).data
    np.testing.assert_allclose(ours, oracles.matvec_loops(w, x) + b, atol=1e-12)


def test_reductions_examples():
    assert ops.reduce_mean(t([1.0, 2.0, 3.0])).item() == 2.0
    out = ops.reduce_sum(t([[1.0, 2.0], [3.0, 4.0]]), axis=0)
    np.testing.assert_array_equal(out.data, [4, 6])
    with pytest.raises(ShapeError):
        ops.reduce_sum(t([1.0]), axis=2)


def test_l2_normalize_examples():
    np.testing.assert_allclose(ops.l2_normalize(t([3.0, 4.0])).data, [0.6, 0.8])
    np.testing.assert_array_equal(ops.l2_normalize(t([0.0, 0.0])).data, [0.0, 0.0])
    rng = np.random.default_rng(7)
    for _ in range(5):
        v = rng.normal(size=16)
        out = ops.l2_normalize(t(v)).data
        assert abs(np.linalg.norm(out) - 1.0) < 1e-9


def test_euclidean_distance_examples():
    a = t([1.0, 2.0, 3.0])
    assert ops.euclidean_distance(a, t([1.0, 2.0, 3.0])).item() == 0.0
    assert ops.euclidean_distance(t([0.0, 0.0]), t([3.0, 4.0])).item() == 5.0
    # unit vectors at 60 degrees: distance^2 = 2 - 2cos(60) = 1
    u = t([1.0, 0.0])
    v = t([0.5, np.sqrt(3) / 2])
    assert ops.euclidean_distance(u, v).item() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ShapeError):
        ops.euclidean_distance(t([1.0]), t([1.0, 2.0]))


def test_log_softmax_matches_naive():
    rng = np.random.default_rng(8)
    for _ in range(5):
        logits = rng.normal(size=6)
        label = int(rng.integers(6))
        ours = -ops.log_softmax(t(logits)).data[label]
        assert ours == pytest.approx(oracles.softmax_nll_loops(logits, label), abs=1e-10)


def test_softmax_sums_to_one():
    out = ops.softmax(t([1.0, 2.0, 3.0])).data
    assert out.sum() == pytest.approx(1.0)
    assert np.all(out > 0)


def test_pad_edge_last_values():
    out = ops.pad_edge_last(t([[1.0, 2.0, 3.0]]), 2)
    np.testing.assert_array_equal(out.data, [[1, 1, 1, 2, 3, 3, 3]])


def test_edge_replicate_rows_values():
    out = ops.edge_replicate_rows(t([[1.0, 2.0], [3.0, 4.0]]), 4)
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4], [3, 4], [3, 4]])


def test_stack_rows_and_select():
    rows = [t([1.0, 2.0]), t([3.0, 4.0])]
    stacked = ops.stack_rows(rows)
    np.testing.assert_array_equal(stacked.data, [[1, 2], [3, 4]])
    assert ops.select(t([5.0, 6.0, 7.0]), 1).item() == 6.0
    with pytest.raises(ShapeError):
        ops.select(t([5.0]), 3)


# ---------------------------------------------------------------------------
# gradient correctness for every differentiable op (10 seeded points each)

GRAD_TOL = 1e-4
H = 1e-5


def _check_many(make_case, n_points=10):
    worst = 0.0
    for seed in range(n_points):
        point, fn = make_case(np.random.default_rng(100 + seed))
        worst = max(worst, grad_check(fn, point, h=H))
    assert worst < GRAD_TOL, f"max relative error {worst}"


def _proj(tensor):
    # deterministic projection to a scalar so grad_check sees mixed-sign weights
    size = tensor.data.size
    w = np.cos(np.arange(size, dtype=float) * 0.7 + 0.3).reshape(tensor.data.shape)
    return ops.reduce_sum(ops.mul(tensor, Tensor(w)))


def test_grad_conv2d():
    def case(rng):
        k = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        x = Tensor(rng.normal(size=(2, 7, 6)), requires_grad=True)
        which = rng.integers(3)
        if which == 0:
            return x, lambda p: _proj(ops.conv2d(p, k, b, (2, 1), (1, 2)))
        if which == 1:
            return k, lambda p: _proj(ops.conv2d(x, p, b, (2, 1), (1, 2)))
        return b, lambda p: _proj(ops.conv2d(x, k, p, (2, 1), (1, 2)))

    _check_many(case)


def test_grad_conv1d():
    def case(rng):
        k = Tensor(rng.normal(size=(3, 2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        x = Tensor(rng.normal(size=(2, 9)), requires_grad=True)
        which = rng.integers(3)
        if which == 0:
            return x, lambda p: _proj(ops.conv1d(p, k, b, 2, 1))
        if which == 1:
            return k, lambda p: _proj(ops.conv1d(x, p, b, 2, 1))
        return b, lambda p: _proj(ops.conv1d(x, k, p, 2, 1))

    _check_many(case)


def test_grad_transposed_conv1d():
    def case(rng):
        k = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        x = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
        if rng.integers(2):
            return x, lambda p: _proj(ops.transposed_conv1d(p, k, 2))
        return k, lambda p: _proj(ops.transposed_conv1d(x, p, 2))

    _check_many(case)


def test_grad_maxpool():
    def case(rng):
        if rng.integers(2):
            x = Tensor(rng.normal(size=(2, 9)), requires_grad=True)
            return x, lambda p: _proj(ops.maxpool(p, 2, 2))
        x = Tensor(rng.normal(size=(2, 7, 8)), requires_grad=True)
        return x, lambda p: _proj(ops.maxpool(p, (2, 2), (2, 2)))

    _check_many(case)


def test_grad_pointwise_and_vector_ops():
    def case(rng):
        n = 8
        x = Tensor(rng.normal(size=n), requires_grad=True)
        other = Tensor(rng.normal(size=n))
        w = Tensor(rng.normal(size=(4, n)))
        wb = Tensor(rng.normal(size=4))
        fns = [
            lambda p: _proj(ops.tanh(p)),
            lambda p: _proj(ops.sigmoid(p)),
            lambda p: _proj(ops.linear(p, w, wb)),
            lambda p: _proj(ops.l2_normalize(p)),
            lambda p: ops.euclidean_distance(p, other),
            lambda p: _proj(ops.log_softmax(p)),
            lambda p: _proj(ops.softmax(p)),
            lambda p: _proj(ops.add(p, other)),
            lambda p: _proj(ops.sub(p, other)),
            lambda p: _proj(ops.mul(p, other)),
            lambda p: _proj(ops.scale(p, -1.7)),
            lambda p: _proj(ops.positive_part(p)),
            lambda p: ops.reduce_mean(p),
            lambda p: ops.select(p, 3),
            lambda p: _proj(ops.crop_last(p, 2, 4)),
            lambda p: _proj(ops.pad_edge_last(p, 2)),
        ]
        return x, fns[int(rng.integers(len(fns)))]

    _check_many(case, n_points=16)


def test_grad_matrix_ops():
    def case(rng):
        x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        v = Tensor(rng.normal(size=6))
        fns = [
            lambda p: _proj(ops.transpose2d(p)),
            lambda p: _proj(ops.matvec(p, v)),
            lambda p: _proj(ops.flatten(p)),
            lambda p: _proj(ops.reduce_sum(p, axis=0)),
            lambda p: _proj(ops.reduce_mean(p, axis=1)),
            lambda p: _proj(ops.edge_replicate_rows(p, 6)),
        ]
        return x, fns[int(rng.integers(len(fns)))]

    _check_many(case, n_points=12)
