"""Tensor engine: op semantics, gradient correctness, determinism."""

import numpy as np
import pytest

from prunekit import tensor as T

from conftest import finite_difference_check


def tparam(rng, shape, scale=1.0, name=""):
    return T.Tensor(scale * rng.normal(size=shape).astype(np.float32),
                    requires_grad=True, name=name)


class TestConv2d:
    def test_zero_input_gives_bias(self, rng):
        x = T.Tensor(np.zeros((2, 3, 5, 5), dtype=np.float32))
        w = tparam(rng, (4, 3, 3, 3))
        b = T.Tensor(np.array([1.0, -2.0, 0.5, 3.0], dtype=np.float32), requires_grad=True)
        out = T.conv2d(x, w, b, stride=1, pad=0)
        for j in range(4):
            assert np.allclose(out.data[:, j], b.data[j])

    def test_ones_times_ones_sums_kernel(self):
        x = T.Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        w = T.Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        b = T.Tensor(np.zeros(1, dtype=np.float32))
        out = T.conv2d(x, w, b, stride=1, pad=0)
        assert out.shape == (1, 1, 1, 1)
        assert out.data.reshape(()) == pytest.approx(9.0)

    def test_matches_naive_loop_oracle(self, rng):
        x = rng.normal(size=(1, 2, 5, 5)).astype(np.float32)
        w = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
        b = rng.normal(size=(3,)).astype(np.float32)
        for stride, pad in [(1, 0), (1, 1), (2, 1)]:
            got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride, pad).data
            want = naive_conv(x, w, b, stride, pad)
            assert np.max(np.abs(got - want)) <= 1e-6

    def test_linearity_without_bias(self, rng):
        xa = rng.normal(size=(1, 2, 6, 6)).astype(np.float32)
        xb = rng.normal(size=(1, 2, 6, 6)).astype(np.float32)
        w = T.Tensor(rng.normal(size=(3, 2, 3, 3)).astype(np.float32))
        lhs = T.conv2d(T.Tensor(2.0 * xa + 3.0 * xb), w, None, 1, 1).data
        rhs = 2.0 * T.conv2d(T.Tensor(xa), w, None, 1, 1).data \
            + 3.0 * T.conv2d(T.Tensor(xb), w, None, 1, 1).data
        assert np.max(np.abs(lhs - rhs)) <= 1e-5

    def test_shape_mismatch_names_dimension(self, rng):
        x = T.Tensor(np.zeros((1, 3, 5, 5), dtype=np.float32))
        w = tparam(rng, (4, 2, 3, 3))
        with pytest.raises(T.ShapeMismatch, match="channels"):
            T.conv2d(x, w, None, 1, 0)

    def test_kernel_larger_than_padded_input(self, rng):
        x = T.Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32))
        w = tparam(rng, (1, 1, 5, 5))
        with pytest.raises(T.ShapeMismatch, match="kernel"):
            T.conv2d(x, w, None, 1, 0)


def naive_conv(x, w, b, stride, pad):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), dtype=np.float64)
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, oh, ow), dtype=np.float64)
    for ni in range(n):
        for o in range(cout):
            for y in range(oh):
                for xcol in range(ow):
                    acc = 0.0
                    for c in range(cin):
                        for ky in range(k):
                            for kx in range(k):
                                acc += w[o, c, ky, kx] * xp[ni, c, y * stride + ky, xcol * stride + kx]
                    out[ni, o, y, xcol] = acc + (b[o] if b is not None else 0.0)
    return out.astype(np.float32)


class TestDense:
    def test_identity(self, rng):
        x = rng.normal(size=(4, 5)).astype(np.float32)
        out = T.dense(T.Tensor(x), T.Tensor(np.eye(5, dtype=np.float32)),
                      T.Tensor(np.zeros(5, dtype=np.float32)))
        assert np.allclose(out.data, x)

    def test_zero_weight_gives_bias_rows(self, rng):
        x = rng.normal(size=(3, 4)).astype(np.float32)
        b = np.array([1.0, 2.0], dtype=np.float32)
        out = T.dense(T.Tensor(x), T.Tensor(np.zeros((2, 4), dtype=np.float32)), T.Tensor(b))
        assert np.allclose(out.data, np.tile(b, (3, 1)))

    def test_matches_naive_dot(self, rng):
        x = rng.normal(size=(3, 6)).astype(np.float32)
        w = rng.normal(size=(4, 6)).astype(np.float32)
        b = rng.normal(size=(4,)).astype(np.float32)
        got = T.dense(T.Tensor(x), T.Tensor(w), T.Tensor(b)).data
        want = np.array([[float(np.dot(w[j].astype(np.float64), x[i].astype(np.float64))) + b[j]
                          for j in range(4)] for i in range(3)], dtype=np.float32)
        assert np.max(np.abs(got - want)) <= 1e-6


class TestPointwiseAndPool:
    def test_relu(self):
        out = T.relu(T.Tensor(np.array([-1.0, 0.0, 2.0], dtype=np.float32)))
        assert np.allclose(out.data, [0.0, 0.0, 2.0])

    def test_global_avg_pool_constant_channel(self):
        x = np.full((1, 2, 4, 4), 3.0, dtype=np.float32)
        out = T.global_avg_pool(T.Tensor(x))
        assert out.shape == (1, 2)
        assert np.allclose(out.data, 3.0)

    def test_add_inverse_is_zero(self, rng):
        x = rng.normal(size=(2, 3)).astype(np.float32)
        out = T.add(T.Tensor(x), T.Tensor(-x))
        assert np.allclose(out.data, 0.0)

    def test_add_shape_mismatch(self):
        with pytest.raises(T.ShapeMismatch):
            T.add(T.Tensor(np.zeros((2, 3), dtype=np.float32)),
                  T.Tensor(np.zeros((3, 2), dtype=np.float32)))

    def test_max_pool_window_semantics(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        out = T.max_pool(T.Tensor(x), 2, 2)
        assert np.allclose(out.data.reshape(2, 2), [[5, 7], [13, 15]])

    def test_avg_pool_counts_padding(self):
        x = np.ones((1, 1, 2, 2), dtype=np.float32)
        out = T.avg_pool(T.Tensor(x), 2, 2, pad=1)
        # corner windows hold one real pixel out of four
        assert np.allclose(out.data.reshape(2, 2), 0.25)

    def test_empty_window_rejected(self):
        with pytest.raises(T.ShapeMismatch):
            T.max_pool(T.Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32)), 5, 1)

    def test_channel_affine_requires_matching_length(self, rng):
        x = T.Tensor(rng.normal(size=(1, 3, 2, 2)).astype(np.float32))
        with pytest.raises(T.ShapeMismatch):
            T.channel_affine(x, T.Tensor(np.ones(2, dtype=np.float32)),
                             T.Tensor(np.zeros(2, dtype=np.float32)))


class TestBackward:
    def test_sum_gradient_is_ones(self, rng):
        x = tparam(rng, (3, 4))
        tape = T.Tape()
        with T.tape_scope(tape):
            loss = T.sum_all(x)
        T.backward(tape, loss)
        assert np.allclose(x.grad, 1.0)

    def test_half_square_gradient_is_x(self, rng):
        x = tparam(rng, (5,))
        tape = T.Tape()
        with T.tape_scope(tape):
            loss = T.scale(T.sum_all(T.mul(x, x)), 0.5)
        T.backward(tape, loss)
        assert np.allclose(x.grad, x.data, atol=1e-6)

    def test_tape_consumed_once(self, rng):
        x = tparam(rng, (2,))
        tape = T.Tape()
        with T.tape_scope(tape):
            loss = T.sum_all(x)
        T.backward(tape, loss)
        with pytest.raises(T.EngineError, match="consumed"):
            T.backward(tape, loss)

    def test_foreign_loss_rejected(self, rng):
        x = tparam(rng, (2,))
        tape = T.Tape()
        with T.tape_scope(tape):
            T.sum_all(x)
        other = T.Tensor(np.zeros((), dtype=np.float32))
        with pytest.raises(T.EngineError, match="not produced"):
            T.backward(tape, other)

    def test_toy_cnn_against_finite_differences(self, rng):
        x = T.Tensor(rng.normal(size=(2, 2, 6, 5)).astype(np.float32))
        w1 = tparam(rng, (3, 2, 3, 3), 0.5, "w1")
        b1 = tparam(rng, (3,), 0.1, "b1")
        gamma = tparam(rng, (3,), 1.0, "gamma")
        beta = tparam(rng, (3,), 0.2, "beta")
        w2 = tparam(rng, (4, 3), 0.5, "w2")
        b2 = tparam(rng, (4,), 0.1, "b2")
        labels = np.array([0, 3])

        def build():
            h = T.conv2d(x, w1, b1, stride=2, pad=1)
            h = T.channel_affine(h, gamma, beta)
            h = T.relu(h)
            h = T.max_pool(h, 2, 1)
            e = T.global_avg_pool(h)
            logits = T.dense(e, w2, b2)
            return T.cross_entropy_logits(logits, labels)

        finite_difference_check(build, [w1, b1, gamma, beta, w2, b2])


GRAD_CASES = {
    "conv2d": lambda rng: _conv_case(rng),
    "dense": lambda rng: _dense_case(rng),
    "relu_mul_add": lambda rng: _pointwise_case(rng),
    "pools": lambda rng: _pool_case(rng),
    "embedding_ops": lambda rng: _embedding_case(rng),
    "softagg_logsumexp": lambda rng: _soft_case(rng),
    "normalize_slice_concat": lambda rng: _norm_case(rng),
}


def _conv_case(rng):
    x = T.Tensor(rng.normal(size=(2, 2, 5, 4)).astype(np.float32))
    w = tparam(rng, (3, 2, 3, 3), 0.4)
    b = tparam(rng, (3,), 0.1)
    return lambda: T.mean_all(T.mul(*[T.conv2d(x, w, b, 1, 1)] * 2)), [w, b]


def _dense_case(rng):
    x = T.Tensor(rng.normal(size=(3, 4)).astype(np.float32))
    w = tparam(rng, (2, 4), 0.5)
    b = tparam(rng, (2,), 0.1)
    return lambda: T.mean_all(T.mul(*[T.dense(x, w, b)] * 2)), [w, b]


def _pointwise_case(rng):
    a = tparam(rng, (4, 3))
    b = tparam(rng, (4, 3))
    return (lambda: T.mean_all(T.relu(T.add(T.mul(a, b), T.scale(a, -0.5))))), [a, b]


def _pool_case(rng):
    x = tparam(rng, (1, 2, 5, 5), 1.0)
    return (lambda: T.mean_all(T.add(
        T.global_avg_pool(T.max_pool(x, 2, 2)),
        T.global_avg_pool(T.avg_pool(x, 3, 1, pad=1))))), [x]


def _embedding_case(rng):
    f = tparam(rng, (6, 4))
    labels = np.array([0, 0, 1, 1, 2, 2])

    def build():
        d2 = T.pairwise_sqdist(f)
        d = T.sqrt_safe(d2)
        mu = T.class_means(f, labels, 3)
        dc = T.cross_sqdist(f, mu)
        pick = T.gather2d(d, np.array([0, 2, 4]), np.array([1, 3, 5]))
        return T.add(T.mean_all(pick), T.mean_all(dc))

    return build, [f]


def _soft_case(rng):
    f = tparam(rng, (6, 3))
    labels = np.array([0, 0, 1, 1, 2, 2])
    pos = (labels[:, None] == labels[None, :]) & ~np.eye(6, dtype=bool)
    neg = labels[:, None] != labels[None, :]

    def build():
        d = T.sqrt_safe(T.pairwise_sqdist(f))
        sp = T.masked_soft_agg(d, pos, +1.0, 0.7)
        sn = T.masked_soft_agg(d, neg, -1.0, 0.7)
        lse = T.row_logsumexp(T.scale(T.pairwise_sqdist(f), -0.3))
        return T.add(T.mean_all(T.relu(T.add_const(T.sub(sp, sn), 0.4))), T.mean_all(lse))

    return build, [f]


def _norm_case(rng):
    x = tparam(rng, (4, 6))
    labels = np.array([0, 1, 2, 0])

    def build():
        n = T.rows_l2_normalize(x)
        left = T.slice_cols(n, 0, 3)
        right = T.slice_cols(n, 3, 6)
        both = T.concat_cols([T.scale(left, 1.5), right])
        inv = T.recip(T.add_const(T.mul(both, both), 1.0))
        s = T.scale_by(inv, T.mean_all(x))
        return T.cross_entropy_logits(s, labels)

    return build, [x]


class TestGradientSuite:
    """Finite-difference checks over many seeded random instances."""

    @pytest.mark.parametrize("case", sorted(GRAD_CASES))
    @pytest.mark.parametrize("seed", range(4))
    def test_gradients(self, case, seed):
        build, params = GRAD_CASES[case](np.random.default_rng(100 + seed))
        finite_difference_check(build, params)


class TestSgd:
    def test_zero_lr_keeps_params(self, rng):
        p = tparam(rng, (3,))
        before = p.data.copy()
        p.grad = np.ones(3, dtype=np.float32)
        T.sgd_step([p], lr=0.0)
        assert np.array_equal(p.data, before)

    def test_plain_step_decreases_by_lr_grad(self, rng):
        p = T.Tensor(np.array([1.0, 2.0], dtype=np.float32), requires_grad=True)
        p.grad = np.array([0.25, -0.5], dtype=np.float32)
        T.sgd_step([p], lr=0.1, momentum=0.0, weight_decay=0.0)
        assert np.allclose(p.data, [1.0 - 0.025, 2.0 + 0.05], atol=1e-7)

    def test_momentum_matches_hand_unroll(self):
        p = T.Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
        g1, g2, lr, mom = 0.3, -0.2, 0.1, 0.9
        p.grad = np.array([g1], dtype=np.float32)
        T.sgd_step([p], lr, mom)
        p.grad = np.array([g2], dtype=np.float32)
        T.sgd_step([p], lr, mom)
        v1 = g1
        x1 = 1.0 - lr * v1
        v2 = mom * v1 + g2
        x2 = x1 - lr * v2
        assert abs(float(p.data[0]) - x2) <= 1e-7

    def test_missing_gradient_is_an_error(self, rng):
        p = tparam(rng, (2,))
        with pytest.raises(T.EngineError, match="no gradient"):
            T.sgd_step([p], lr=0.1)

    def test_update_mask_freezes_entries(self):
        p = T.Tensor(np.array([1.0, 1.0], dtype=np.float32), requires_grad=True)
        p.update_mask = np.array([1.0, 0.0], dtype=np.float32)
        p.grad = np.array([1.0, 1.0], dtype=np.float32)
        T.sgd_step([p], lr=0.5, momentum=0.0)
        assert np.allclose(p.data, [0.5, 1.0])


class TestEngineContracts:
    def test_non_finite_raises(self):
        x = T.Tensor(np.array([1e20], dtype=np.float32))
        with pytest.raises(T.NonFiniteValue):
            T.mul(x, x)  # overflows float32

    def test_determinism_bit_identical(self):
        def run():
            rng = np.random.default_rng(42)
            x = T.Tensor(rng.normal(size=(2, 3, 8, 8)).astype(np.float32))
            w = T.Tensor(rng.normal(size=(4, 3, 3, 3)).astype(np.float32) * 0.3)
            out = T.conv2d(x, w, None, 2, 1)
            return T.global_avg_pool(out).data.tobytes()

        assert run() == run()

    def test_retain_grad_exposes_intermediate(self, rng):
        x = tparam(rng, (2, 2))
        tape = T.Tape()
        with T.tape_scope(tape):
            mid = T.mul(x, x)
            mid.retain_grad = True
            loss = T.sum_all(mid)
        T.backward(tape, loss)
        assert mid.grad is not None
        assert np.allclose(mid.grad, 1.0)
