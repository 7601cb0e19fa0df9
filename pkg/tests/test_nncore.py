import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tftransformer.nncore import (
    Adam,
    AdamState,
    Checkpoint,
    ConvSpec,
    FormatError,
    NumericError,
    ShapeError,
    Tensor,
    adam_step,
    debug_numerics,
    functional as F,
    no_grad,
)
from tftransformer.nncore.checkpoint import deserialize_checkpoint, serialize_checkpoint
from tftransformer.nncore.gradcheck import check_gradients, projected

SEEDS = range(5)
TOL = 1e-4


def rand(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


# ----------------------------------------------------------------------
# naive oracles


def naive_conv2d(x, w, b, stride, padding):
    B, C, H, W = x.shape
    O, _, KH, KW = w.shape
    sh, sw = stride
    ph, pw = padding
    xp = np.zeros((B, C, H + 2 * ph, W + 2 * pw))
    xp[:, :, ph : ph + H, pw : pw + W] = x
    Ho = (H + 2 * ph - KH) // sh + 1
    Wo = (W + 2 * pw - KW) // sw + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[o]
                    for c in range(C):
                        for ki in range(KH):
                            for kj in range(KW):
                                acc += xp[n, c, i * sh + ki, j * sw + kj] * w[o, c, ki, kj]
                    out[n, o, i, j] = acc
    return out


def naive_batchnorm(x, gamma, beta, eps):
    out = np.empty_like(x)
    for c in range(x.shape[1]):
        vals = x[:, c].ravel()
        mean = sum(vals) / len(vals)
        var = sum((v - mean) ** 2 for v in vals) / len(vals)
        out[:, c] = (x[:, c] - mean) / math.sqrt(var + eps) * gamma[c] + beta[c]
    return out


def naive_layernorm(x, gamma, beta, eps):
    out = np.empty_like(x)
    for idx in np.ndindex(x.shape[:-1]):
        row = x[idx]
        mean = sum(row) / len(row)
        var = sum((v - mean) ** 2 for v in row) / len(row)
        out[idx] = [(v - mean) / math.sqrt(var + eps) * g + bb for v, g, bb in zip(row, gamma, beta)]
    return out


# ----------------------------------------------------------------------
# autodiff primitives


class TestTensor:
    def test_broadcast_add_grad(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        (a + b).sum().backward()
        np.testing.assert_array_equal(b.grad, [2, 2, 2])
        np.testing.assert_array_equal(a.grad, np.ones((2, 3)))

    def test_shared_subexpression(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = x * x
        (y + y).sum().backward()
        assert x.grad[0] == 12.0

    @pytest.mark.parametrize("seed", SEEDS)
    def test_primitive_grads(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rand(rng, 2, 3, 4), rand(rng, 4, 5)
        c = Tensor(rng.uniform(0.5, 2.0, (2, 3, 4)), requires_grad=True)

        def fn():
            h = F.matmul(a * c - a / c, b).transpose(0, 2, 1).reshape(2, 15)
            return projected(h.exp() * 0.1 + (c.log() ** 2).mean(axis=-1).sum(), seed)

        assert max(check_gradients(fn, [a, b, c])) < TOL

    def test_no_grad(self):
        a = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            out = a * 2
        assert not out.requires_grad

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_debug_numerics(self):
        a = Tensor(np.array([0.0]))
        with debug_numerics():
            with pytest.raises(NumericError):
                a.log()
        with np.errstate(divide="ignore"):
            a.log()  # off by default

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            F.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# ----------------------------------------------------------------------
# conv2d


class TestConv2d:
    def test_table2_shapes(self):
        x = Tensor(np.zeros((1, 1, 80, 80)))
        for spec, after_one, after_two in [
            (ConvSpec(64, (5, 1), (2, 1), (2, 0)), (40, 80), (20, 80)),
            (ConvSpec(64, (1, 5), (1, 2), (0, 2)), (80, 40), (80, 20)),
            (ConvSpec(64, (5, 5), (2, 2), (2, 2)), (40, 40), (20, 20)),
        ]:
            w1 = Tensor(np.zeros((64, 1) + spec.kernel))
            w2 = Tensor(np.zeros((64, 64) + spec.kernel))
            h = F.conv2d(x, w1, None, spec.stride, spec.padding)
            assert h.shape == (1, 64) + after_one
            assert F.conv2d(h, w2, None, spec.stride, spec.padding).shape == (1, 64) + after_two
            assert spec.output_shape(80, 80) == after_one

    @given(
        n=st.integers(1, 40),
        k=st.integers(1, 7),
        s=st.integers(1, 3),
        p=st.integers(0, 3),
    )
    @settings(max_examples=100, deadline=None)
    def test_shape_formula(self, n, k, s, p):
        if n + 2 * p < k:
            return
        out = F.conv2d(Tensor(np.zeros((1, 1, n, 3))), Tensor(np.zeros((1, 1, k, 1))), None, (s, 1), (p, 0))
        assert out.shape[2] == (n + 2 * p - k) // s + 1

    def test_identity_1x1(self):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4, 5)))
        w = Tensor(np.eye(3).reshape(3, 3, 1, 1))
        out = F.conv2d(x, w, Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 1, 6, 6))
        w = rng.standard_normal((1, 1, 3, 3))
        b = rng.standard_normal(1)
        out = F.conv2d(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, (1, 1), (0, 0)), rtol=0, atol=1e-10)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matches_naive_oracle_strided(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((4, 3, 3, 2))
        b = rng.standard_normal(4)
        out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), (2, 1), (1, 1))
        np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, (2, 1), (1, 1)), rtol=0, atol=1e-9)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        x, w, b = rand(rng, 2, 2, 7, 6), rand(rng, 3, 2, 3, 2), rand(rng, 3)
        errs = check_gradients(lambda: projected(F.conv2d(x, w, b, (2, 1), (1, 1)), seed), [x, w, b])
        assert max(errs) < TOL

    def test_bad_channels(self):
        with pytest.raises(ShapeError):
            F.conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))), None)

    def test_kernel_too_big(self):
        with pytest.raises(ShapeError):
            F.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), None)


# ----------------------------------------------------------------------
# batch norm


class TestBatchNorm:
    def _bn(self, x, gamma, beta, training=True, rm=None, rv=None):
        c = x.shape[1]
        rm = np.zeros(c) if rm is None else rm
        rv = np.ones(c) if rv is None else rv
        return F.batch_norm2d(x, gamma, beta, rm, rv, training)

    def test_constant_input(self):
        x = Tensor(np.full((2, 3, 4, 4), 5.0))
        out = self._bn(x, Tensor(np.ones(3)), Tensor(np.full(3, 0.3)))
        np.testing.assert_allclose(out.data, 0.3, atol=1e-12)

    def test_normalized_moments(self):
        x = Tensor(np.random.default_rng(0).normal(3, 2, (4, 3, 5, 5)))
        out = self._bn(x, Tensor(np.ones(3)), Tensor(np.zeros(3))).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-5)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matches_two_pass_oracle(self, seed):
        rng = np.random.default_rng(seed)
        x, g, b = rng.standard_normal((3, 2, 4, 3)), rng.standard_normal(2), rng.standard_normal(2)
        out = self._bn(Tensor(x), Tensor(g), Tensor(b)).data
        np.testing.assert_allclose(out, naive_batchnorm(x, g, b, 1e-5), rtol=0, atol=1e-9)

    def test_running_stats_and_eval(self):
        rng = np.random.default_rng(1)
        x = rng.normal(2, 3, (4, 2, 3, 3))
        rm, rv = np.zeros(2), np.ones(2)
        self._bn(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), True, rm, rv)
        n = 4 * 9
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))
        out = self._bn(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), False, rm, rv).data
        expected = (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients_train(self, seed):
        rng = np.random.default_rng(seed)
        x, g, b = rand(rng, 3, 2, 4, 3), rand(rng, 2), rand(rng, 2)
        errs = check_gradients(lambda: projected(self._bn(x, g, b), seed), [x, g, b])
        assert max(errs) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients_eval(self, seed):
        rng = np.random.default_rng(seed)
        x, g, b = rand(rng, 3, 2, 4, 3), rand(rng, 2), rand(rng, 2)
        rm, rv = rng.standard_normal(2), rng.uniform(0.5, 2, 2)
        errs = check_gradients(lambda: projected(self._bn(x, g, b, False, rm, rv), seed), [x, g, b])
        assert max(errs) < TOL

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            self._bn(Tensor(np.zeros((0, 2, 3, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


# ----------------------------------------------------------------------
# relu, linear, layer norm


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(F.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0, 0, 2])
        assert np.all(F.relu(Tensor(-np.ones(5))).data == 0)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient_mask(self, seed):
        rng = np.random.default_rng(seed)
        x = rand(rng, 4, 5)
        F.relu(x).sum().backward()
        np.testing.assert_array_equal(x.grad, (x.data > 0).astype(float))
        assert max(check_gradients(lambda: projected(F.relu(x), seed), [x])) < TOL

    def test_subgradient_at_zero(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        F.relu(x).sum().backward()
        np.testing.assert_array_equal(x.grad, 0)


class TestLinear:
    def test_identity(self):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3)))
        np.testing.assert_array_equal(F.linear(x, Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x.data)

    def test_hand_example(self):
        out = F.linear(Tensor(np.array([1.0, 2.0])), Tensor(np.array([[1.0, 1.0], [0.0, 1.0]])), Tensor(np.array([0.5, 0])))
        np.testing.assert_array_equal(out.data, [3.5, 2.0])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        x, w, b = rand(rng, 3, 4), rand(rng, 2, 4), rand(rng, 2)
        assert max(check_gradients(lambda: projected(F.linear(x, w, b), seed), [x, w, b])) < TOL

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            F.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))


class TestLayerNorm:
    def test_hand_example(self):
        out = F.layer_norm(Tensor(np.array([1.0, 2.0, 3.0])), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, [-1.2247, 0, 1.2247], atol=1e-3)

    def test_constant_vector(self):
        beta = np.array([0.1, -0.2, 0.3, 0.4])
        out = F.layer_norm(Tensor(np.full(4, 7.0)), Tensor(np.ones(4)), Tensor(beta))
        np.testing.assert_allclose(out.data, beta, atol=1e-12)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        x, g, b = rng.standard_normal((2, 3, 5)), rng.standard_normal(5), rng.standard_normal(5)
        out = F.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
        np.testing.assert_allclose(out, naive_layernorm(x, g, b, 1e-5), rtol=0, atol=1e-9)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        x, g, b = rand(rng, 2, 3, 5), rand(rng, 5), rand(rng, 5)
        assert max(check_gradients(lambda: projected(F.layer_norm(x, g, b), seed), [x, g, b])) < TOL


# ----------------------------------------------------------------------
# attention and feed-forward


def mha_weights(rng, e):
    return [rand(rng, e, e, scale=0.7) if i % 2 == 0 else rand(rng, e, scale=0.3) for i in range(8)]


class TestAttention:
    def test_identical_keys_uniform(self):
        rng = np.random.default_rng(0)
        e, heads = 4, 2
        weights = mha_weights(rng, e)
        q = Tensor(rng.standard_normal((1, 3, e)))
        kv = Tensor(np.tile(rng.standard_normal((1, 1, e)), (1, 5, 1)))
        out, attn = F.multi_head_attention(q, kv, kv, heads, *weights)
        np.testing.assert_allclose(attn, 1 / 5, atol=1e-12)
        wv, bv, wo, bo = weights[4].data, weights[5].data, weights[6].data, weights[7].data
        mean_value = (kv.data[0] @ wv.T + bv).mean(axis=0)
        expected = mean_value @ wo.T + bo
        np.testing.assert_allclose(out.data[0], np.tile(expected, (3, 1)), atol=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_rows_stochastic(self, seed):
        rng = np.random.default_rng(seed)
        q, k = Tensor(rng.standard_normal((2, 6, 8)) * 3), Tensor(rng.standard_normal((2, 4, 8)) * 3)
        _, attn = F.multi_head_attention(q, k, k, 4, *mha_weights(rng, 8))
        assert attn.shape == (2, 4, 6, 4)
        assert np.all(attn >= 0)
        np.testing.assert_allclose(attn.sum(axis=-1), 1, atol=1e-6)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_self_attention_gradients(self, seed):
        rng = np.random.default_rng(seed)
        x = rand(rng, 1, 3, 4)
        weights = mha_weights(rng, 4)
        errs = check_gradients(lambda: projected(F.multi_head_attention(x, x, x, 2, *weights)[0], seed), [x, *weights])
        assert max(errs) < TOL
        # softmax ignores a shift shared by all keys, so the key bias gets no gradient
        np.testing.assert_allclose(weights[3].grad, 0, atol=1e-12)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_cross_attention_gradients(self, seed):
        rng = np.random.default_rng(seed)
        q, k, v = rand(rng, 1, 3, 4), rand(rng, 1, 3, 4), rand(rng, 1, 3, 4)
        weights = mha_weights(rng, 4)
        errs = check_gradients(
            lambda: projected(F.multi_head_attention(q, k, v, 2, *weights)[0], seed), [q, k, v, *weights]
        )
        assert max(errs) < TOL

    def test_dim_errors(self):
        rng = np.random.default_rng(0)
        w = mha_weights(rng, 4)
        with pytest.raises(ShapeError):
            F.multi_head_attention(Tensor(np.ones((1, 3, 4))), Tensor(np.ones((1, 3, 5))), Tensor(np.ones((1, 3, 5))), 2, *w)
        with pytest.raises(ShapeError):
            F.multi_head_attention(Tensor(np.ones((1, 3, 4))), Tensor(np.ones((1, 3, 4))), Tensor(np.ones((1, 3, 4))), 3, *w)


class TestFeedForward:
    def test_zero_weights(self):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4)))
        z = lambda *s: Tensor(np.zeros(s))
        assert np.all(F.feed_forward(x, z(8, 4), z(8), z(4, 8), z(4)).data == 0)

    def test_shape(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 80, 20)))
        out = F.feed_forward(x, Tensor(rng.standard_normal((512, 20))), Tensor(np.zeros(512)),
                             Tensor(rng.standard_normal((20, 512))), Tensor(np.zeros(20)))
        assert out.shape == (2, 80, 20)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        x, w1, b1, w2, b2 = rand(rng, 2, 3, 4), rand(rng, 6, 4), rand(rng, 6), rand(rng, 4, 6), rand(rng, 4)
        errs = check_gradients(lambda: projected(F.feed_forward(x, w1, b1, w2, b2), seed), [x, w1, b1, w2, b2])
        assert max(errs) < TOL


# ----------------------------------------------------------------------
# pooling, softmax, loss


class TestChannelMean:
    def test_single_channel(self):
        x = np.random.default_rng(0).standard_normal((2, 1, 3, 4))
        np.testing.assert_array_equal(F.channel_mean(Tensor(x)).data, x[:, 0])

    def test_two_channels(self):
        assert F.channel_mean(Tensor(np.array([1.0, 3.0]).reshape(1, 2, 1, 1))).data.item() == 2.0

    def test_loop_oracle(self):
        x = np.random.default_rng(1).standard_normal((2, 64, 20, 80))
        out = F.channel_mean(Tensor(x)).data
        oracle = np.zeros((2, 20, 80))
        for b in range(2):
            for c in range(64):
                oracle[b] += x[b, c]
        oracle /= 64
        np.testing.assert_allclose(out, oracle, rtol=1e-14, atol=1e-14)


class TestMeanStdPool:
    def test_hand_example(self):
        out = F.mean_std_pool(Tensor(np.array([[[1.0, 3.0], [2.0, 2.0]]])))
        np.testing.assert_allclose(out.data, [[1.5, 2.5, 0.5, 0.5]])

    def test_constant_over_f(self):
        y = np.tile(np.random.default_rng(0).standard_normal((2, 1, 5)), (1, 4, 1))
        assert np.all(F.mean_std_pool(Tensor(y)).data[:, 5:] == 0)

    def test_output_length(self):
        assert F.mean_std_pool(Tensor(np.zeros((3, 20, 20)))).shape == (3, 40)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        y = rand(rng, 2, 5, 3)
        assert max(check_gradients(lambda: projected(F.mean_std_pool(y), seed), [y])) < TOL


class TestSoftmaxCrossEntropy:
    def test_uniform(self):
        np.testing.assert_allclose(F.softmax(Tensor(np.zeros(4))).data, 0.25)

    def test_shift_invariance(self):
        x = np.random.default_rng(0).standard_normal((3, 5))
        np.testing.assert_allclose(F.softmax(Tensor(x)).data, F.softmax(Tensor(x + 123.0)).data, atol=1e-9)

    @given(st.lists(st.integers(-50, 50), min_size=2, max_size=10, unique=True))
    @settings(max_examples=100, deadline=None)
    def test_argmax_preserved(self, xs):
        x = np.array(xs, dtype=float)
        assert F.softmax(Tensor(x)).data.argmax() == x.argmax()

    def test_uniform_loss(self):
        loss = F.cross_entropy(Tensor(np.full((2, 4), 0.25)), np.eye(4)[[0, 3]])
        assert float(loss.data) == pytest.approx(math.log(4), abs=1e-12)

    def test_perfect_loss(self):
        assert float(F.cross_entropy(Tensor(np.eye(3)), np.eye(3)).data) == 0.0

    def test_invalid_onehot(self):
        with pytest.raises(ValueError):
            F.cross_entropy(Tensor(np.full((1, 3), 1 / 3)), np.array([[1.0, 1.0, 0.0]]))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_fused_backward(self, seed):
        rng = np.random.default_rng(seed)
        logits = rand(rng, 4, 5)
        z = np.eye(5)[rng.integers(0, 5, 4)]
        loss = F.cross_entropy(F.softmax(logits), z)
        loss.backward()
        p = F.softmax(Tensor(logits.data)).data
        np.testing.assert_allclose(logits.grad, (p - z) / 4, atol=1e-15)
        assert max(check_gradients(lambda: F.cross_entropy(F.softmax(logits), z), [logits])) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_softmax_gradients(self, seed):
        rng = np.random.default_rng(seed)
        x = rand(rng, 3, 4)
        assert max(check_gradients(lambda: projected(F.softmax(x), seed), [x])) < TOL

    def test_probability_route_gradient(self):
        rng = np.random.default_rng(0)
        p = Tensor(rng.dirichlet(np.ones(4), size=3), requires_grad=True)
        z = np.eye(4)[[0, 1, 2]]
        assert max(check_gradients(lambda: F.cross_entropy(p, z), [p])) < TOL


# ----------------------------------------------------------------------
# Adam


class TestAdam:
    def test_first_step_is_signed_lr(self):
        rng = np.random.default_rng(0)
        p = rng.standard_normal(10)
        g = rng.standard_normal(10)
        before = p.copy()
        adam_step({"p": p}, {"p": g}, AdamState(), lr=0.001)
        np.testing.assert_allclose(p - before, -0.001 * np.sign(g), atol=0.001 * 1e-6)

    def test_zero_gradient_is_noop(self):
        p = np.array([1.0, -2.0])
        state = AdamState()
        for _ in range(5):
            adam_step({"p": p}, {"p": np.zeros(2)}, state)
        np.testing.assert_array_equal(p, [1.0, -2.0])

    @staticmethod
    def scalar_adam(theta, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
        m = v = 0.0
        out = []
        for t in range(1, steps + 1):
            g = grad_fn(theta)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
            out.append(theta)
        return out

    def test_quadratic_decreases(self):
        theta = np.array([1.0])
        state = AdamState()
        values = [1.0]
        expected = self.scalar_adam(1.0, lambda t: 2 * t, 3, 0.1)
        for i in range(3):
            adam_step({"t": theta}, {"t": 2 * theta.copy()}, state, lr=0.1)
            assert theta[0] == pytest.approx(expected[i], rel=1e-12)
            values.append(theta[0] ** 2)
        assert values[0] > values[1] > values[2] > values[3]

    def test_bias_correction_second_step(self):
        p = np.array([0.0])
        state = AdamState()
        grads = iter([1.0, 3.0])
        expected = self.scalar_adam(0.0, lambda _: next(grads), 2, 1.0)
        adam_step({"p": p}, {"p": np.array([1.0])}, state, lr=1.0)
        adam_step({"p": p}, {"p": np.array([3.0])}, state, lr=1.0)
        assert p[0] == pytest.approx(expected[1], rel=1e-12)


# ----------------------------------------------------------------------
# checkpoint format


class TestCheckpointFormat:
    def _ckpt(self):
        rng = np.random.default_rng(0)
        params = {"a.w": rng.standard_normal((3, 4)).astype(np.float32), "a.rm": np.zeros(3, np.float32)}
        adam = AdamState(7, {"a.w": rng.standard_normal((3, 4)).astype(np.float32)},
                         {"a.w": rng.uniform(0, 1, (3, 4)).astype(np.float32)})
        return Checkpoint(params, {"a.w": True, "a.rm": False}, adam, {"epoch": 3})

    def test_roundtrip(self):
        buf = serialize_checkpoint(self._ckpt())
        assert buf[:4] == b"TFTC"
        back = deserialize_checkpoint(buf)
        assert back.adam.step == 7 and back.meta == {"epoch": 3}
        assert back.trainable == {"a.w": True, "a.rm": False}
        assert serialize_checkpoint(back) == buf

    def test_corruption_detected(self):
        buf = bytearray(serialize_checkpoint(self._ckpt()))
        buf[len(buf) // 2] ^= 0xFF
        with pytest.raises(FormatError):
            deserialize_checkpoint(bytes(buf))

    def test_truncation_and_version(self):
        buf = serialize_checkpoint(self._ckpt())
        with pytest.raises(FormatError):
            deserialize_checkpoint(buf[:-10])
        bad = bytearray(buf)
        bad[4] = 9
        import struct
        import zlib

        body = bytes(bad[:-4])
        with pytest.raises(FormatError, match="version"):
            deserialize_checkpoint(body + struct.pack("<I", zlib.crc32(body)))


def test_adam_class_skips_params_without_grad():
    from tftransformer.nncore import Parameter

    p = Parameter(np.ones(3))
    opt = Adam([("p", p)], lr=0.1)
    opt.step()
    np.testing.assert_array_equal(p.data, 1.0)
