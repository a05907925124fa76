import numpy as np
import pytest

from mceend import autograd as ag
from mceend import nn
from mceend.autograd import ShapeError, Tensor, grad_check, mul, sum_all

from oracles import brute_force_attention, heads_from_params


def rng_for(seed):
    return np.random.default_rng(seed)


class TestLayerNorm:
    def test_constant_column_maps_to_zero(self):
        p = nn.init_layer_norm(4)
        out = nn.layer_norm(Tensor(np.full((4, 3), 2.5)), p)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-9)

    def test_already_standardized_column(self):
        p = nn.init_layer_norm(2, eps=1e-12)
        out = nn.layer_norm(Tensor([[1.0], [-1.0]]), p)
        np.testing.assert_allclose(out.data, [[1.0], [-1.0]], atol=1e-6)

    def test_output_statistics(self):
        p = nn.init_layer_norm(16)
        x = Tensor(rng_for(0).normal(2.0, 10.0, size=(16, 5)))
        out = nn.layer_norm(x, p).data
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.var(axis=0), 1.0, atol=1e-6)

    def test_gradient(self):
        rng = rng_for(1)
        p = nn.init_layer_norm(5)
        p.gain.data[:] = rng.uniform(0.5, 1.5, size=(5, 1))
        p.bias.data[:] = rng.normal(size=(5, 1))
        x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(5, 4)))
        report = grad_check(lambda: sum_all(mul(nn.layer_norm(x, p), w)), [x, p.gain, p.bias])
        assert report.passed, report

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            nn.layer_norm(Tensor(np.zeros((3, 2))), nn.init_layer_norm(4))


class TestFrontend:
    def test_zero_params_give_zero_output(self):
        rng = rng_for(2)
        p = nn.init_frontend(6, 4, rng)
        p.weight.data[:] = 0.0
        ln = nn.init_layer_norm(4)
        out = nn.frontend(Tensor(rng.normal(size=(6, 5))), p, ln)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_full_scale_shape(self):
        rng = rng_for(3)
        p = nn.init_frontend(345, 256, rng)
        ln = nn.init_layer_norm(256)
        out = nn.frontend(Tensor(rng.normal(size=(345, 50))), p, ln)
        assert out.shape == (256, 50)

    def test_gradient(self):
        rng = rng_for(4)
        p = nn.init_frontend(5, 4, rng)
        ln = nn.init_layer_norm(4)
        x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3)))
        report = grad_check(
            lambda: sum_all(mul(nn.frontend(x, p, ln), w)),
            [x, p.weight, p.bias, ln.gain, ln.bias],
        )
        assert report.passed, report

    def test_shape_mismatch(self):
        p = nn.init_frontend(6, 4, rng_for(5))
        with pytest.raises(ShapeError):
            nn.frontend(Tensor(np.zeros((5, 3))), p, nn.init_layer_norm(4))


class TestFeedForward:
    def test_zero_first_layer_gives_bias_columns(self):
        rng = rng_for(6)
        p = nn.init_ffn(4, 8, rng)
        p.w_hidden.data[:] = 0.0
        p.b_hidden.data[:] = 0.0
        p.b_out.data[:] = rng.normal(size=(4, 1))
        out = nn.feed_forward(Tensor(rng.normal(size=(4, 5))), p)
        np.testing.assert_allclose(out.data, np.tile(p.b_out.data, (1, 5)))

    def test_ramp_kills_negative_preactivations(self):
        rng = rng_for(7)
        p = nn.init_ffn(3, 6, rng)
        p.b_hidden.data[:] = -100.0  # all pre-activations negative
        p.b_out.data[:] = rng.normal(size=(3, 1))
        out = nn.feed_forward(Tensor(rng.normal(size=(3, 4))), p)
        np.testing.assert_allclose(out.data, np.tile(p.b_out.data, (1, 4)))

    def test_gradient(self):
        rng = rng_for(8)
        p = nn.init_ffn(4, 6, rng)
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        wrt = [x, p.w_hidden, p.b_hidden, p.w_out, p.b_out]
        report = grad_check(lambda: sum_all(nn.feed_forward(x, p)), wrt)
        assert report.passed, report


class TestMultiHeadAttention:
    def test_zero_query_key_gives_uniform_attention(self):
        rng = rng_for(9)
        p = nn.init_attention(8, 8, 2, rng)
        for head in p.qk.heads:
            head.w_query.data[:] = 0.0
            head.w_key.data[:] = 0.0
        v = rng.normal(size=(8, 5))
        out = nn.multi_head_attention(Tensor(v), Tensor(v), Tensor(v), p)
        # Uniform weights: every output frame is W_o @ stacked per-head mean + b_o.
        per_head_means = np.vstack(
            [
                (h.w_value.data @ v + h.b_value.data).mean(axis=1, keepdims=True)
                for h in p.vo.heads
            ]
        )
        expected = p.vo.w_out.data @ per_head_means + p.vo.b_out.data
        np.testing.assert_allclose(out.data, np.tile(expected, (1, 5)), atol=1e-12)

    def test_single_head_single_frame(self):
        rng = rng_for(10)
        p = nn.init_attention(4, 4, 1, rng)
        v = rng.normal(size=(4, 1))
        out = nn.multi_head_attention(Tensor(v), Tensor(v), Tensor(v), p)
        head = p.vo.heads[0]
        expected = p.vo.w_out.data @ (head.w_value.data @ v + head.b_value.data) + p.vo.b_out.data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_matches_brute_force_oracle(self):
        rng = rng_for(11)
        p = nn.init_attention(8, 8, 2, rng)
        q = rng.normal(size=(8, 5))
        k = rng.normal(size=(8, 5))
        v = rng.normal(size=(8, 5))
        out = nn.multi_head_attention(Tensor(q), Tensor(k), Tensor(v), p)
        heads, w_out, b_out = heads_from_params(p)
        expected = brute_force_attention(q, k, v, heads, w_out, b_out)
        assert np.max(np.abs(out.data - expected)) <= 1e-10

    def test_weight_columns_sum_to_one(self):
        rng = rng_for(12)
        p = nn.init_attention(8, 8, 4, rng)
        x = Tensor(rng.normal(size=(8, 7)))
        for a in nn.attention_weights(x, x, p.qk):
            np.testing.assert_allclose(a.data.sum(axis=0), 1.0, atol=1e-10)

    def test_gradient(self):
        rng = rng_for(13)
        p = nn.init_attention(4, 4, 2, rng)
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        wrt = [x] + [h.w_query for h in p.qk.heads] + [h.w_value for h in p.vo.heads] + [p.vo.w_out]
        report = grad_check(lambda: sum_all(nn.multi_head_attention(x, x, x, p)), wrt)
        assert report.passed, report

    def test_head_divisibility_enforced(self):
        with pytest.raises(ShapeError):
            nn.init_attention(7, 8, 2, rng_for(14))


class TestMultiHeadCoAttention:
    def test_single_channel_equals_plain_attention(self):
        rng = rng_for(15)
        p = nn.init_attention(6, 6, 2, rng)
        x = rng.normal(size=(6, 4))
        ma = nn.multi_head_attention(Tensor(x), Tensor(x), Tensor(x), p)
        mca = nn.multi_head_co_attention([Tensor(x)], [Tensor(x)], Tensor(x), p)
        assert np.array_equal(ma.data, mca.data)  # same code path, bit-equal

    def test_channel_permutation_invariance(self):
        rng = rng_for(16)
        p = nn.init_attention(6, 8, 2, rng)
        chans = [Tensor(rng.normal(size=(6, 5))) for _ in range(3)]
        v = Tensor(rng.normal(size=(8, 5)))
        base_w = nn.co_attention_weights(chans, chans, p.qk)
        permuted = [chans[2], chans[0], chans[1]]
        perm_w = nn.co_attention_weights(permuted, permuted, p.qk)
        for a, b in zip(base_w, perm_w):
            assert np.max(np.abs(a.data - b.data)) <= 1e-10
        out_a = nn.multi_head_co_attention(chans, chans, v, p)
        out_b = nn.multi_head_co_attention(permuted, permuted, v, p)
        assert np.max(np.abs(out_a.data - out_b.data)) <= 1e-10

    def test_matches_brute_force_oracle(self):
        rng = rng_for(17)
        p = nn.init_attention(6, 8, 2, rng)
        chans = [rng.normal(size=(6, 5)) for _ in range(2)]
        v = rng.normal(size=(8, 5))
        out = nn.multi_head_co_attention([Tensor(c) for c in chans], [Tensor(c) for c in chans], Tensor(v), p)
        heads, w_out, b_out = heads_from_params(p)
        expected = brute_force_attention(chans, chans, v, heads, w_out, b_out)
        assert np.max(np.abs(out.data - expected)) <= 1e-10

    def test_rejects_empty_and_mismatched_channels(self):
        p = nn.init_attention(4, 4, 1, rng_for(18))
        v = Tensor(np.zeros((4, 3)))
        with pytest.raises(ShapeError):
            nn.multi_head_co_attention([], [], v, p)
        q = [Tensor(np.zeros((4, 3)))]
        k = [Tensor(np.zeros((4, 3))), Tensor(np.zeros((4, 3)))]
        with pytest.raises(ShapeError):
            nn.multi_head_co_attention(q, k, v, p)

    def test_weight_columns_sum_to_one(self):
        rng = rng_for(19)
        p = nn.init_attention(6, 6, 3, rng)
        chans = [Tensor(rng.normal(size=(6, 5))) for _ in range(3)]
        for a in nn.co_attention_weights(chans, chans, p.qk):
            np.testing.assert_allclose(a.data.sum(axis=0), 1.0, atol=1e-10)

    def test_gradient(self):
        rng = rng_for(20)
        p = nn.init_attention(4, 4, 2, rng)
        chans = [Tensor(rng.normal(size=(4, 3)), requires_grad=True) for _ in range(2)]
        v = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        wrt = chans + [v, p.qk.heads[0].w_query, p.vo.heads[0].w_value]
        report = grad_check(lambda: sum_all(nn.multi_head_co_attention(chans, chans, v, p)), wrt)
        assert report.passed, report


class TestWeightCounters:
    def test_counts_weight_computations(self):
        rng = rng_for(21)
        p = nn.init_attention(4, 4, 2, rng)
        x = Tensor(rng.normal(size=(4, 3)))
        nn.reset_weight_counters()
        nn.multi_head_attention(x, x, x, p)
        nn.multi_head_co_attention([x, x], [x, x], x, p)
        counts = nn.weight_counters()
        assert counts == {"ma": 1, "mca": 1}
