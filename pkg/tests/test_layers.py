import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from motionq import autodiff as ad
from motionq.errors import ConfigurationError, DimensionError
from motionq.layers import (
    HEAD_HIDDEN,
    INIT_STD,
    ffn,
    init_ffn,
    init_linear,
    init_mha,
    init_mlp_head,
    linear,
    mha,
    mha_oracle,
)
from motionq.rng import Rng


def C(x):
    return ad.constant(np.asarray(x, dtype=float))


def _spread(p, rng, std=0.3):
    # fresh init is nearly uniform attention; widen it so the tests bite
    for lp in {id(x): x for x in (p.q_proj, p.k_proj, p.v_proj, p.out_proj)}.values():
        lp.weight.value = rng.normal(lp.weight.shape, std)
        lp.bias.value = rng.normal(lp.bias.shape, 0.1)


class TestInit:
    def test_same_seed_bit_identical(self):
        a, b = init_mha(32, 4, Rng(3)), init_mha(32, 4, Rng(3))
        for x, y in [(a.q_proj, b.q_proj), (a.k_proj, b.k_proj), (a.out_proj, b.out_proj)]:
            assert x.weight.value.tobytes() == y.weight.value.tobytes()

    def test_bias_zero(self):
        assert not init_linear(5, 7, Rng(0)).bias.value.any()

    def test_weight_variance(self):
        w = init_linear(100, 100, Rng(8)).weight.value
        assert INIT_STD**2 * 0.9 <= w.var() <= INIT_STD**2 * 1.1

    def test_heads_must_divide(self):
        with pytest.raises(ConfigurationError):
            init_mha(30, 4, Rng(0))

    def test_tie_kv_shares_projection(self):
        assert init_mha(8, 2, Rng(0)).tied_kv
        assert not init_mha(8, 2, Rng(0), tie_kv=False).tied_kv

    def test_ffn_hidden_is_four_d(self):
        p = init_ffn(32, Rng(0))
        assert p.lin1.weight.shape == (32, 128) and p.lin2.weight.shape == (128, 32)

    def test_head_dims(self):
        p = init_mlp_head(4 * 8 * 32, Rng(0))
        assert p.flat_in == 1024
        assert p.lin1.weight.shape == (1024, HEAD_HIDDEN) and p.lin2.weight.shape == (HEAD_HIDDEN, 2)


class TestLinear:
    def test_identity(self):
        p = init_linear(3, 3, Rng(0))
        p.weight.value = np.eye(3)
        x = Rng(1).normal((4, 3))
        assert np.array_equal(linear(C(x), p).value, x)

    def test_zero_input_gives_bias(self):
        p = init_linear(3, 2, Rng(0))
        p.bias.value = np.array([0.5, -1.0])
        assert np.array_equal(linear(C(np.zeros((4, 3))), p).value, np.tile([0.5, -1.0], (4, 1)))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            linear(C(np.zeros((2, 4))), init_linear(3, 2, Rng(0)))

    def test_gradcheck(self):
        p = init_linear(4, 3, Rng(0))
        w = Rng(2).normal((5, 3))
        assert ad.grad_check(lambda n: ad.sum_all(ad.mul(linear(n, p), C(w))), Rng(1).normal((5, 4))) < 1e-5


class TestMha:
    @pytest.mark.parametrize("tie", [True, False])
    def test_matches_oracle(self, tie):
        r = Rng(10)
        p = init_mha(32, 4, r, tie_kv=tie)
        _spread(p, r)
        q, kv = r.normal((8, 32)), r.normal((24, 32))
        np.testing.assert_allclose(mha(C(q), C(kv), p).value, mha_oracle(q, kv, p), rtol=0, atol=1e-10)

    def test_single_key(self):
        r = Rng(11)
        p = init_mha(8, 2, r, tie_kv=False)
        _spread(p, r)
        kv = r.normal((1, 8))
        out = mha(C(r.normal((5, 8))), C(kv), p).value
        expected = linear(linear(C(kv), p.v_proj), p.out_proj).value
        np.testing.assert_allclose(out, np.tile(expected, (5, 1)), rtol=0, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_key_permutation_invariance(self, seed):
        r = Rng(seed)
        p = init_mha(8, 2, r)
        _spread(p, r)
        q, kv = r.normal((3, 8)), r.normal((6, 8))
        perm = r.permutation(6)
        a = mha(C(q), C(kv), p).value
        b = mha(C(q), C(kv[perm]), p).value
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_weights_are_convex(self):
        r = Rng(12)
        p = init_mha(32, 4, r)
        _spread(p, r, std=1.0)
        _, w = mha(C(r.normal((8, 32))), C(r.normal((24, 32))), p, return_weights=True)
        assert w.shape == (4, 8, 24)
        assert (w >= 0).all()
        assert np.abs(w.sum(axis=-1) - 1).max() <= 1e-12

    def test_batched_equals_per_item(self):
        r = Rng(13)
        p = init_mha(8, 2, r)
        _spread(p, r)
        q, kv = r.normal((3, 4, 8)), r.normal((3, 6, 8))
        batched = mha(C(q), C(kv), p).value
        for i in range(3):
            np.testing.assert_allclose(batched[i], mha(C(q[i]), C(kv[i]), p).value, rtol=0, atol=1e-13)

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            mha(C(np.zeros((2, 8))), C(np.zeros((3, 6))), init_mha(8, 2, Rng(0)))

    def test_oracle_rejects_bad_dims(self):
        with pytest.raises(DimensionError):
            mha_oracle(np.zeros((2, 8)), np.zeros((3, 6)), init_mha(8, 2, Rng(0)))

    def test_gradcheck_wrt_queries_and_keys(self):
        r = Rng(14)
        p = init_mha(8, 2, r)
        _spread(p, r)
        q, kv, w = r.normal((3, 8)), r.normal((5, 8)), r.normal((3, 8))
        assert ad.grad_check(lambda n: ad.sum_all(ad.mul(mha(n, C(kv), p), C(w))), q) < 1e-5
        assert ad.grad_check(lambda n: ad.sum_all(ad.mul(mha(C(q), n, p), C(w))), kv) < 1e-5


class TestHeads:
    def test_ffn_zero_input(self):
        r = Rng(0)
        p = init_ffn(4, r)
        p.lin1.bias.value = r.normal(16)
        p.lin2.bias.value = r.normal(4)
        out = ffn(C(np.zeros((1, 4))), p).value
        hidden = p.lin1.bias.value
        gelu = ad.gelu(C(hidden)).value
        np.testing.assert_allclose(out[0], gelu @ p.lin2.weight.value + p.lin2.bias.value, atol=1e-15)

    def test_head_zero_input_is_bias_path(self):
        from motionq.layers import mlp_head

        p = init_mlp_head(6, Rng(0))
        p.lin2.bias.value = np.array([0.3, -0.7])
        # zero input and zero first bias leave relu(0) = 0, so only lin2's bias survives
        assert np.array_equal(mlp_head(C(np.zeros(6)), p).value, [0.3, -0.7])

    def test_head_flat_mismatch_is_configuration_error(self):
        from motionq.layers import mlp_head

        with pytest.raises(ConfigurationError, match="1024"):
            mlp_head(C(np.zeros(256)), init_mlp_head(1024, Rng(0)))
