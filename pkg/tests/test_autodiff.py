import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from motionq import autodiff as ad
from motionq.errors import DimensionError, NonFiniteError
from motionq.gradcheck import CHECKS, LAYER_TOL
from motionq.rng import Rng


def C(x):
    return ad.constant(np.array(x, dtype=float))


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(C(np.eye(2)), C([[1, 2], [3, 4]]))
        assert np.array_equal(out.value, [[1, 2], [3, 4]])

    def test_hand_product(self):
        assert np.array_equal(ad.matmul(C([[1, 2]]), C([[3], [4]])).value, [[11]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(C(np.ones((2, 3))), C(np.ones((2, 3))))

    def test_grad_of_sum_is_row_sums_of_b(self):
        r = Rng(0)
        a = ad.param(r.normal((3, 4)))
        b = ad.constant(r.normal((4, 2)))
        ad.backward(ad.sum_all(ad.matmul(a, b)))
        np.testing.assert_allclose(a.grad, np.tile(b.value.sum(axis=1), (3, 1)), atol=1e-14)

    def test_fd_both_inputs(self):
        r = Rng(1)
        a, b = r.normal((3, 4)), r.normal((4, 2))
        assert ad.grad_check(lambda n: ad.sum_all(ad.matmul(n, C(b))), a) < 1e-5
        assert ad.grad_check(lambda n: ad.sum_all(ad.matmul(C(a), n)), b) < 1e-5

    def test_batched_against_shared_weight(self):
        r = Rng(2)
        a = r.normal((2, 3, 4))
        w = r.normal((4, 5))
        shared = ad.matmul(C(a), C(w)).value
        stacked = ad.matmul(C(a), C(np.stack([w, w]))).value
        np.testing.assert_allclose(shared, stacked, atol=1e-14)


class TestSoftmax:
    def test_symmetric(self):
        assert np.array_equal(ad.softmax_lastdim(C([0.0, 0.0])).value, [0.5, 0.5])

    def test_large_equal_inputs(self):
        np.testing.assert_allclose(ad.softmax_lastdim(C([1000.0] * 3)).value, [1 / 3] * 3, atol=1e-15)

    def test_log3(self):
        np.testing.assert_allclose(ad.softmax_lastdim(C([0.0, math.log(3)])).value, [0.25, 0.75], atol=1e-15)

    @settings(max_examples=200)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-1e4, 1e4)))
    def test_rows_sum_to_one(self, x):
        s = ad.softmax_lastdim(C(x)).value.sum(axis=-1)
        assert np.all(np.abs(s - 1.0) <= 1e-12)

    def test_grad_of_sum_is_zero(self):
        x = ad.param([0.3, -1.2, 2.0])
        ad.backward(ad.sum_all(ad.softmax_lastdim(x)))
        np.testing.assert_allclose(x.grad, 0.0, atol=1e-15)


class TestLayerNorm:
    def test_constant_row(self):
        out = ad.layer_norm(C([[2.0, 2.0, 2.0]]), C(np.ones(3)), C(np.zeros(3)))
        assert np.array_equal(out.value, np.zeros((1, 3)))

    def test_two_values(self):
        out = ad.layer_norm(C([1.0, 3.0]), C(np.ones(2)), C(np.zeros(2)), eps=1e-14)
        np.testing.assert_allclose(out.value, [-1.0, 1.0], atol=1e-12)

    def test_gradcheck_input_and_affine(self):
        r = Rng(4)
        x, g, b = r.normal((2, 8)), 1 + 0.3 * r.normal(8), r.normal(8)
        w = r.normal((2, 8))
        assert ad.grad_check(lambda n: ad.sum_all(ad.mul(ad.layer_norm(n, C(g), C(b)), C(w))), x) < 1e-5
        assert ad.grad_check(lambda n: ad.sum_all(ad.mul(ad.layer_norm(C(x), n, C(b)), C(w))), g) < 1e-5
        assert ad.grad_check(lambda n: ad.sum_all(ad.mul(ad.layer_norm(C(x), C(g), n), C(w))), b) < 1e-5


class TestElementwise:
    def test_relu(self):
        assert np.array_equal(ad.relu(C([-1.0, 0.0, 2.0])).value, [0, 0, 2])

    def test_relu_subgradient_at_zero(self):
        x = ad.param([0.0, 1.0])
        ad.backward(ad.sum_all(ad.relu(x)))
        assert np.array_equal(x.grad, [0.0, 1.0])

    def test_add_zero(self):
        x = C([1.0, -2.0, 3.5])
        assert np.array_equal(ad.add(x, C(np.zeros(3))).value, x.value)

    def test_add_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.add(C(np.ones(3)), C(np.ones(4)))

    def test_gelu_gradcheck(self):
        assert ad.grad_check(lambda n: ad.sum_all(ad.gelu(n)), Rng(5).normal(10)) < 1e-5

    def test_gelu_values(self):
        # x * Phi(x) at a few points
        x = np.array([-1.0, 0.0, 1.0])
        phi = 0.5 * (1 + np.array([math.erf(v / math.sqrt(2)) for v in x]))
        np.testing.assert_allclose(ad.gelu(C(x)).value, x * phi, atol=1e-15)

    def test_non_finite_is_an_error(self):
        with pytest.raises(NonFiniteError):
            ad.log(C([0.0]))
        with pytest.raises(NonFiniteError):
            ad.constant([np.nan])


class TestShaping:
    def test_concat_shape(self):
        assert ad.concat([C(np.ones((8, 32))), C(np.ones((8, 32)))], axis=0).shape == (16, 32)

    def test_concat_flatten_default_gather_size(self):
        parts = [C(np.ones((8, 32))) for _ in range(4)]
        assert ad.flatten(ad.concat(parts, axis=0)).shape == (1024,)

    def test_single_part_is_identity(self):
        x = C(np.arange(6.0).reshape(2, 3))
        assert ad.concat([x]) is x

    def test_concat_mismatch(self):
        with pytest.raises(DimensionError):
            ad.concat([C(np.ones((2, 3))), C(np.ones((2, 4)))], axis=0)

    @given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(1, 3))
    def test_concat_then_slice_recovers_parts(self, rows, cols):
        r = Rng(len(rows) * 10 + cols)
        parts = [r.normal((n, cols)) for n in rows]
        joined = ad.concat([C(p) for p in parts], axis=0)
        lo = 0
        for p in parts:
            assert np.array_equal(ad.getitem(joined, slice(lo, lo + len(p))).value, p)
            lo += len(p)

    def test_concat_routes_gradients(self):
        a, b = ad.param(np.ones((2, 2))), ad.param(np.ones((1, 2)))
        w = C([[1, 2], [3, 4], [5, 6]])
        ad.backward(ad.sum_all(ad.mul(ad.concat([a, b]), w)))
        assert np.array_equal(a.grad, [[1, 2], [3, 4]])
        assert np.array_equal(b.grad, [[5, 6]])

    def test_transpose_roundtrip(self):
        x = Rng(0).normal((2, 3, 4))
        out = ad.transpose(ad.transpose(C(x), (2, 0, 1)), (1, 2, 0))
        assert np.array_equal(out.value, x)


class TestBackward:
    def test_sum_of_squares(self):
        x = ad.param([1.0, 2.0])
        ad.backward(ad.sum_all(ad.mul(x, x)))
        assert np.array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_loss(self):
        with pytest.raises(DimensionError):
            ad.backward(ad.param([1.0, 2.0]))

    def test_repeated_calls_accumulate(self):
        x = ad.param([1.0, 2.0])
        loss = ad.sum_all(ad.mul(x, x))
        ad.backward(loss)
        ad.backward(loss)
        assert np.array_equal(x.grad, [4.0, 8.0])

    def test_fan_out_sums(self):
        x = ad.param([3.0])
        y = ad.add(x, x)
        ad.backward(ad.sum_all(ad.mul(y, x)))  # 2x^2
        assert np.array_equal(x.grad, [12.0])

    def test_constants_get_no_grad(self):
        c = C([1.0])
        x = ad.param([2.0])
        ad.backward(ad.sum_all(ad.mul(c, x)))
        assert c.grad is None

    def test_no_grad_builds_no_graph(self):
        x = ad.param([1.0])
        with ad.no_grad():
            y = ad.scale(x, 2.0)
        assert not y.requires_grad and y.parents == ()

    def test_forward_is_deterministic(self):
        def build():
            r = Rng(9)
            w = ad.param(r.normal((4, 4)))
            return ad.softmax_lastdim(ad.matmul(C(r.normal((3, 4))), w)).value

        assert build().tobytes() == build().tobytes()


class TestGradCheck:
    def test_sum_is_near_exact(self):
        # central differences of a linear function only carry rounding error
        assert ad.grad_check(ad.sum_all, Rng(0).normal(5)) < 1e-9

    def test_quadratic(self):
        assert ad.grad_check(lambda n: ad.sum_all(ad.mul(n, n)), [1.0, 2.0]) < 1e-8

    def test_detects_wrong_gradient(self):
        with ad.corrupt_backward("mul"):
            assert ad.grad_check(lambda n: ad.sum_all(ad.mul(n, n)), [1.0, 2.0]) > 0.1

    def test_rejects_nonpositive_step(self):
        with pytest.raises(ValueError):
            ad.grad_check(ad.sum_all, [1.0], h=0.0)


PRIMITIVES = [c for c in CHECKS if c[1] == LAYER_TOL]


@pytest.mark.parametrize("name,tol,check", PRIMITIVES, ids=[c[0] for c in PRIMITIVES])
def test_every_op_passes_gradcheck(name, tol, check):
    # each check already takes the max over five seeded points
    assert check(Rng(77)) < tol
