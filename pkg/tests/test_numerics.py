import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from prsl.errors import InvalidDimensionError, NumericError
from prsl.numerics import (
    ParamStore,
    affine,
    affine_backward,
    grad_check,
    log_softmax,
    relu,
    relu_backward,
    softmax,
)

# mpmath at 40 digits
SOFTMAX_2101 = [0.643914259888, 0.23688281809, 0.087144318742, 0.0320586032801]
LOG_SOFTMAX_2101 = [-0.440189698561, -1.44018969856, -2.44018969856, -3.44018969856]

finite_logits = arrays(
    np.float64,
    st.integers(2, 12),
    elements=st.floats(-700, 700, allow_nan=False, allow_infinity=False),
)


class TestSoftmax:
    def test_symmetric_inputs(self):
        np.testing.assert_allclose(softmax([0, 0, 0]), [1 / 3] * 3, atol=1e-15)
        np.testing.assert_allclose(softmax([1, 1, 1, 1]), [0.25] * 4, atol=1e-15)

    def test_reference_values(self):
        np.testing.assert_allclose(softmax([2, 1, 0, -1]), SOFTMAX_2101, atol=1e-6)
        np.testing.assert_allclose(softmax([2, 1, 0, -1]), SOFTMAX_2101, atol=1e-11)

    @pytest.mark.parametrize("bad", [[], [1.0], 3.0])
    def test_invalid_dimension(self, bad):
        with pytest.raises(InvalidDimensionError):
            softmax(bad)

    @pytest.mark.parametrize("bad", [[0.0, np.nan], [np.inf, 0.0]])
    def test_non_finite(self, bad):
        with pytest.raises(NumericError):
            softmax(bad)
        with pytest.raises(NumericError):
            log_softmax(bad)

    @given(finite_logits)
    def test_sums_to_one(self, z):
        p = softmax(z)
        assert abs(p.sum() - 1.0) <= 1e-12
        assert np.all(p >= 0) and np.all(p <= 1)

    @given(finite_logits, st.floats(-50, 50))
    def test_shift_invariance(self, z, c):
        np.testing.assert_allclose(softmax(z + c), softmax(z), atol=1e-12, rtol=0)

    @given(finite_logits)
    def test_exp_log_softmax(self, z):
        np.testing.assert_allclose(np.exp(log_softmax(z)), softmax(z), atol=1e-12, rtol=0)


class TestLogSoftmax:
    def test_two_zeros(self):
        np.testing.assert_allclose(log_softmax([0, 0]), [-np.log(2)] * 2, atol=1e-15)

    def test_large_logit_is_stable(self):
        out = log_softmax([1000.0, 0.0])
        assert np.all(np.isfinite(out))
        assert abs(out[0]) < 1e-300
        assert out[1] == pytest.approx(-1000.0)

    def test_reference_values(self):
        np.testing.assert_allclose(log_softmax([2, 1, 0, -1]), LOG_SOFTMAX_2101, atol=1e-6)


class TestAffine:
    def test_identity(self):
        np.testing.assert_array_equal(affine([1, 2], np.eye(2), [0, 0]), [1, 2])

    def test_bias_gradient(self):
        _, _, gb = affine_backward([1, 1], [1, 2], np.eye(2))
        np.testing.assert_array_equal(gb, [1, 1])

    def test_shape_mismatch(self):
        with pytest.raises(InvalidDimensionError):
            affine([1, 2, 3], np.eye(2), [0, 0])
        with pytest.raises(InvalidDimensionError):
            affine([1, 2], np.eye(2), [0, 0, 0])

    def test_batched_rows(self, rng):
        x = rng.normal(size=(5, 3))
        W, b = rng.normal(size=(4, 3)), rng.normal(size=4)
        y = affine(x, W, b)
        for i in range(5):
            np.testing.assert_allclose(y[i], W @ x[i] + b, atol=1e-14)

    def test_random_backward_matches_finite_differences(self, rng):
        x = rng.normal(size=3)
        W = rng.normal(size=(4, 3))
        b = rng.normal(size=4)
        up = rng.normal(size=4)

        def wrt_x(v):
            return float(up @ affine(v, W, b)), affine_backward(up, v, W)[0]

        def wrt_w(m):
            return float(up @ affine(x, m, b)), affine_backward(up, x, m)[1]

        def wrt_b(v):
            return float(up @ affine(x, W, v)), affine_backward(up, x, W)[2]

        assert grad_check(wrt_x, x, 1e-5) < 1e-6
        assert grad_check(wrt_w, W, 1e-5) < 1e-6
        assert grad_check(wrt_b, b, 1e-5) < 1e-6


class TestRelu:
    def test_definition(self):
        np.testing.assert_array_equal(relu([-1, 0, 2]), [0, 0, 2])
        np.testing.assert_array_equal(relu([-3, -0.1]), [0, 0])

    def test_subgradient_at_zero(self):
        np.testing.assert_array_equal(relu_backward([5, 5, 5], [-1, 0, 2]), [0, 0, 5])

    def test_gradient_check_away_from_zero(self, rng):
        x = rng.normal(size=20)
        x = np.where(np.abs(x) < 0.05, 0.5, x)
        up = rng.normal(size=20)
        err = grad_check(lambda v: (float(up @ relu(v)), relu_backward(up, v)), x, 1e-5)
        assert err < 1e-6


class TestGradCheck:
    def test_cross_entropy_at_symmetric_point(self):
        def ce(z):
            p = softmax(z)
            return -log_softmax(z)[0], p - np.array([1.0, 0.0])

        _, g = ce(np.zeros(2))
        np.testing.assert_allclose(g, [-0.5, 0.5])
        assert grad_check(ce, np.zeros(2), 1e-5) < 1e-8

    def test_constant_function(self):
        assert grad_check(lambda x: (3.0, np.zeros_like(x)), np.ones(4), 1e-6) == 0.0

    def test_detects_wrong_gradient(self):
        assert grad_check(lambda x: (float(x @ x), x), np.ones(3)) > 0.1

    def test_non_finite(self):
        with pytest.raises(NumericError):
            grad_check(lambda x: (float(1 / (x[0] - 1e-7)) if x[0] > 0 else np.inf, x), np.zeros(1))


class TestParamStore:
    def test_order_and_shapes(self):
        store = ParamStore([("b", np.zeros(2)), ("a", np.ones((2, 2)))])
        assert list(store) == ["b", "a"]
        with pytest.raises(InvalidDimensionError):
            store["a"] = np.ones(3)
        with pytest.raises(KeyError):
            store.add("a", np.ones(1))

    def test_flatten_roundtrip(self, rng):
        store = ParamStore([("w", rng.normal(size=(3, 2))), ("b", rng.normal(size=3))])
        assert store.unflatten(store.flatten()).equals(store)
