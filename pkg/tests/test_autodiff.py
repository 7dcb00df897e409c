import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cecsubopt import autodiff as ad

finite = st.floats(-3, 3, allow_nan=False)


def test_dual1_product_and_quotient():
    x = ad.Dual1(2.0, 1.0)
    y = x * x * x - 4 * x + 1 / x
    assert y.val == pytest.approx(8 - 8 + 0.5)
    assert y.deriv == pytest.approx(3 * 4 - 4 - 0.25)


def test_dual2_second_derivative_of_sqrt():
    x = ad.Dual2(4.0, 1.0, 0.0)
    y = ad.sqrt(x * x + 9.0)
    # d2/dx2 sqrt(x^2 + 9) = 9 / (x^2 + 9)^1.5
    assert y.val == pytest.approx(5.0)
    assert y.d1 == pytest.approx(4 / 5)
    assert y.d2 == pytest.approx(9 / 125)


@given(finite, finite, finite)
def test_polynomial_derivatives_match_closed_form(a, b, x):
    f = lambda z: a * z ** 3 + b * z ** 2 - z + 2  # noqa: E731
    out = f(ad.Dual2(x, 1.0, 0.0))
    assert out.d1 == pytest.approx(3 * a * x ** 2 + 2 * b * x - 1, abs=1e-9)
    assert out.d2 == pytest.approx(6 * a * x + 2 * b, abs=1e-9)


def test_negative_integer_power():
    y = ad.Dual2(2.0, 1.0, 0.0) ** -2
    assert (y.val, y.d1, y.d2) == pytest.approx((0.25, -0.25, 6 / 16))


def test_sqrt_domain_errors():
    with pytest.raises(ad.DomainError):
        ad.sqrt(ad.Dual1(-1.0, 1.0))
    with pytest.raises(ad.DomainError):
        ad.sqrt(ad.Dual1(0.0, 1.0))
    with pytest.raises(ad.DomainError):
        ad.Dual1(1.0, 1.0) / 0.0
    with pytest.raises(ad.DomainError):
        1.0 / ad.Dual1(0.0, 1.0)


def test_mixing_dual_kinds_is_rejected():
    with pytest.raises(TypeError):
        ad.Dual1(1.0, 1.0) + ad.Dual2(1.0, 1.0, 0.0)


def test_array_on_the_left_dispatches_to_dual():
    x = ad.Dual1(np.array([1.0, 2.0]), np.ones(2))
    y = np.array([3.0, 4.0]) * x
    assert isinstance(y, ad.Dual1)
    np.testing.assert_allclose(y.deriv, [3.0, 4.0])


def test_clamp_zeroes_derivative_outside():
    x = ad.Dual1(np.array([-3.0, 0.5, 3.0]), np.ones(3))
    y = ad.clamp(x, -1.0, 1.0)
    np.testing.assert_array_equal(y.val, [-1.0, 0.5, 1.0])
    np.testing.assert_array_equal(y.deriv, [0.0, 1.0, 0.0])


def test_gradient_matches_closed_form():
    def f(z):
        return ad.sqrt(z[0] * z[0] + 1.0) * z[1] + z[2] ** 3 * z[0]

    a, b, c = 0.3, -1.2, 0.7
    g = ad.gradient(f, np.array([a, b, c]))
    s = np.sqrt(a * a + 1)
    np.testing.assert_allclose(g, [a / s * b + c ** 3, s, 3 * c * c * a], rtol=1e-14)


def test_hessian_vector_matches_explicit_quadratic():
    rng_free = np.array([[4.0, 1.0, -2.0], [1.0, 3.0, 0.5], [-2.0, 0.5, 6.0]])
    b = np.array([1.0, -1.0, 2.0])

    def f(z):
        return 0.5 * ((z @ rng_free) * z).sum() + (z * b).sum()

    v = np.array([0.2, -0.7, 1.1])
    hv = ad.hessian_vector(f, np.array([0.1, 0.2, 0.3]), v)
    np.testing.assert_allclose(hv, rng_free @ v, rtol=1e-12, atol=1e-12)


@settings(max_examples=25)
@given(st.lists(finite, min_size=2, max_size=2), st.lists(finite, min_size=2, max_size=2))
def test_hessian_vector_of_nonquadratic_function(x, v):
    x, v = np.array(x), np.array(v)

    def f(z):
        return z[0] ** 4 + z[0] * z[1] ** 2 + ad.sqrt(z[1] * z[1] + 1.0)

    H = np.array([[12 * x[0] ** 2, 2 * x[1]],
                  [2 * x[1], 2 * x[0] + 1 / (x[1] ** 2 + 1) ** 1.5]])
    np.testing.assert_allclose(ad.hessian_vector(f, x, v), H @ v, rtol=1e-9, atol=1e-9)


def test_directional_second_is_zero_for_linear():
    assert ad.directional_second(lambda z: (3 * z).sum(), np.ones(3), np.ones(3)) == 0.0


def test_value_of_plain_number():
    assert ad.value_of(math.pi) == math.pi
