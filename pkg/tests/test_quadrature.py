import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.polynomial import legendre

from compfeinn.quadrature import gauss_1d, gauss_square, legendre_derivative_table, legendre_table


def exact_monomial(p):
    # int_{-1}^{1} x^p dx
    return 0.0 if p % 2 else 2.0 / (p + 1)


class TestGauss1D:
    @given(n=st.integers(1, 12), data=st.data())
    @settings(max_examples=60, deadline=None)
    def test_exact_to_degree_2n_minus_1(self, n, data):
        p = data.draw(st.integers(0, 2 * n - 1))
        x, w = gauss_1d(n)
        assert np.sum(w * x ** p) == pytest.approx(exact_monomial(p), abs=1e-13)

    def test_not_exact_beyond(self):
        x, w = gauss_1d(3)
        assert abs(np.sum(w * x ** 6) - exact_monomial(6)) > 1e-3

    def test_rejects_zero_points(self):
        with pytest.raises(ValueError):
            gauss_1d(0)


class TestGaussSquare:
    def test_x_index_fastest(self):
        q, w = gauss_square(3)
        x, _ = gauss_1d(3)
        assert np.allclose(q[:3, 0], x) and np.allclose(q[:3, 1], x[0])
        assert w.sum() == pytest.approx(4.0)

    @given(n=st.integers(1, 6), data=st.data())
    @settings(max_examples=40, deadline=None)
    def test_tensor_exactness(self, n, data):
        a = data.draw(st.integers(0, 2 * n - 1))
        b = data.draw(st.integers(0, 2 * n - 1))
        q, w = gauss_square(n)
        val = np.sum(w * q[:, 0] ** a * q[:, 1] ** b)
        assert val == pytest.approx(exact_monomial(a) * exact_monomial(b), abs=1e-13)


class TestLegendreTables:
    def test_values_and_derivatives(self):
        x = np.linspace(-1, 1, 7)
        V = legendre_table(x, 4)
        D = legendre_derivative_table(x, 4)
        for n in range(5):
            c = np.zeros(n + 1)
            c[n] = 1
            assert np.allclose(V[:, n], legendre.legval(x, c))
            assert np.allclose(D[:, n], legendre.legval(x, legendre.legder(c)))

    def test_endpoint_values(self):
        # P_n(1) = 1, P_n'(1) = n(n+1)/2
        V = legendre_table([1.0], 5)
        D = legendre_derivative_table([1.0], 5)
        n = np.arange(6)
        assert np.allclose(V[0], 1.0)
        assert np.allclose(D[0], n * (n + 1) / 2)
