import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from compfeinn.quadrature import gauss_1d
from compfeinn.refelem import (EDGE_VERTICES, LAGRANGE_CG, LAGRANGE_DG, NEDELEC, RAVIART_THOMAS,
                               REF_VERTICES, duality_matrix, edge_point, edge_tangent,
                               eval_shape, lagrange_quad, make_element, nedelec_quad,
                               raviart_thomas_quad, rotate)


def edge_dofs(elem, edge):
    slots = [elem.slots[d.slot] for d in elem.dofs]
    return {i for i, s in enumerate(slots) if s.kind == "edge" and s.index == edge}


class TestGeometry:
    def test_edges_follow_vertex_table(self):
        for e, (a, b) in enumerate(EDGE_VERTICES):
            assert np.allclose(edge_point(e, -1.0), REF_VERTICES[a])
            assert np.allclose(edge_point(e, 1.0), REF_VERTICES[b])
            assert np.allclose(edge_tangent(e), (REF_VERTICES[b] - REF_VERTICES[a]) / 2)

    def test_rotate_is_quarter_turn(self):
        v = np.array([[1.0, 0.0], [0.3, -2.0]])
        r = rotate(v)
        assert np.allclose(r[0], [0, 1])
        assert np.allclose(np.sum(r * v, axis=1), 0)
        assert np.allclose(rotate(rotate(v)), -v)


class TestDimensions:
    @pytest.mark.parametrize("k", [1, 2, 3, 4])
    def test_vector_elements(self, k):
        assert nedelec_quad(k).ndofs == 2 * k * (k + 1)
        assert raviart_thomas_quad(k).ndofs == 2 * k * (k + 1)

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_lagrange(self, k):
        assert lagrange_quad(k, "CG").ndofs == (k + 1) ** 2
        assert lagrange_quad(k - 1, "DG").ndofs == k ** 2

    def test_entity_counts(self):
        nd = nedelec_quad(3)
        assert nd.dofs_per_entity("edge") == 3
        assert nd.dofs_per_entity("interior") == 2 * 3 * 2
        assert nd.dofs_per_entity("vertex") == 0
        cg = lagrange_quad(3)
        assert cg.dofs_per_entity("vertex") == 1
        assert cg.dofs_per_entity("edge") == 2

    def test_invalid_orders(self):
        with pytest.raises(ValueError):
            nedelec_quad(0)
        with pytest.raises(ValueError):
            raviart_thomas_quad(0)
        with pytest.raises(ValueError):
            lagrange_quad(0, "CG")
        with pytest.raises(ValueError):
            lagrange_quad(1, "XG")
        with pytest.raises(ValueError):
            make_element("Crouzeix", 1)


class TestDuality:
    @pytest.mark.parametrize("family", [NEDELEC, RAVIART_THOMAS])
    @pytest.mark.parametrize("k", [1, 2, 3, 4])
    def test_vector(self, family, k):
        D = duality_matrix(make_element(family, k))
        assert np.abs(D - np.eye(len(D))).max() < 1e-11

    @pytest.mark.parametrize("family,k", [(LAGRANGE_CG, 1), (LAGRANGE_CG, 3), (LAGRANGE_DG, 0),
                                          (LAGRANGE_DG, 2)])
    def test_scalar(self, family, k):
        D = duality_matrix(make_element(family, k))
        assert np.abs(D - np.eye(len(D))).max() < 1e-11


class TestTraces:
    """Only the DOFs of an edge see the tangential (ND) or normal (RT) trace there."""

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_nedelec_tangential_trace(self, k):
        elem = nedelec_quad(k)
        s, _ = gauss_1d(k + 2)
        for e in range(4):
            vals = eval_shape(elem, edge_point(e, s))  # (npts, nd, 2)
            tang = vals @ edge_tangent(e)
            others = sorted(set(range(elem.ndofs)) - edge_dofs(elem, e))
            assert np.abs(tang[:, others]).max() < 1e-12

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_raviart_thomas_normal_trace(self, k):
        elem = raviart_thomas_quad(k)
        s, _ = gauss_1d(k + 2)
        for e in range(4):
            vals = eval_shape(elem, edge_point(e, s))
            normal = vals @ rotate(edge_tangent(e))
            others = sorted(set(range(elem.ndofs)) - edge_dofs(elem, e))
            assert np.abs(normal[:, others]).max() < 1e-12

    def test_reversal_rules(self):
        assert nedelec_quad(2).edge_reversal == "sign"
        assert raviart_thomas_quad(2).edge_reversal == "sign"
        assert lagrange_quad(3).edge_reversal == "permute"


def finite_difference(elem, x, h=1e-6):
    ex, ey = np.array([h, 0.0]), np.array([0.0, h])
    dx = (eval_shape(elem, x + ex) - eval_shape(elem, x - ex)) / (2 * h)
    dy = (eval_shape(elem, x + ey) - eval_shape(elem, x - ey)) / (2 * h)
    return dx, dy


class TestDerivatives:
    @given(x=st.floats(-0.9, 0.9), y=st.floats(-0.9, 0.9), k=st.integers(1, 3))
    @settings(max_examples=25, deadline=None)
    def test_curl_and_div_against_differences(self, x, y, k):
        p = np.array([[x, y]])
        dx, dy = finite_difference(nedelec_quad(k), p)
        _, curl = eval_shape(nedelec_quad(k), p, "curl")
        assert np.allclose(curl, dx[..., 1] - dy[..., 0], atol=1e-6)
        dx, dy = finite_difference(raviart_thomas_quad(k), p)
        _, div = eval_shape(raviart_thomas_quad(k), p, "div")
        assert np.allclose(div, dx[..., 0] + dy[..., 1], atol=1e-6)

    @given(x=st.floats(-0.9, 0.9), y=st.floats(-0.9, 0.9))
    @settings(max_examples=20, deadline=None)
    def test_gradient_against_differences(self, x, y):
        elem = lagrange_quad(2)
        p = np.array([[x, y]])
        dx, dy = finite_difference(elem, p)
        _, grad = eval_shape(elem, p, "grad")
        assert np.allclose(grad[..., 0], dx[..., 0], atol=1e-6)
        assert np.allclose(grad[..., 1], dy[..., 0], atol=1e-6)

    def test_wrong_derivative_kind(self):
        with pytest.raises(ValueError):
            eval_shape(lagrange_quad(1), np.zeros((1, 2)), "curl")
        with pytest.raises(ValueError):
            eval_shape(nedelec_quad(1), np.zeros((1, 2)), "grad")

    def test_partition_of_unity(self):
        pts = np.random.default_rng(0).uniform(-1, 1, (10, 2))
        for k in (1, 2, 3):
            vals = eval_shape(lagrange_quad(k), pts)
            assert np.allclose(vals[..., 0].sum(axis=1), 1.0)
