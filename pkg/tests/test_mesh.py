import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from compfeinn.mesh import (MeshError, build_cartesian, build_cubed_sphere, refine,
                            uniform_refine, write_vtk)
from compfeinn.quadrature import gauss_square


class TestCartesian:
    @pytest.mark.parametrize("nx,ny", [(1, 1), (2, 2), (3, 5), (50, 50)])
    def test_counts(self, nx, ny):
        m = build_cartesian(nx, ny)
        assert m.ncells == nx * ny
        assert m.nvertices == (nx + 1) * (ny + 1)
        assert m.nedges == nx * (ny + 1) + ny * (nx + 1)
        assert m.boundary_edges.sum() == 2 * (nx + ny)

    def test_numbering(self):
        m = build_cartesian(3, 2)
        # vertex i + (nx + 1) j, cell i + nx j
        assert np.allclose(m.vertices[1 + 4 * 2], [1 / 3, 1.0])
        x, _ = m.map(np.zeros((1, 2)), [4])
        assert np.allclose(x[0, 0], [0.5, 0.75])

    def test_edges_run_low_to_high(self):
        m = build_cartesian(4, 3)
        assert np.all(m.edges[:, 0] < m.edges[:, 1])
        for c in range(m.ncells):
            for e in range(4):
                a, b = m.cells[c][list([(0, 1), (1, 2), (3, 2), (0, 3)][e])]
                assert m.cell_edge_signs[c, e] == (1.0 if a < b else -1.0)

    def test_interior_edges_have_two_cells(self):
        m = build_cartesian(3, 3)
        inner = ~m.boundary_edges
        assert np.all(m.edge_cells[inner] >= 0)
        assert np.all(m.edge_cells[m.boundary_edges, 1] == -1)

    def test_areas_and_jacobian(self):
        m = build_cartesian(4, 2, (0.0, 2.0, -1.0, 1.0))
        assert np.allclose(m.cell_measures(), 0.5 * 1.0)
        _, J = m.map(gauss_square(2)[0])
        assert np.allclose(J[..., 0, 0], 0.25) and np.allclose(J[..., 1, 1], 0.5)
        assert np.allclose(J[..., 0, 1], 0) and np.allclose(J[..., 1, 0], 0)

    @given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=20))
    @settings(max_examples=30, deadline=None)
    def test_locate_round_trip(self, pts):
        m = build_cartesian(5, 3)
        pts = np.array(pts)
        cells, xhat = m.locate(pts)
        assert np.all(np.abs(xhat) <= 1 + 1e-12)
        x, _ = m.map(xhat[:, None, :], cells)
        assert np.allclose(x[:, 0], pts, atol=1e-14)

    def test_locate_outside(self):
        with pytest.raises(MeshError):
            build_cartesian(2, 2).locate(np.array([[1.5, 0.5]]))

    def test_boundary_normals_outward(self):
        m = build_cartesian(3, 3)
        edges = np.flatnonzero(m.boundary_edges)
        n = m.boundary_normals(edges)
        mid = m.vertices[m.edges[edges]].mean(axis=1)
        assert np.allclose(np.linalg.norm(n, axis=1), 1)
        assert np.all(np.sum(n * (mid - 0.5), axis=1) > 0)


class TestCubedSphere:
    @pytest.mark.parametrize("ne", [1, 2, 4])
    def test_euler_characteristic(self, ne):
        m = build_cubed_sphere(ne)
        assert m.ncells == 6 * ne * ne
        assert m.nvertices - m.nedges + m.ncells == 2
        assert m.closed and not m.boundary_edges.any()

    def test_counts_ne4(self):
        m = build_cubed_sphere(4)
        assert (m.ncells, m.nedges, m.nvertices) == (96, 192, 98)

    def test_points_on_unit_sphere_and_tangent_jacobian(self):
        m = build_cubed_sphere(3)
        x, J = m.map(gauss_square(3)[0])
        assert np.allclose(np.linalg.norm(x, axis=-1), 1, atol=1e-14)
        assert np.abs(np.einsum("cqd,cqdk->cqk", x, J)).max() < 1e-14

    def test_outward_orientation(self):
        m = build_cubed_sphere(2)
        x, J = m.map(gauss_square(2)[0])
        n = np.cross(J[..., 0], J[..., 1])
        assert np.all(np.sum(n * x, axis=-1) > 0)

    def test_area_converges_to_sphere(self):
        errs = [abs(build_cubed_sphere(ne).cell_measures(6).sum() - 4 * np.pi)
                for ne in (2, 4, 8)]
        assert errs[-1] < 1e-12 and errs[0] < 1e-8

    def test_vertices_match_map(self):
        m = build_cubed_sphere(3)
        corners = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
        x, _ = m.map(corners)
        assert np.allclose(x, m.vertices[m.cells], atol=1e-14)

    def test_locate_round_trip(self):
        m = build_cubed_sphere(4)
        rng = np.random.default_rng(1)
        p = rng.normal(size=(40, 3))
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        cells, xhat = m.locate(p)
        x, _ = m.map(xhat[:, None, :], cells)
        assert np.allclose(x[:, 0], p, atol=1e-10)


class TestRefine:
    def test_factor_one_is_identity(self):
        m = build_cartesian(2, 2)
        assert refine(m, 1) is m

    @pytest.mark.parametrize("factor", [2, 3])
    def test_parent_maps(self, factor):
        for m in (build_cartesian(2, 3), build_cubed_sphere(2)):
            f = refine(m, factor)
            assert f.ncells == m.ncells * factor ** 2
            assert f.parent_mesh is m and f.refine_factor == factor
            q = gauss_square(2)[0]
            xf, _ = f.map(q)
            xp, _ = m.map(f.to_parent(q), f.parent)
            assert np.allclose(xf, xp, atol=1e-14)

    def test_uniform_refine_edge_count(self):
        assert uniform_refine(build_cartesian(16, 16), 2).nedges == 8320


class TestVTK:
    def test_flat_and_surface(self, tmp_path):
        m = build_cartesian(2, 2)
        p = write_vtk(m, tmp_path / "a.vtk", cell_data={"e": np.arange(4.0)},
                      point_data={"v": np.zeros(9)})
        text = open(p).read()
        assert "UNSTRUCTURED_GRID" in text and "CELL_TYPES 4" in text
        assert "SCALARS e double" in text
        s = write_vtk(build_cubed_sphere(1), tmp_path / "b.vtk")
        assert "POLYDATA" in open(s).read()

    def test_rejects_wrong_length(self, tmp_path):
        with pytest.raises((MeshError, ValueError)):
            write_vtk(build_cartesian(2, 2), tmp_path / "c.vtk", cell_data={"e": np.zeros(3)})
