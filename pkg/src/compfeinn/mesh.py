"""Structured quadrilateral meshes: Cartesian grids and the cubed sphere.

Both mesh kinds share the same connectivity layout. Cells list their four
vertices counter-clockwise (seen from outside for the sphere) in the order
(-1,-1), (1,-1), (1,1), (-1,1) of the reference square [-1, 1]^2. Global
edges are oriented from the lower to the higher vertex id, and
``cell_edge_signs`` records whether the local reference direction of each
cell edge agrees with that global orientation.
"""

from dataclasses import dataclass

import numpy as np

from .refelem import EDGE_VERTICES


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class CellGeometry:
    jacobian: np.ndarray
    metric: np.ndarray
    area_element: float


class QuadMesh:
    """Connectivity shared by all conforming quad meshes."""

    kind = "quad"
    closed = False

    def __init__(self, vertices, cells):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.cells = np.ascontiguousarray(cells, dtype=np.int64)
        if len(self.cells) == 0:
            raise MeshError("mesh has no cells")
        self.parent_mesh = None
        self.parent = None
        self.child_offset = None
        self.refine_factor = 1
        self._build_edges()

    @property
    def dim(self):
        """Ambient dimension of the vertex coordinates."""
        return self.vertices.shape[1]

    @property
    def ncells(self):
        return len(self.cells)

    @property
    def nvertices(self):
        return len(self.vertices)

    @property
    def nedges(self):
        return len(self.edges)

    def _build_edges(self):
        nc = self.ncells
        loc = np.array(EDGE_VERTICES)
        start = self.cells[:, loc[:, 0]]
        end = self.cells[:, loc[:, 1]]
        pairs = np.stack([np.minimum(start, end), np.maximum(start, end)], -1)
        edges, inverse = np.unique(pairs.reshape(-1, 2), axis=0,
                                   return_inverse=True)
        self.edges = edges
        self.cell_edges = inverse.reshape(nc, 4)
        self.cell_edge_signs = np.where(start < end, 1.0, -1.0)

        counts = np.bincount(self.cell_edges.ravel(), minlength=len(edges))
        if counts.max() > 2:
            raise MeshError("non-manifold edge found")
        self.edge_cells = np.full((len(edges), 2), -1, dtype=np.int64)
        order = np.argsort(self.cell_edges.ravel(), kind="stable")
        flat_cells = np.repeat(np.arange(nc), 4)[order]
        first = np.r_[0, np.cumsum(counts)[:-1]]
        self.edge_cells[:, 0] = flat_cells[first]
        two = counts == 2
        self.edge_cells[two, 1] = flat_cells[first[two] + 1]
        self.boundary_edges = counts == 1
        self.boundary_vertices = np.zeros(self.nvertices, dtype=bool)
        self.boundary_vertices[self.edges[self.boundary_edges].ravel()] = True

    def map(self, xhat, cells=None):
        """Physical points and Jacobians.

        ``xhat`` is either shared reference points (nq, 2) or per-cell points
        (ncells_selected, nq, 2). Returns ``x`` of shape (nc, nq, dim) and
        ``J`` of shape (nc, nq, dim, 2).
        """
        cells = np.arange(self.ncells) if cells is None else np.asarray(cells)
        xhat = np.asarray(xhat, dtype=float)
        if xhat.ndim == 2:
            xhat = np.broadcast_to(xhat, (len(cells),) + xhat.shape)
        return self._map(cells, xhat)

    def _map(self, cells, xhat):
        raise NotImplementedError

    def cell_geometry(self, cell, xhat):
        """Physical point and geometry of a single cell at one parametric point."""
        if not 0 <= cell < self.ncells:
            raise MeshError(f"cell id {cell} out of range [0, {self.ncells})")
        x, J = self.map(np.asarray(xhat, dtype=float).reshape(1, 2), [cell])
        J = J[0, 0]
        G = J.T @ J
        return x[0, 0], CellGeometry(J, G, float(np.sqrt(np.linalg.det(G))))

    def to_parent(self, xhat, cells=None):
        """Reference coordinates inside the parent cell of points given in
        the reference frames of (refined) ``cells``."""
        if self.parent is None:
            raise MeshError("mesh has no parent")
        cells = np.arange(self.ncells) if cells is None else np.asarray(cells)
        xhat = np.asarray(xhat, dtype=float)
        if xhat.ndim == 2:
            xhat = np.broadcast_to(xhat, (len(cells),) + xhat.shape)
        off = self.child_offset[cells][:, None, :]
        return (xhat + 1.0 + 2.0 * off) / self.refine_factor - 1.0

    def cell_measures(self, npts=4):
        """Area of every cell by tensor Gauss quadrature."""
        from .quadrature import gauss_square
        q, w = gauss_square(npts)
        _, J = self.map(q)
        return np.einsum("cq,q->c", area_element(J), w)


def area_element(J):
    """sqrt(det(J^T J)) for Jacobians of shape (..., dim, 2)."""
    if J.shape[-2] == 2:
        return np.abs(J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0])
    G = np.einsum("...ia,...ib->...ab", J, J)
    return np.sqrt(G[..., 0, 0] * G[..., 1, 1] - G[..., 0, 1] * G[..., 1, 0])


class CartesianMesh(QuadMesh):
    """Uniform nx-by-ny grid on an axis-aligned rectangle."""

    kind = "cartesian"

    def __init__(self, nx, ny, bounds=(0.0, 1.0, 0.0, 1.0)):
        if nx < 1 or ny < 1:
            raise MeshError(f"need at least one cell per axis, got {nx}x{ny}")
        x0, x1, y0, y1 = (float(b) for b in bounds)
        if not (x1 > x0 and y1 > y0):
            raise MeshError(f"degenerate bounds {bounds}")
        self.nx, self.ny = int(nx), int(ny)
        self.bounds = (x0, x1, y0, y1)
        self.hx = (x1 - x0) / nx
        self.hy = (y1 - y0) / ny
        xs = np.linspace(x0, x1, nx + 1)
        ys = np.linspace(y0, y1, ny + 1)
        X, Y = np.meshgrid(xs, ys, indexing="xy")
        verts = np.column_stack([X.ravel(), Y.ravel()])
        i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
        i, j = i.ravel(), j.ravel()
        v = lambda a, b: a + (nx + 1) * b
        cells = np.column_stack([v(i, j), v(i + 1, j), v(i + 1, j + 1), v(i, j + 1)])
        super().__init__(verts, cells)
        self.cell_index = np.column_stack([i, j])

    def __repr__(self):
        return f"CartesianMesh({self.nx}x{self.ny}, bounds={self.bounds})"

    @property
    def h(self):
        return max(self.hx, self.hy)

    def _map(self, cells, xhat):
        ij = self.cell_index[cells].astype(float)
        x0, _, y0, _ = self.bounds
        x = np.empty(xhat.shape)
        x[..., 0] = x0 + (ij[:, None, 0] + (xhat[..., 0] + 1.0) / 2.0) * self.hx
        x[..., 1] = y0 + (ij[:, None, 1] + (xhat[..., 1] + 1.0) / 2.0) * self.hy
        J = np.zeros(xhat.shape[:2] + (2, 2))
        J[..., 0, 0] = self.hx / 2.0
        J[..., 1, 1] = self.hy / 2.0
        return x, J

    def locate(self, points, tol=1e-12):
        """Cell ids and reference coordinates of physical points."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        x0, x1, y0, y1 = self.bounds
        sx = (points[:, 0] - x0) / self.hx
        sy = (points[:, 1] - y0) / self.hy
        eps_x, eps_y = tol * self.nx, tol * self.ny
        if (np.any(sx < -eps_x) or np.any(sx > self.nx + eps_x)
                or np.any(sy < -eps_y) or np.any(sy > self.ny + eps_y)):
            raise MeshError("point outside the mesh domain")
        i = np.clip(np.floor(sx).astype(np.int64), 0, self.nx - 1)
        j = np.clip(np.floor(sy).astype(np.int64), 0, self.ny - 1)
        xhat = np.column_stack([2.0 * (sx - i) - 1.0, 2.0 * (sy - j) - 1.0])
        return i + self.nx * j, xhat

    def boundary_normals(self, edges):
        """Outward unit normals of boundary edges."""
        verts = self.vertices[self.edges[edges]]
        mid = verts.mean(axis=1)
        x0, x1, y0, y1 = self.bounds
        n = np.zeros((len(edges), 2))
        tol = 1e-12 * max(x1 - x0, y1 - y0)
        n[np.abs(mid[:, 0] - x0) < tol] = (-1.0, 0.0)
        n[np.abs(mid[:, 0] - x1) < tol] = (1.0, 0.0)
        n[np.abs(mid[:, 1] - y0) < tol] = (0.0, -1.0)
        n[np.abs(mid[:, 1] - y1) < tol] = (0.0, 1.0)
        return n


# (centre, first tangent axis, second tangent axis); a x b = centre, so every
# panel parameterisation is orientation-preserving w.r.t. the outward normal.
PANELS = np.array([
    [[1, 0, 0], [0, 1, 0], [0, 0, 1]],
    [[0, 1, 0], [-1, 0, 0], [0, 0, 1]],
    [[-1, 0, 0], [0, -1, 0], [0, 0, 1]],
    [[0, -1, 0], [1, 0, 0], [0, 0, 1]],
    [[0, 0, 1], [1, 0, 0], [0, 1, 0]],
    [[0, 0, -1], [0, 1, 0], [1, 0, 0]],
], dtype=float)


class CubedSphereMesh(QuadMesh):
    """Equiangular gnomonic cubed sphere of the unit sphere, ne x ne per panel."""

    kind = "sphere"
    closed = True

    def __init__(self, ne):
        if ne < 1:
            raise MeshError(f"need ne >= 1, got {ne}")
        self.ne = int(ne)
        n = self.ne
        i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="xy")
        i, j = i.ravel(), j.ravel()
        keys, coords = [], []
        s_i = -1.0 + 2.0 * i / n
        s_j = -1.0 + 2.0 * j / n
        t_i = np.tan(np.pi / 4 * s_i)
        t_j = np.tan(np.pi / 4 * s_j)
        for c, a, b in PANELS:
            lin = c + np.outer(s_i, a) + np.outer(s_j, b)
            keys.append(np.rint(n * (lin + 1.0) / 2.0).astype(np.int64))
            P = c + np.outer(t_i, a) + np.outer(t_j, b)
            coords.append(P / np.linalg.norm(P, axis=1, keepdims=True))
        keys = np.concatenate(keys)
        coords = np.concatenate(coords)
        uniq, first, inverse = np.unique(keys, axis=0, return_index=True,
                                         return_inverse=True)
        inverse = inverse.ravel()
        verts = coords[first]

        ci, cj = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
        ci, cj = ci.ravel(), cj.ravel()
        cells = []
        index = []
        for p in range(6):
            loc = lambda a, b: p * (n + 1) ** 2 + a + (n + 1) * b
            quad = np.column_stack([loc(ci, cj), loc(ci + 1, cj),
                                    loc(ci + 1, cj + 1), loc(ci, cj + 1)])
            cells.append(inverse[quad])
            index.append(np.column_stack([np.full(n * n, p), ci, cj]))
        super().__init__(verts, np.concatenate(cells))
        self.cell_index = np.concatenate(index)

    def __repr__(self):
        return f"CubedSphereMesh(ne={self.ne}, cells={self.ncells})"

    @property
    def h(self):
        return 2.0 / self.ne

    def _map(self, cells, xhat):
        p, i, j = self.cell_index[cells].T
        c, a, b = (PANELS[p, r][:, None, :] for r in range(3))
        d = np.pi / (2 * self.ne)
        xi = -np.pi / 4 + (i[:, None] + (xhat[..., 0] + 1.0) / 2.0) * d
        eta = -np.pi / 4 + (j[:, None] + (xhat[..., 1] + 1.0) / 2.0) * d
        t1, t2 = np.tan(xi), np.tan(eta)
        P = c + t1[..., None] * a + t2[..., None] * b
        r = np.linalg.norm(P, axis=-1, keepdims=True)
        x = P / r
        dP = np.stack([(d / 2) / np.cos(xi)[..., None] ** 2 * a,
                       (d / 2) / np.cos(eta)[..., None] ** 2 * b], axis=-1)
        proj = np.eye(3) - x[..., :, None] * x[..., None, :]
        J = proj @ dP / r[..., None]
        return x, J

    def locate(self, points, tol=1e-8):
        """Cell ids and reference coordinates of points on the unit sphere."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if np.any(np.abs(np.linalg.norm(points, axis=1) - 1.0) > tol):
            raise MeshError("point not on the unit sphere")
        proj = points @ PANELS[:, 0].T
        p = np.argmax(proj, axis=1)
        c, a, b = PANELS[p, 0], PANELS[p, 1], PANELS[p, 2]
        den = np.einsum("nk,nk->n", points, c)
        xi = np.arctan(np.einsum("nk,nk->n", points, a) / den)
        eta = np.arctan(np.einsum("nk,nk->n", points, b) / den)
        d = np.pi / (2 * self.ne)
        sx, sy = (xi + np.pi / 4) / d, (eta + np.pi / 4) / d
        i = np.clip(np.floor(sx).astype(np.int64), 0, self.ne - 1)
        j = np.clip(np.floor(sy).astype(np.int64), 0, self.ne - 1)
        cells = p * self.ne ** 2 + j * self.ne + i
        return cells, np.column_stack([2.0 * (sx - i) - 1.0, 2.0 * (sy - j) - 1.0])


def build_cartesian(nx, ny, bounds=(0.0, 1.0, 0.0, 1.0)):
    return CartesianMesh(nx, ny, bounds)


def build_cubed_sphere(ne):
    return CubedSphereMesh(ne)


def refine(mesh, factor):
    """Split every cell into factor x factor children.

    The result remembers ``mesh`` as its parent so quantities living on the
    coarse mesh can be evaluated at points of the fine cells.
    """
    factor = int(factor)
    if factor < 1:
        raise MeshError(f"refinement factor must be >= 1, got {factor}")
    if factor == 1:
        return mesh
    if isinstance(mesh, CartesianMesh):
        fine = CartesianMesh(mesh.nx * factor, mesh.ny * factor, mesh.bounds)
        I, J = fine.cell_index.T
        fine.parent = (I // factor) + mesh.nx * (J // factor)
    elif isinstance(mesh, CubedSphereMesh):
        fine = CubedSphereMesh(mesh.ne * factor)
        p, I, J = fine.cell_index.T
        fine.parent = p * mesh.ne ** 2 + (J // factor) * mesh.ne + I // factor
    else:
        raise MeshError(f"cannot refine {type(mesh).__name__}")
    fine.child_offset = np.column_stack([I % factor, J % factor])
    fine.parent_mesh = mesh
    fine.refine_factor = factor
    return fine


def uniform_refine(mesh, times):
    """Bisect every cell ``times`` times per axis (4**times children)."""
    if times < 0:
        raise MeshError("times must be non-negative")
    return refine(mesh, 2 ** times)


def write_vtk(mesh, path, cell_data=None, point_data=None, title="compfeinn mesh"):
    """Legacy ASCII VTK dump (POLYDATA on the sphere, UNSTRUCTURED_GRID otherwise)."""
    cell_data = cell_data or {}
    point_data = point_data or {}
    pts = mesh.vertices
    if pts.shape[1] == 2:
        pts = np.column_stack([pts, np.zeros(len(pts))])
    lines = ["# vtk DataFile Version 3.0", title, "ASCII"]
    nc = mesh.ncells
    if mesh.closed:
        lines.append("DATASET POLYDATA")
        lines.append(f"POINTS {len(pts)} double")
        lines += [" ".join(repr(float(v)) for v in p) for p in pts]
        lines.append(f"POLYGONS {nc} {5 * nc}")
        lines += ["4 " + " ".join(str(v) for v in c) for c in mesh.cells]
    else:
        lines.append("DATASET UNSTRUCTURED_GRID")
        lines.append(f"POINTS {len(pts)} double")
        lines += [" ".join(repr(float(v)) for v in p) for p in pts]
        lines.append(f"CELLS {nc} {5 * nc}")
        lines += ["4 " + " ".join(str(v) for v in c) for c in mesh.cells]
        lines.append(f"CELL_TYPES {nc}")
        lines += ["9"] * nc
    for header, data, n in (("CELL_DATA", cell_data, nc),
                            ("POINT_DATA", point_data, len(pts))):
        if not data:
            continue
        lines.append(f"{header} {n}")
        for name, values in data.items():
            values = np.asarray(values, dtype=float)
            if len(values) != n:
                raise MeshError(f"{header} field {name!r} has {len(values)} entries, expected {n}")
            if values.ndim == 1:
                lines.append(f"SCALARS {name} double 1")
                lines.append("LOOKUP_TABLE default")
                lines += [repr(float(v)) for v in values]
            else:
                if values.shape[1] == 2:
                    values = np.column_stack([values, np.zeros(len(values))])
                lines.append(f"VECTORS {name} double")
                lines += [" ".join(repr(float(v)) for v in row) for row in values]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path
