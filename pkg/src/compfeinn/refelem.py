"""Reference elements on the square [-1, 1]^2.

Every element is described by a polynomial prebasis (tensor Legendre
products per vector component) and a list of moment / nodal DOF
functionals. Shape functions are obtained by inverting the DOF-by-prebasis
Vandermonde matrix, so that ``dof_i(phi_j) = delta_ij``.

Local conventions shared with the mesh module::

    v3 ---- top (2) ---> v2
    ^                    ^
    left (3)          right (1)
    |                    |
    v0 -- bottom (0) --> v1

Edges carry a reference direction (arrows above). The ND tangential
moments use that direction; RT normal moments use the direction rotated by
90 degrees counter-clockwise.
"""

from dataclasses import dataclass, replace

import numpy as np

from .quadrature import (gauss_1d, gauss_square, legendre_derivative_table,
                         legendre_table)

NEDELEC = "Nedelec"
RAVIART_THOMAS = "RaviartThomas"
LAGRANGE_CG = "LagrangeCG"
LAGRANGE_DG = "LagrangeDG"

REF_VERTICES = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
EDGE_VERTICES = ((0, 1), (1, 2), (3, 2), (0, 3))


def edge_point(edge, s):
    """Map the edge parameter ``s`` in [-1, 1] onto local edge ``edge``."""
    a, b = (REF_VERTICES[v] for v in EDGE_VERTICES[edge])
    s = np.asarray(s, dtype=float)
    return a + np.multiply.outer((s + 1.0) / 2.0, b - a)


def edge_tangent(edge):
    """d(point)/ds for local edge ``edge`` (unit length on the reference square)."""
    a, b = (REF_VERTICES[v] for v in EDGE_VERTICES[edge])
    return (b - a) / 2.0


def rotate(v):
    """Rotate vectors (last axis of length 2) by 90 degrees counter-clockwise."""
    v = np.asarray(v)
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


@dataclass(frozen=True, eq=False)
class Slot:
    """A group of DOFs attached to one local entity, sharing quadrature points."""

    kind: str  # "vertex", "edge" or "interior"
    index: int
    points: np.ndarray


@dataclass(frozen=True, eq=False)
class DofFunctional:
    """``dof(u) = sum_q weights[q] . u(points[q])`` on the reference cell.

    ``weights`` already folds the quadrature weight, the test polynomial and
    the direction vector (tangent, normal or component selector).
    """

    slot: int
    entity: str
    local_index: int
    points: np.ndarray
    weights: np.ndarray

    def __call__(self, field):
        vals = np.asarray(field(self.points), dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        return float(np.sum(self.weights * vals))


@dataclass(frozen=True, eq=False)
class ElementDef:
    family: str
    order: int
    ncomp: int
    prebasis: np.ndarray  # (npre, 3) rows of (component, x degree, y degree)
    shape_coeffs: np.ndarray  # (npre, ndofs)
    dofs: tuple
    slots: tuple
    mapping: str  # "covariant", "contravariant" or "scalar"
    edge_reversal: str = "sign"  # how a flipped edge acts on its DOFs

    @property
    def ndofs(self):
        return len(self.dofs)

    @property
    def max_degree(self):
        return int(self.prebasis[:, 1:].max())

    def dofs_per_entity(self, kind):
        """Number of DOFs on a single entity of the given kind."""
        slots = [i for i, s in enumerate(self.slots) if s.kind == kind]
        if not slots:
            return 0
        return sum(1 for d in self.dofs if d.slot == slots[0])

    def slot_dofs(self, slot):
        return [i for i, d in enumerate(self.dofs) if d.slot == slot]

    def slot_weights(self, slot):
        """Stacked functional weights of one slot, shape (ndof_slot, nq, ncomp)."""
        return np.stack([self.dofs[i].weights for i in self.slot_dofs(slot)])

    def __repr__(self):
        return f"ElementDef({self.family}, k={self.order}, ndofs={self.ndofs})"


def _prebasis_tables(prebasis, xhat, derivatives=False):
    xhat = np.atleast_2d(np.asarray(xhat, dtype=float))
    deg = int(prebasis[:, 1:].max())
    Lx = legendre_table(xhat[:, 0], deg)
    Ly = legendre_table(xhat[:, 1], deg)
    comp, ax, ay = prebasis.T
    ncomp = int(comp.max()) + 1
    npts, npre = xhat.shape[0], prebasis.shape[0]
    cols = np.arange(npre)
    vals = np.zeros((npts, npre, ncomp))
    vals[:, cols, comp] = Lx[:, ax] * Ly[:, ay]
    if not derivatives:
        return vals
    dLx = legendre_derivative_table(xhat[:, 0], deg)
    dLy = legendre_derivative_table(xhat[:, 1], deg)
    dx = np.zeros_like(vals)
    dy = np.zeros_like(vals)
    dx[:, cols, comp] = dLx[:, ax] * Ly[:, ay]
    dy[:, cols, comp] = Lx[:, ax] * dLy[:, ay]
    return vals, dx, dy


def eval_prebasis(elem, xhat):
    return _prebasis_tables(elem.prebasis, xhat)


def eval_shape(elem, xhat, derivative=None):
    """Shape functions of ``elem`` at reference points ``xhat`` (npts, 2).

    Returns values of shape (npts, ndofs, ncomp). With ``derivative`` set to
    ``"curl"``, ``"div"`` (vector elements) or ``"grad"`` (scalar elements)
    a second array with the parametric derivative is returned as well:
    curl and div have shape (npts, ndofs), grad (npts, ndofs, 2).
    """
    C = elem.shape_coeffs
    if derivative is None:
        return np.einsum("npc,pd->ndc", _prebasis_tables(elem.prebasis, xhat), C)
    vals, dx, dy = _prebasis_tables(elem.prebasis, xhat, derivatives=True)
    vals = np.einsum("npc,pd->ndc", vals, C)
    dx = np.einsum("npc,pd->ndc", dx, C)
    dy = np.einsum("npc,pd->ndc", dy, C)
    if derivative == "curl":
        if elem.ncomp != 2:
            raise ValueError("curl needs a vector element")
        return vals, dx[..., 1] - dy[..., 0]
    if derivative == "div":
        if elem.ncomp != 2:
            raise ValueError("div needs a vector element")
        return vals, dx[..., 0] + dy[..., 1]
    if derivative == "grad":
        if elem.ncomp != 1:
            raise ValueError("grad needs a scalar element")
        return vals, np.stack([dx[..., 0], dy[..., 0]], axis=-1)
    raise ValueError(f"unknown derivative {derivative!r}")


def vandermonde(prebasis, dofs):
    """V[i, m] = dof_i(p_m)."""
    V = np.zeros((len(dofs), prebasis.shape[0]))
    for i, d in enumerate(dofs):
        vals = _prebasis_tables(prebasis, d.points)
        V[i] = np.einsum("qc,qmc->m", d.weights, vals)
    return V


def _finalize(family, order, prebasis, dofs, slots, mapping, edge_reversal):
    prebasis = np.asarray(prebasis, dtype=np.int64).reshape(-1, 3)
    V = vandermonde(prebasis, dofs)
    if V.shape[0] != V.shape[1]:
        raise ValueError(f"{family}_{order}: {V.shape[0]} DOFs for "
                         f"{V.shape[1]} prebasis functions")
    coeffs = np.linalg.solve(V, np.eye(V.shape[0]))
    return ElementDef(family, order, int(prebasis[:, 0].max()) + 1, prebasis,
                      coeffs, tuple(dofs), tuple(slots), mapping, edge_reversal)


def duality_matrix(elem):
    """dof_i(phi_j); the identity up to round-off for a well-built element."""
    return vandermonde(elem.prebasis, elem.dofs) @ elem.shape_coeffs


def _edge_moment_dofs(k, directions):
    """k Legendre moments per edge of u . directions[edge]."""
    s, w = gauss_1d(k + 1)
    P = legendre_table(s, k - 1)
    slots, dofs = [], []
    for e in range(4):
        pts = edge_point(e, s)
        slots.append(Slot("edge", e, pts))
        for j in range(k):
            wts = np.outer(w * P[:, j], directions[e])
            dofs.append(DofFunctional(e, "edge", j, pts, wts))
    return slots, dofs


def _interior_moment_dofs(k, slot_id, rotated=False):
    """Moments against Q_{k-1,k-2} x Q_{k-2,k-1} (optionally rotated)."""
    if k < 2:
        return [], []
    pts, w = gauss_square(2 * k)
    Lx = legendre_table(pts[:, 0], k - 1)
    Ly = legendre_table(pts[:, 1], k - 1)
    dofs = []
    idx = 0
    for comp, (nx, ny) in enumerate(((k, k - 1), (k - 1, k))):
        for b in range(ny):
            for a in range(nx):
                q = w * Lx[:, a] * Ly[:, b]
                wts = np.zeros((len(w), 2))
                wts[:, comp] = q
                if rotated:
                    wts = rotate(wts)
                dofs.append(DofFunctional(slot_id, "interior", idx, pts, wts))
                idx += 1
    return [Slot("interior", 0, pts)], dofs


def _vector_prebasis(k, first):
    """Q_{a,b} x Q_{b,a} with (a, b) = (k-1, k) if ``first`` else (k, k-1)."""
    rows = []
    degs = ((k - 1, k), (k, k - 1)) if first else ((k, k - 1), (k - 1, k))
    for comp, (dx, dy) in enumerate(degs):
        for b in range(dy + 1):
            for a in range(dx + 1):
                rows.append((comp, a, b))
    return rows


def nedelec_quad(k):
    """First-kind Nedelec element ND_k on the reference square."""
    if k < 1:
        raise ValueError("Nedelec order must be >= 1")
    tangents = [edge_tangent(e) for e in range(4)]
    slots, dofs = _edge_moment_dofs(k, tangents)
    islots, idofs = _interior_moment_dofs(k, len(slots))
    return _finalize(NEDELEC, k, _vector_prebasis(k, True), dofs + idofs,
                     slots + islots, "covariant", "sign")


def raviart_thomas_quad(k):
    """Raviart-Thomas element RT_k, the 90-degree rotation of ND_k."""
    if k < 1:
        raise ValueError("Raviart-Thomas order must be >= 1")
    normals = [rotate(edge_tangent(e)) for e in range(4)]
    slots, dofs = _edge_moment_dofs(k, normals)
    islots, idofs = _interior_moment_dofs(k, len(slots), rotated=True)
    return _finalize(RAVIART_THOMAS, k, _vector_prebasis(k, False),
                     dofs + idofs, slots + islots, "contravariant", "sign")


def _selector(n, i):
    w = np.zeros((n, 1))
    w[i] = 1.0
    return w


def lagrange_quad(k, continuity="CG"):
    """Tensor-product nodal element Q_k (CG) or discontinuous DG_k."""
    if continuity not in ("CG", "DG"):
        raise ValueError(f"continuity must be 'CG' or 'DG', got {continuity!r}")
    if (continuity == "CG" and k < 1) or k < 0:
        raise ValueError(f"invalid Lagrange element order {k} for {continuity}")
    prebasis = [(0, a, b) for b in range(k + 1) for a in range(k + 1)]
    one = np.ones((1, 1))
    if continuity == "DG":
        if k == 0:
            pts = np.zeros((1, 2))
        else:
            t = np.linspace(-1.0, 1.0, k + 1)
            X, Y = np.meshgrid(t, t, indexing="xy")
            pts = np.column_stack([X.ravel(), Y.ravel()])
        dofs = [DofFunctional(0, "interior", i, pts, _selector(len(pts), i))
                for i in range(len(pts))]
        return _finalize(LAGRANGE_DG, k, prebasis, dofs,
                         [Slot("interior", 0, pts)], "scalar", "none")

    slots, dofs = [], []
    for v in range(4):
        pts = REF_VERTICES[v:v + 1]
        slots.append(Slot("vertex", v, pts))
        dofs.append(DofFunctional(v, "vertex", 0, pts, one))
    inner = np.linspace(-1.0, 1.0, k + 1)[1:-1]
    if k > 1:
        for e in range(4):
            pts = edge_point(e, inner)
            slots.append(Slot("edge", e, pts))
            for j in range(k - 1):
                dofs.append(DofFunctional(len(slots) - 1, "edge", j, pts,
                                          _selector(k - 1, j)))
        X, Y = np.meshgrid(inner, inner, indexing="xy")
        pts = np.column_stack([X.ravel(), Y.ravel()])
        slots.append(Slot("interior", 0, pts))
        for j in range(len(pts)):
            dofs.append(DofFunctional(len(slots) - 1, "interior", j, pts,
                                      _selector(len(pts), j)))
    return _finalize(LAGRANGE_CG, k, prebasis, dofs, slots, "scalar", "permute")


def make_element(family, order):
    """Build an element from a family name (as stored in ``ElementDef.family``)."""
    if family == NEDELEC:
        return nedelec_quad(order)
    if family == RAVIART_THOMAS:
        return raviart_thomas_quad(order)
    if family == LAGRANGE_CG:
        return lagrange_quad(order, "CG")
    if family == LAGRANGE_DG:
        return lagrange_quad(order, "DG")
    raise ValueError(f"unknown element family {family!r}")


def rescaled(elem, factor):
    """Same element with every DOF functional multiplied by ``factor``.

    The shape functions are rebased so duality still holds; the spanned space
    is unchanged.
    """
    dofs = tuple(replace(d, weights=d.weights * factor) for d in elem.dofs)
    return replace(elem, dofs=dofs, shape_coeffs=elem.shape_coeffs / factor)
