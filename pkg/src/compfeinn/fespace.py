"""Global finite element spaces on quad meshes.

DOFs are numbered entity by entity: all vertex DOFs, then edge DOFs, then
cell-interior DOFs. Edge moment DOFs follow the global edge orientation
(lower to higher vertex id). A cell whose local edge runs the other way
sees local DOF ``j`` of that edge as ``(-1)**(j+1)`` times the global one,
since both the tangent and the odd Legendre weights flip. Nodal (CG) edge
DOFs are permuted instead of sign-flipped.

Vector values live in the ambient frame of the mesh (2 components on flat
meshes, 3 on the sphere) and are obtained from reference values with the
covariant (ND), contravariant (RT) or identity (Lagrange) maps.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import refine
from .refelem import (LAGRANGE_CG, LAGRANGE_DG, NEDELEC, RAVIART_THOMAS,
                      eval_shape, make_element)


class SpaceError(ValueError):
    pass


class FESpace:
    """DOF numbering of one element family on one mesh.

    ``cell_dofs[c, i]`` is the global id of local DOF ``i`` of cell ``c``
    and ``cell_signs[c, i]`` the factor relating the local shape function to
    the global basis function. ``constrained`` flags DOFs fixed by a
    Dirichlet condition; the unknowns of a problem are ``free``.
    """

    def __init__(self, mesh, elem, constrained=None):
        if mesh.dim == 3 and elem.family == NEDELEC:
            raise SpaceError("Nedelec spaces are only supported on flat meshes")
        self.mesh = mesh
        self.elem = elem
        self._number()
        if constrained is None:
            constrained = np.zeros(self.ndofs, dtype=bool)
        self.constrained = np.asarray(constrained, dtype=bool)
        self.free = np.flatnonzero(~self.constrained)

    def __repr__(self):
        return (f"FESpace({self.elem.family}_{self.elem.order} on {self.mesh!r}, "
                f"ndofs={self.ndofs}, free={self.nfree})")

    @property
    def surface(self):
        return self.mesh.dim == 3

    @property
    def nfree(self):
        return len(self.free)

    @property
    def value_dim(self):
        """Number of physical components of a function in this space."""
        return 1 if self.elem.ncomp == 1 else self.mesh.dim

    def _number(self):
        mesh, elem = self.mesh, self.elem
        nvd = elem.dofs_per_entity("vertex")
        ned = elem.dofs_per_entity("edge")
        nid = elem.dofs_per_entity("interior")
        off_e = nvd * mesh.nvertices
        off_i = off_e + ned * mesh.nedges
        self.ndofs = off_i + nid * mesh.ncells
        nc = mesh.ncells
        ids = np.empty((nc, elem.ndofs), dtype=np.int64)
        signs = np.ones((nc, elem.ndofs))
        for i, d in enumerate(elem.dofs):
            slot = elem.slots[d.slot]
            j = d.local_index
            if slot.kind == "vertex":
                ids[:, i] = mesh.cells[:, slot.index] * nvd + j
            elif slot.kind == "edge":
                e = mesh.cell_edges[:, slot.index]
                rev = mesh.cell_edge_signs[:, slot.index] < 0
                if elem.edge_reversal == "sign":
                    ids[:, i] = off_e + e * ned + j
                    signs[:, i] = np.where(rev, (-1.0) ** (j + 1), 1.0)
                elif elem.edge_reversal == "permute":
                    ids[:, i] = off_e + e * ned + np.where(rev, ned - 1 - j, j)
                else:
                    raise SpaceError(f"edge DOFs without a reversal rule in {elem}")
            else:
                ids[:, i] = off_i + np.arange(nc) * nid + j
        self.cell_dofs = ids
        self.cell_signs = signs

        owner = np.full(self.ndofs, nc, dtype=np.int64)
        np.minimum.at(owner, ids, np.repeat(np.arange(nc)[:, None], elem.ndofs, 1))
        self.owner = owner

        on_boundary = np.zeros(self.ndofs, dtype=bool)
        if nvd:
            bv = np.flatnonzero(mesh.boundary_vertices)
            on_boundary[(bv[:, None] * nvd + np.arange(nvd)).ravel()] = True
        if ned:
            be = np.flatnonzero(mesh.boundary_edges)
            on_boundary[(off_e + be[:, None] * ned + np.arange(ned)).ravel()] = True
        self.boundary_dofs = on_boundary

    def extend(self, free_values, offset=None):
        """Full DOF vector from free values (plus an optional offset)."""
        full = np.zeros(self.ndofs) if offset is None else np.array(offset, dtype=float)
        full[self.free] += free_values
        return full


def build_space(mesh, elem):
    """FE space of ``elem`` (an ElementDef or a (family, order) pair) on ``mesh``."""
    if isinstance(elem, tuple):
        elem = make_element(*elem)
    if mesh.dim == 3 and elem.family not in (RAVIART_THOMAS, LAGRANGE_DG):
        raise SpaceError(f"{elem.family} is not supported on surface meshes")
    return FESpace(mesh, elem)


def zero_trace_subspace(space):
    """Same numbering with every boundary-entity DOF constrained to zero."""
    if space.mesh.closed:
        raise SpaceError("closed surface has no boundary")
    return FESpace(space.mesh, space.elem, space.constrained | space.boundary_dofs)


def linearized_test_space(trial, factor=None):
    """Lowest-order space of the trial family on the mesh split ``factor`` times
    per axis, with the same dimension as ``trial``.

    The default factor is the trial order for ND, RT and CG, and order + 1
    for DG (so DG_k maps onto DG_0 cell by cell). For a lowest-order trial
    space the trial space itself is returned.
    """
    elem = trial.elem
    low = 0 if elem.family == LAGRANGE_DG else 1
    if factor is None:
        factor = elem.order + 1 if elem.family == LAGRANGE_DG else elem.order
    if elem.order == low and factor == 1:
        return trial
    space = build_space(refine(trial.mesh, factor), make_element(elem.family, low))
    if trial.constrained.any():
        space = zero_trace_subspace(space)
    return space


# -- evaluation ----------------------------------------------------------

def _per_cell(xhat, ncells):
    xhat = np.asarray(xhat, dtype=float)
    if xhat.ndim == 2:
        xhat = np.broadcast_to(xhat, (ncells,) + xhat.shape)
    return xhat


def _metric(J):
    G = np.einsum("...ia,...ib->...ab", J, J)
    det = G[..., 0, 0] * G[..., 1, 1] - G[..., 0, 1] * G[..., 1, 0]
    Ginv = np.stack([np.stack([G[..., 1, 1], -G[..., 0, 1]], -1),
                     np.stack([-G[..., 1, 0], G[..., 0, 0]], -1)], -2) / det[..., None, None]
    return Ginv, np.sqrt(det)


def _signed_measure(J):
    """Oriented area element: det J on flat meshes, sqrt|G| on the sphere."""
    if J.shape[-2] == 2:
        return J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    return _metric(J)[1]


def geometry(mesh, cells, xhat):
    """Physical points, Jacobians and oriented area elements at per-cell points."""
    x, J = mesh.map(xhat, cells)
    return x, J, _signed_measure(J)


def push_forward(mapping, ref, J):
    """Map reference vectors ``ref`` (..., nd, 2) to physical ones."""
    if mapping == "scalar":
        return ref
    if mapping == "covariant":
        Ginv, _ = _metric(J)
        K = np.einsum("...ia,...ab->...ib", J, Ginv)
        return np.einsum("...ib,...db->...di", K, ref)
    if mapping == "contravariant":
        return np.einsum("...ia,...da->...di", J, ref) / _signed_measure(J)[..., None, None]
    raise ValueError(f"unknown mapping {mapping!r}")


def pullback_matrix(mapping, J):
    """Q with ref = Q @ physical, shape (..., ncomp_ref, ncomp_phys)."""
    if mapping == "scalar":
        return np.ones(J.shape[:-2] + (1, 1))
    Jt = np.swapaxes(J, -1, -2)
    if mapping == "covariant":
        return Jt
    if mapping == "contravariant":
        Ginv, _ = _metric(J)
        return _signed_measure(J)[..., None, None] * (Ginv @ Jt)
    raise ValueError(f"unknown mapping {mapping!r}")


def eval_basis(space, cells, xhat, derivative=None, mesh_points=False):
    """Signed global basis functions restricted to ``cells``.

    ``xhat`` holds reference points of the space's own cells, either shared
    (nq, 2) or per cell (ncells, nq, 2). Returns values (nc, nq, nd, vdim)
    and, if requested, the physical curl / div (nc, nq, nd) or gradient
    (nc, nq, nd, dim). With ``mesh_points`` the physical points and the
    oriented area elements are appended.
    """
    elem, mesh = space.elem, space.mesh
    cells = np.asarray(cells)
    xhat = _per_cell(xhat, len(cells))
    nc, nq = xhat.shape[:2]
    flat = xhat.reshape(-1, 2)
    if derivative is None:
        ref = eval_shape(elem, flat)
        dref = None
    else:
        ref, dref = eval_shape(elem, flat, derivative)
        dref = dref.reshape((nc, nq) + dref.shape[1:])
    ref = ref.reshape(nc, nq, elem.ndofs, elem.ncomp)
    x, J = mesh.map(xhat, cells)
    vals = push_forward(elem.mapping, ref, J)
    s = space.cell_signs[cells][:, None, :]
    vals = vals * s[..., None]
    out = [vals]
    if derivative is not None:
        if derivative in ("curl", "div"):
            d = dref / _signed_measure(J)[..., None]
            out.append(d * s)
        else:
            Ginv, _ = _metric(J)
            K = np.einsum("...ia,...ab->...ib", J, Ginv)
            d = np.einsum("cqib,cqdb->cqdi", K, dref)
            out.append(d * s[..., None])
    if mesh_points:
        out += [x, np.abs(_signed_measure(J))]
    return out[0] if len(out) == 1 else tuple(out)


def eval_cells(space, dofs, cells, xhat, derivative=None):
    """Values (and optionally curl/div/grad) of an FE function at per-cell points."""
    dofs = np.asarray(dofs, dtype=float)
    if dofs.shape != (space.ndofs,):
        raise SpaceError(f"expected a full DOF vector of length {space.ndofs}, "
                         f"got shape {dofs.shape}")
    cells = np.asarray(cells)
    coef = dofs[space.cell_dofs[cells]]
    res = eval_basis(space, cells, xhat, derivative)
    if derivative is None:
        return np.einsum("cqdi,cd->cqi", res, coef)
    vals, d = res
    vals = np.einsum("cqdi,cd->cqi", vals, coef)
    if d.ndim == 3:
        return vals, np.einsum("cqd,cd->cq", d, coef)
    return vals, np.einsum("cqdi,cd->cqi", d, coef)


def eval_fe_function(space, dofs, points, derivative=None):
    """FE function at physical points.

    Returns values of shape (npts, vdim) (or (npts,) for scalar spaces) and,
    with ``derivative``, the curl/div (npts,) or gradient (npts, dim).
    """
    cells, xhat = space.mesh.locate(points)
    res = eval_cells(space, dofs, cells, xhat[:, None, :], derivative)
    squeeze = space.elem.ncomp == 1
    if derivative is None:
        v = res[:, 0]
        return v[:, 0] if squeeze else v
    v, d = res
    v = v[:, 0]
    return (v[:, 0] if squeeze else v), d[:, 0]


# -- interpolation -------------------------------------------------------

def _sample(f, x, ncomp):
    n = x.shape[0] * x.shape[1]
    vals = np.asarray(f(x.reshape(n, -1)), dtype=float)
    if ncomp == 1 and vals.ndim == 1:
        vals = vals[:, None]
    if vals.shape != (n, ncomp):
        raise SpaceError(f"field returned shape {vals.shape}, expected {(n, ncomp)}")
    return vals.reshape(x.shape[0], x.shape[1], ncomp)


def interpolate(space, f, mask=None):
    """Global moment interpolant of ``f`` (full DOF vector).

    ``f`` maps physical points (n, dim) to values (n, vdim) or (n,) for
    scalar spaces. Each slot of the reference element is handled for all
    cells at once; shared DOFs take the value computed in their owner cell.
    With ``mask`` only the flagged DOFs are filled, the rest stay zero.
    """
    elem, mesh = space.elem, space.mesh
    out = np.zeros(space.ndofs)
    cell_ids = np.arange(mesh.ncells)
    for s, slot in enumerate(elem.slots):
        loc = elem.slot_dofs(s)
        ids = space.cell_dofs[:, loc]
        use = space.owner[ids[:, 0]] == cell_ids
        if mask is not None:
            use &= mask[ids].any(axis=1)
        cells = np.flatnonzero(use)
        if len(cells) == 0:
            continue
        x, J = mesh.map(slot.points, cells)
        u = _sample(f, x, space.value_dim)
        uref = np.einsum("cqrp,cqp->cqr", pullback_matrix(elem.mapping, J), u)
        vals = np.einsum("dqr,cqr->cd", elem.slot_weights(s), uref)
        out[ids[cells]] = vals * space.cell_signs[cells][:, loc]
    if mask is not None:
        out[~mask] = 0.0
    return out


@dataclass(frozen=True)
class InterpolationPlan:
    """Interpolation as a fixed sparse map from point samples to DOFs.

    ``matrix`` has one row per entry of ``rows`` (global DOF ids) and
    ``len(points) * ncomp`` columns, ordered point-major so that
    ``matrix @ samples.ravel()`` works for samples of shape (npts, ncomp).
    ``cells`` and ``xhat`` locate each point in the cell whose DOFs it feeds.
    """

    points: np.ndarray
    matrix: sp.csr_matrix
    ncomp: int
    rows: np.ndarray
    cells: np.ndarray  # owner cell of every point
    xhat: np.ndarray  # reference coordinates of every point in its cell

    @property
    def npoints(self):
        return len(self.points)

    def apply(self, samples):
        samples = np.asarray(samples, dtype=float).reshape(self.npoints, -1)
        if samples.shape[1] != self.ncomp:
            raise SpaceError(f"samples have {samples.shape[1]} components, "
                             f"plan expects {self.ncomp}")
        return self.matrix @ samples.ravel()

    def transpose_apply(self, dofs_bar):
        """Adjoint: cotangent on DOFs to cotangent on samples (npts, ncomp)."""
        return (self.matrix.T @ dofs_bar).reshape(self.npoints, self.ncomp)


def interpolation_plan(space, rows="free"):
    """Precompute the sample-to-DOF interpolation matrix.

    ``rows`` is "free" (the unknowns of a constrained space), "all", or an
    explicit array of global DOF ids. Points feeding none of the selected
    rows are dropped.
    """
    if isinstance(rows, str):
        rows = space.free if rows == "free" else np.arange(space.ndofs)
    rows = np.asarray(rows, dtype=np.int64)
    rowmap = np.full(space.ndofs, -1, dtype=np.int64)
    rowmap[rows] = np.arange(len(rows))
    elem, mesh = space.elem, space.mesh
    ncomp = space.value_dim
    cell_ids = np.arange(mesh.ncells)
    points, pcells, pxhat, I, Jc, V = [], [], [], [], [], []
    npts = 0
    for s, slot in enumerate(elem.slots):
        loc = elem.slot_dofs(s)
        ids = space.cell_dofs[:, loc]
        use = (space.owner[ids[:, 0]] == cell_ids) & (rowmap[ids] >= 0).any(axis=1)
        cells = np.flatnonzero(use)
        if len(cells) == 0:
            continue
        nq = len(slot.points)
        x, J = mesh.map(slot.points, cells)
        Q = pullback_matrix(elem.mapping, J)
        W = elem.slot_weights(s)
        # coefficient of sample component p at point q for local dof d
        coef = np.einsum("dqr,cqrp->cdqp", W, Q)
        coef *= space.cell_signs[cells][:, loc][:, :, None, None]
        col = (npts + np.arange(len(cells))[:, None] * nq + np.arange(nq)) * ncomp
        cols = np.broadcast_to(col[:, None, :, None] + np.arange(ncomp),
                               coef.shape)
        r = np.broadcast_to(rowmap[ids[cells]][:, :, None, None], coef.shape)
        keep = r >= 0
        I.append(r[keep])
        Jc.append(cols[keep])
        V.append(coef[keep])
        points.append(x.reshape(-1, x.shape[-1]))
        pcells.append(np.repeat(cells, nq))
        pxhat.append(np.tile(slot.points, (len(cells), 1)))
        npts += len(cells) * nq
    P = sp.csr_matrix((np.concatenate(V), (np.concatenate(I), np.concatenate(Jc))),
                      shape=(len(rows), npts * ncomp))
    P.eliminate_zeros()
    return InterpolationPlan(np.concatenate(points), P, ncomp, rows,
                             np.concatenate(pcells), np.concatenate(pxhat))


def sample_at_plan(space, dofs, plan):
    """Values (npts, vdim) of an FE function at plan points, each taken in its owner cell."""
    return eval_cells(space, dofs, plan.cells, plan.xhat[:, None, :])[:, 0]


def dirichlet_offset(space, g):
    """Full DOF vector holding the moments of ``g`` on boundary DOFs, zero elsewhere."""
    if space.mesh.closed:
        raise SpaceError("closed surface has no boundary")
    return interpolate(space, g, mask=space.boundary_dofs)
