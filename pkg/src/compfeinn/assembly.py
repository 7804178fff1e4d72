"""Weak forms, residuals, Gram matrices and sparse solves.

Forms are integrated on the cells of the test space's mesh. When the test
space lives on a refinement of the trial mesh (linearised Petrov-Galerkin
test spaces), trial functions are evaluated at the same physical
quadrature points by mapping them into the parent cell.

Maxwell (flat, 2D, scalar curl)::

    a(u, v) = (curl u, curl v) + (kappa u, v),   l(v) = (f, v)

Darcy on a closed surface, unknowns (u, p, lambda)::

    (u, v) - (p, div v)          = 0
    (div u, q) + lambda (1, q)   = (f, q)
    (p, 1)                       = 0
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fespace import (build_space, dirichlet_offset, eval_basis, eval_cells,
                      linearized_test_space, zero_trace_subspace)
from .mesh import area_element
from .quadrature import gauss_1d, gauss_square
from .refelem import (LAGRANGE_CG, LAGRANGE_DG, NEDELEC, RAVIART_THOMAS, edge_point)


class AssemblyError(ValueError):
    pass


class SolveError(RuntimeError):
    pass


@dataclass
class PairQuadrature:
    """Quadrature on test cells with trial values at the same physical points."""

    test_cells: np.ndarray
    trial_cells: np.ndarray
    test_xhat: np.ndarray  # (nq, 2), shared by all test cells
    trial_xhat: np.ndarray  # (nc, nq, 2)
    x: np.ndarray  # (nc, nq, dim)
    dx: np.ndarray  # (nc, nq)


def pair_quadrature(test_mesh, trial_mesh, npts):
    q, w = gauss_square(npts)
    cells = np.arange(test_mesh.ncells)
    x, J = test_mesh.map(q)
    if test_mesh is trial_mesh:
        parents = cells
        xu = np.broadcast_to(q, (len(cells),) + q.shape)
    elif test_mesh.parent_mesh is trial_mesh:
        parents = test_mesh.parent
        xu = test_mesh.to_parent(q)
    else:
        raise AssemblyError("test mesh must equal or refine the trial mesh")
    return PairQuadrature(cells, parents, q, xu, x, w * area_element(J))


def _scatter(values, rows, cols, shape):
    """Sum local matrices (nc, nr, ncol) into a CSR matrix."""
    nc, nr, ncol = values.shape
    R = np.broadcast_to(rows[:, :, None], values.shape).ravel()
    C = np.broadcast_to(cols[:, None, :], values.shape).ravel()
    A = sp.coo_matrix((values.ravel(), (R, C)), shape=shape).tocsr()
    A.sum_duplicates()
    return A


def _scatter_vec(values, rows, n):
    return np.bincount(rows.ravel(), weights=values.ravel(), minlength=n)


def _sample(f, x):
    vals = np.asarray(f(x.reshape(-1, x.shape[-1])), dtype=float)
    return vals.reshape(x.shape[:2] + vals.shape[1:])


# -- coefficient fields --------------------------------------------------

@dataclass
class FEField:
    """A scalar FE function used as a PDE coefficient."""

    space: object
    dofs: np.ndarray

    def at(self, cells, xhat):
        return eval_cells(self.space, self.dofs, cells, xhat)[..., 0]

    def basis(self, cells, xhat):
        vals = eval_basis(self.space, cells, xhat)[..., 0]
        return vals, self.space.cell_dofs[cells]


def kappa_space(mesh):
    """CG_1 space used for FE coefficients."""
    return build_space(mesh, (LAGRANGE_CG, 1))


# -- Maxwell -------------------------------------------------------------

@dataclass
class MaxwellProblem:
    """curl curl u + kappa u = f with tangential Dirichlet data.

    ``kappa`` is a callable on points or an :class:`FEField` on the trial
    mesh. ``offset`` is the full-length Dirichlet lift on the trial space
    (zero when the trial space is unconstrained).
    """

    trial: object
    test: object
    f: object
    kappa: object
    offset: np.ndarray
    npts: int
    _quad: PairQuadrature = field(default=None, repr=False)
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.trial.nfree != self.test.nfree:
            raise AssemblyError(f"trial has {self.trial.nfree} unknowns, "
                                f"test has {self.test.nfree}")

    @property
    def quad(self):
        if self._quad is None:
            self._quad = pair_quadrature(self.test.mesh, self.trial.mesh, self.npts)
            qd = self._quad
            self._tv, self._tc = eval_basis(self.test, qd.test_cells, qd.test_xhat, "curl")
            self._uv, self._uc = eval_basis(self.trial, qd.trial_cells, qd.trial_xhat, "curl")
            self._fq = _sample(self.f, qd.x)
        return self._quad

    def kappa_at_quad(self, kappa=None):
        kappa = self.kappa if kappa is None else kappa
        qd = self.quad
        if isinstance(kappa, FEField):
            vals = kappa.at(qd.trial_cells, qd.trial_xhat)
        elif callable(kappa):
            vals = _sample(kappa, qd.x)
        else:
            vals = np.full(qd.dx.shape, float(kappa))
        if np.any(~(vals > 0)):
            bad = np.unravel_index(np.argmin(np.where(np.isnan(vals), -np.inf, vals)), vals.shape)
            raise AssemblyError(f"kappa must be positive; got {vals[bad]} in cell "
                                f"{qd.test_cells[bad[0]]}")
        return vals

    def with_kappa(self, kappa):
        """Same problem (sharing quadrature tables) with another coefficient."""
        self.quad
        new = MaxwellProblem(self.trial, self.test, self.f, kappa, self.offset,
                             self.npts, self._quad)
        new._tv, new._tc, new._uv, new._uc, new._fq = (
            self._tv, self._tc, self._uv, self._uc, self._fq)
        return new


def maxwell_problem(mesh, order, f, kappa=1.0, g=None, test="linearized",
                    constrained=True, npts=None):
    """Set up a Maxwell problem on ND_order with a zero-trace or full trial space.

    ``test`` is "linearized" (ND_1 on the refined mesh) or "galerkin".
    """
    space = build_space(mesh, (NEDELEC, order))
    trial = zero_trace_subspace(space) if constrained else space
    if test == "linearized":
        tsp = linearized_test_space(trial)
    elif test == "galerkin":
        tsp = trial
    else:
        raise AssemblyError(f"unknown test space kind {test!r}")
    if constrained and g is not None:
        offset = dirichlet_offset(trial, g)
    else:
        offset = np.zeros(trial.ndofs)
    return MaxwellProblem(trial, tsp, f, kappa, offset, npts or order + 2)


def _maxwell_local(problem, kappa_q):
    qd = problem.quad
    dx = qd.dx
    K = np.einsum("cq,cqi,cqj->cij", dx, problem._tc, problem._uc)
    K += np.einsum("cq,cqik,cqjk->cij", dx * kappa_q, problem._tv, problem._uv)
    L = np.einsum("cq,cqik,cqk->ci", dx, problem._tv, problem._fq)
    return K, L


def assemble_maxwell_full(problem, kappa=None):
    """Matrix over all (test, trial) DOFs and load over all test DOFs."""
    kq = problem.kappa_at_quad(kappa)
    K, L = _maxwell_local(problem, kq)
    qd = problem.quad
    rows = problem.test.cell_dofs[qd.test_cells]
    cols = problem.trial.cell_dofs[qd.trial_cells]
    A = _scatter(K, rows, cols, (problem.test.ndofs, problem.trial.ndofs))
    return A, _scatter_vec(L, rows, problem.test.ndofs)


def assemble_maxwell_matrix(problem, kappa=None):
    """(A, b) on free DOFs: A u = b solves the discrete problem."""
    A, ell = assemble_maxwell_full(problem, kappa)
    tf, uf = problem.test.free, problem.trial.free
    b = ell[tf] - A[tf] @ problem.offset
    return A[tf][:, uf].tocsr(), b


def residual_vector(problem, u_free, kappa=None, cached=True):
    """R = a(u_h + offset, phi_i) - l(phi_i) for every free test function.

    The cached path uses (A, b); the matrix-free path integrates the
    residual directly from values of u_h at quadrature points.
    """
    u_free = np.asarray(u_free, dtype=float)
    if u_free.shape != (problem.trial.nfree,):
        raise AssemblyError(f"expected {problem.trial.nfree} trial DOFs, got {u_free.shape}")
    if cached:
        key = id(kappa) if kappa is not None else "default"
        hit = problem._cache.get("Ab")
        if hit is None or hit[0] != key or kappa is not None:
            problem._cache["Ab"] = (key,) + assemble_maxwell_matrix(problem, kappa)
        _, A, b = problem._cache["Ab"]
        return A @ u_free - b
    return _residual_full(problem, problem.trial.extend(u_free, problem.offset),
                          kappa)[problem.test.free]


def _residual_full(problem, u_full, kappa=None):
    qd = problem.quad
    kq = problem.kappa_at_quad(kappa)
    coef = u_full[problem.trial.cell_dofs[qd.trial_cells]]
    uh = np.einsum("cqdk,cd->cqk", problem._uv, coef)
    ch = np.einsum("cqd,cd->cq", problem._uc, coef)
    vec = kq[..., None] * uh - problem._fq
    loc = (np.einsum("cq,cqi,cq->ci", qd.dx, problem._tc, ch)
           + np.einsum("cq,cqik,cqk->ci", qd.dx, problem._tv, vec))
    return _scatter_vec(loc, problem.test.cell_dofs[qd.test_cells], problem.test.ndofs)


def kappa_gradient(problem, w_free, u_free, kappa):
    """Contract dR/dkappa with a cotangent on the residual.

    Returns g[m] = sum_i w_i d R_i / d kappa_m = int psi_m (w_h . u_h) for
    an :class:`FEField` coefficient with basis psi.
    """
    qd = problem.quad
    w = np.zeros(problem.test.ndofs)
    w[problem.test.free] = w_free
    u = problem.trial.extend(u_free, problem.offset)
    wh = np.einsum("cqdk,cd->cqk", problem._tv, w[problem.test.cell_dofs[qd.test_cells]])
    uh = np.einsum("cqdk,cd->cqk", problem._uv, u[problem.trial.cell_dofs[qd.trial_cells]])
    psi, ids = kappa.basis(qd.trial_cells, qd.trial_xhat)
    loc = np.einsum("cq,cqm,cqk,cqk->cm", qd.dx, psi, wh, uh)
    return _scatter_vec(loc, ids, kappa.space.ndofs)


def _boundary_quadrature(problem):
    mesh = problem.test.mesh
    if mesh.closed:
        raise AssemblyError("closed surface has no boundary")
    edges = np.flatnonzero(mesh.boundary_edges)
    cells = mesh.edge_cells[edges, 0]
    local = np.argmax(mesh.cell_edges[cells] == edges[:, None], axis=1)
    s, w = gauss_1d(problem.npts)
    xhat = np.stack([edge_point(e, s) for e in local])  # (nb, ns, 2)
    if mesh is problem.trial.mesh:
        parents, xu = cells, xhat
    else:
        parents = mesh.parent[cells]
        off = mesh.child_offset[cells][:, None, :]
        xu = (xhat + 1.0 + 2.0 * off) / mesh.refine_factor - 1.0
    tv = eval_basis(problem.test, cells, xhat)
    verts = mesh.vertices[mesh.edges[edges]]
    length = np.linalg.norm(verts[:, 1] - verts[:, 0], axis=1)
    n = mesh.boundary_normals(edges)
    cross = tv[..., 0] * n[:, None, None, 1] - tv[..., 1] * n[:, None, None, 0]
    weights = np.outer(length / 2.0, w)
    return cells, parents, xu, cross, weights


def boundary_term(problem, u_full):
    """Edge integral of curl(u_h) (phi x n) over the boundary, all test DOFs.

    In 2D, phi x n = phi_1 n_2 - phi_2 n_1 with the outward unit normal n.
    """
    cells, parents, xu, cross, wts = _boundary_quadrature(problem)
    _, curl_u = eval_cells(problem.trial, u_full, parents, xu, "curl")
    loc = np.einsum("cq,cq,cqd->cd", wts, curl_u, cross)
    return _scatter_vec(loc, problem.test.cell_dofs[cells], problem.test.ndofs)


def boundary_matrix(problem):
    """Matrix of the boundary term over all (test, trial) DOFs."""
    cells, parents, xu, cross, wts = _boundary_quadrature(problem)
    _, uc = eval_basis(problem.trial, parents, xu, "curl")
    loc = np.einsum("cq,cqi,cqj->cij", wts, cross, uc)
    return _scatter(loc, problem.test.cell_dofs[cells],
                    problem.trial.cell_dofs[parents],
                    (problem.test.ndofs, problem.trial.ndofs))


def modified_residual_boundary_obs(problem, u_full, kappa=None):
    """Residual on the full test space with the boundary flux term included.

    Used when the tangential trace is unknown: trial and test spaces carry
    no Dirichlet constraint and integration by parts keeps the edge term.
    """
    if problem.trial.constrained.any() or problem.test.constrained.any():
        raise AssemblyError("boundary-observation residual needs unconstrained spaces")
    u_full = np.asarray(u_full, dtype=float)
    return _residual_full(problem, u_full, kappa) + boundary_term(problem, u_full)


# -- Gram matrices -------------------------------------------------------

_INNER = {"L2": None, "Hcurl": "curl", "Hdiv": "div", "H1": "grad"}
_FAMILY_INNER = {NEDELEC: "Hcurl", RAVIART_THOMAS: "Hdiv", LAGRANGE_CG: "H1"}


def gram_matrix(space, inner="L2", npts=None, free=True):
    """Gram matrix of the L2, H(curl), H(div) or H1 inner product."""
    if inner not in _INNER:
        raise AssemblyError(f"unknown inner product {inner!r}")
    if inner != "L2" and _FAMILY_INNER.get(space.elem.family) != inner:
        raise AssemblyError(f"{inner} inner product is not defined on {space.elem.family}")
    mesh = space.mesh
    npts = npts or space.elem.order + (3 if mesh.dim == 3 else 2)
    q, w = gauss_square(npts)
    cells = np.arange(mesh.ncells)
    deriv = _INNER[inner]
    if deriv is None:
        vals, _, dx = eval_basis(space, cells, q, mesh_points=True)
        K = np.einsum("cq,cqik,cqjk->cij", dx * w, vals, vals)
    else:
        vals, d, _, dx = eval_basis(space, cells, q, deriv, mesh_points=True)
        K = np.einsum("cq,cqik,cqjk->cij", dx * w, vals, vals)
        if d.ndim == 3:
            K += np.einsum("cq,cqi,cqj->cij", dx * w, d, d)
        else:
            K += np.einsum("cq,cqik,cqjk->cij", dx * w, d, d)
    ids = space.cell_dofs
    M = _scatter(K, ids, ids, (space.ndofs, space.ndofs))
    if free:
        M = M[space.free][:, space.free].tocsr()
    return M


# -- Darcy on the sphere -------------------------------------------------

@dataclass
class DarcySphereProblem:
    flux: object
    pressure: object
    flux_test: object
    pressure_test: object
    f: object
    npts: int

    @property
    def ndofs(self):
        return self.flux.ndofs + self.pressure.ndofs + 1


def darcy_sphere_problem(mesh, f, order=1, npts=None):
    """RT_order x DG_(order-1) on a closed surface, linearised tests for order > 1."""
    if not mesh.closed:
        raise AssemblyError("the Darcy driver expects a closed surface mesh")
    flux = build_space(mesh, (RAVIART_THOMAS, order))
    pres = build_space(mesh, (LAGRANGE_DG, order - 1))
    return DarcySphereProblem(flux, pres, linearized_test_space(flux),
                              linearized_test_space(pres, factor=order), f,
                              npts or order + 3)


def darcy_blocks(problem):
    """M (v, u), B (div v, p), D (q, div u), test/trial cell measures, load F."""
    qd = pair_quadrature(problem.flux_test.mesh, problem.flux.mesh, problem.npts)
    tv, td = eval_basis(problem.flux_test, qd.test_cells, qd.test_xhat, "div")
    uv, ud = eval_basis(problem.flux, qd.trial_cells, qd.trial_xhat, "div")
    qv = eval_basis(problem.pressure_test, qd.test_cells, qd.test_xhat)[..., 0]
    pv = eval_basis(problem.pressure, qd.trial_cells, qd.trial_xhat)[..., 0]
    dx = qd.dx
    rf = problem.flux_test.cell_dofs[qd.test_cells]
    rp = problem.pressure_test.cell_dofs[qd.test_cells]
    cf = problem.flux.cell_dofs[qd.trial_cells]
    cp = problem.pressure.cell_dofs[qd.trial_cells]
    nf, npr = problem.flux.ndofs, problem.pressure.ndofs
    M = _scatter(np.einsum("cq,cqik,cqjk->cij", dx, tv, uv), rf, cf, (nf, nf))
    B = _scatter(np.einsum("cq,cqi,cqj->cij", dx, td, pv), rf, cp, (nf, npr))
    D = _scatter(np.einsum("cq,cqi,cqj->cij", dx, qv, ud), rp, cf, (npr, nf))
    m_test = _scatter_vec(np.einsum("cq,cqi->ci", dx, qv), rp, npr)
    m_trial = _scatter_vec(np.einsum("cq,cqi->ci", dx, pv), cp, npr)
    F = _scatter_vec(np.einsum("cq,cqi,cq->ci", dx, qv, _sample(problem.f, qd.x)), rp, npr)
    return M, B, D, m_test, m_trial, F


def assemble_darcy_sphere(problem):
    """Saddle-point matrix [[M, -B, 0], [D, 0, m], [0, m^T, 0]] and load."""
    M, B, D, m_test, m_trial, F = darcy_blocks(problem)
    A = sp.bmat([[M, -B, None],
                 [D, None, sp.csr_matrix(m_test[:, None])],
                 [None, sp.csr_matrix(m_trial[None, :]), None]], format="csr")
    b = np.concatenate([np.zeros(M.shape[0]), F, [0.0]])
    return A, b


def split_darcy(problem, x):
    nf = problem.flux.ndofs
    npr = problem.pressure.ndofs
    return x[:nf], x[nf:nf + npr], float(x[nf + npr])


def residual_vector_darcy(problem, x, system=None):
    A, b = system if system is not None else assemble_darcy_sphere(problem)
    x = np.asarray(x, dtype=float)
    if x.shape != (A.shape[1],):
        raise AssemblyError(f"expected {A.shape[1]} unknowns, got {x.shape}")
    return A @ x - b


# -- solves --------------------------------------------------------------

def solve_sparse(A, b, tol=1e-9):
    """Direct sparse LU solve with a relative residual check."""
    A = sp.csc_matrix(A)
    b = np.asarray(b, dtype=float)
    if A.shape[0] != A.shape[1] or A.shape[0] != b.shape[0]:
        raise SolveError(f"incompatible system: A {A.shape}, b {b.shape}")
    empty = np.flatnonzero(np.diff(A.indptr) == 0)
    if len(empty):
        raise SolveError(f"structurally singular: column {empty[0]} is empty")
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        raise SolveError(f"factorisation failed: {exc}") from exc
    x = lu.solve(b)
    bnorm = max(np.abs(b).max(initial=0.0), np.finfo(float).tiny)
    res = np.abs(A @ x - b).max(initial=0.0) / bnorm
    if not np.all(np.isfinite(x)) or (np.abs(b).max(initial=0.0) > 0 and res > tol):
        diag = np.abs(lu.U.diagonal())
        raise SolveError(f"numerically singular: relative residual {res:.3e}, "
                         f"smallest pivot {diag.min():.3e} at index {int(np.argmin(diag))}")
    return x


def condition_estimate(A):
    """1-norm condition number estimate of a square sparse matrix.

    Uses the LU factors for the inverse, so it stays cheap at the sizes where
    a dense SVD is not an option. Returns inf for a singular matrix. A single
    probe column (t=1) keeps the estimator off numpy's global random state,
    so the value is reproducible.
    """
    A = sp.csc_matrix(A)
    try:
        lu = spla.splu(A)
    except RuntimeError:
        return np.inf
    n = A.shape[0]
    inv = spla.LinearOperator((n, n), matvec=lu.solve, rmatvec=lambda y: lu.solve(y, trans="T"),
                              dtype=float)
    return float(spla.onenormest(A, t=1) * spla.onenormest(inv, t=1))


def cholesky_check(M):
    """Dense Cholesky of a (small) symmetric matrix; returns the pivots."""
    L = scipy.linalg.cholesky(np.asarray(M.todense() if sp.issparse(M) else M), lower=True)
    return np.diag(L) ** 2


def solve_maxwell(problem, kappa=None):
    """FEM solution as a full DOF vector (offset included)."""
    A, b = assemble_maxwell_matrix(problem, kappa)
    return problem.trial.extend(solve_sparse(A, b), problem.offset)
