"""Differentiable losses built from FE residuals of interpolated networks.

A network enters a loss only through its interpolant: the samples of the
network at the plan points are mapped to DOFs by the fixed sparse plan
matrix P. The gradient of a loss L(dofs) with respect to the parameters is
therefore ``vjp_params(arch, theta, points, (P^T dL/ddofs) reshaped)``.

Forward and Darcy losses minimise squared residual norms. The inverse loss
uses plain norms by default, with a squared variant on request.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import (FEField, assemble_darcy_sphere, assemble_maxwell_full,
                       assemble_maxwell_matrix, boundary_matrix, gram_matrix,
                       kappa_gradient)
from .fespace import eval_basis, eval_cells, interpolate
from .neural import forward, vjp_params
from .refelem import NEDELEC, RAVIART_THOMAS


class LossError(ValueError):
    pass


# -- residual norms ------------------------------------------------------

@dataclass(frozen=True)
class LossSpec:
    """``kind`` is "ResidualL2" or "Preconditioned"; ``norm`` is "Unorm" or "L2"."""

    kind: str = "ResidualL2"
    norm: str = "Unorm"

    def __post_init__(self):
        if self.kind not in ("ResidualL2", "Preconditioned"):
            raise LossError(f"unknown loss kind {self.kind!r}")
        if self.norm not in ("Unorm", "L2"):
            raise LossError(f"unknown preconditioned norm {self.norm!r}")


class Preconditioner:
    """Factorised Gram matrix B of the test space, with the L2 Gram when needed."""

    def __init__(self, B, M=None):
        self.B = sp.csc_matrix(B)
        try:
            self._lu = spla.splu(self.B)
        except RuntimeError as exc:
            raise LossError(f"Gram factorisation failed: {exc}") from exc
        self.M = None if M is None else sp.csr_matrix(M)

    def solve(self, r):
        return self._lu.solve(r)

    @classmethod
    def for_space(cls, space, norm="Unorm"):
        inner = {NEDELEC: "Hcurl", RAVIART_THOMAS: "Hdiv"}.get(space.elem.family, "L2")
        M = gram_matrix(space, "L2") if norm == "L2" else None
        return cls(gram_matrix(space, inner), M)


def residual_norm(r, spec, precond=None):
    """Squared residual norm and its gradient with respect to ``r``."""
    if spec.kind == "ResidualL2":
        return float(r @ r), 2.0 * r
    if precond is None:
        raise LossError("preconditioned loss needs a factorised Gram matrix")
    z = precond.solve(r)
    if spec.norm == "Unorm":
        return float(r @ z), 2.0 * z
    if precond.M is None:
        raise LossError("L2 norm needs the L2 Gram matrix of the test space")
    Mz = precond.M @ z
    return float(z @ Mz), 2.0 * precond.solve(Mz)


# -- interpolated networks -----------------------------------------------

class InterpolatedNet:
    """A network seen through an interpolation plan."""

    def __init__(self, arch, plan):
        if arch.n_out != plan.ncomp or arch.n_in != plan.points.shape[1]:
            raise LossError(f"network {arch.sizes} does not match plan with "
                            f"{plan.points.shape[1]}-d points and {plan.ncomp} components")
        self.arch = arch
        self.plan = plan

    def dofs(self, theta):
        out, cache = forward(self.arch, theta, self.plan.points, return_cache=True)
        return self.plan.apply(out), cache

    def pullback(self, theta, cache, dofs_bar):
        cot = self.plan.transpose_apply(dofs_bar)
        return vjp_params(self.arch, theta, self.plan.points, cot, cache)


def maxwell_system(problem):
    """Cached (A, b) on free DOFs for a fixed coefficient."""
    hit = problem._cache.get("system")
    if hit is None:
        hit = problem._cache["system"] = assemble_maxwell_matrix(problem)
    return hit


class MaxwellLoss:
    """Forward Maxwell loss: norm of A (P N(theta)) - b."""

    def __init__(self, problem, plan, arch, spec=LossSpec(), precond=None):
        if plan.matrix.shape[0] != problem.trial.nfree:
            raise LossError("plan rows do not match the free trial DOFs")
        self.problem = problem
        self.net = InterpolatedNet(arch, plan)
        self.spec = spec
        if spec.kind == "Preconditioned" and precond is None:
            precond = Preconditioner.for_space(problem.test, spec.norm)
        self.precond = precond
        self.A, self.b = maxwell_system(problem)

    def residual(self, theta):
        u, _ = self.net.dofs(theta)
        return self.A @ u - self.b

    def __call__(self, theta):
        u, cache = self.net.dofs(theta)
        r = self.A @ u - self.b
        val, r_bar = residual_norm(r, self.spec, self.precond)
        return val, self.net.pullback(theta, cache, self.A.T @ r_bar)

    def full_dofs(self, theta):
        u, _ = self.net.dofs(theta)
        return self.problem.trial.extend(u, self.problem.offset)


def residual_l2_loss(problem, plan, arch, theta):
    """(||r||^2, gradient) for the Euclidean residual loss."""
    return MaxwellLoss(problem, plan, arch)(theta)


def preconditioned_loss(problem, plan, arch, theta, spec):
    """(r^T B^-1 r or |B^-1 r|_M^2, gradient) with the test-space Gram B."""
    return MaxwellLoss(problem, plan, arch, spec)(theta)


class DataFitLoss:
    """Least-squares fit of network samples to target values at plan points."""

    def __init__(self, arch, points, targets):
        self.arch = arch
        self.points = np.asarray(points, dtype=float)
        self.targets = np.asarray(targets, dtype=float).reshape(len(self.points), -1)

    def __call__(self, theta):
        out, cache = forward(self.arch, theta, self.points, return_cache=True)
        d = out - self.targets
        return float(np.sum(d * d)), vjp_params(self.arch, theta, self.points, 2.0 * d, cache)


# -- Darcy ---------------------------------------------------------------

class DarcyLoss:
    """Residual of the mixed surface system for (flux net, pressure net, lambda).

    The parameter vector is theta_u followed by theta_p and the multiplier.
    With ``zero_mean`` the interpolated pressure is projected onto zero mean
    before entering the residual, so the constraint row holds exactly.
    """

    def __init__(self, problem, plans, archs, spec=LossSpec(), system=None, zero_mean=True):
        self.problem = problem
        self.flux = InterpolatedNet(archs[0], plans[0])
        self.pres = InterpolatedNet(archs[1], plans[1])
        if plans[0].matrix.shape[0] != problem.flux.ndofs or \
                plans[1].matrix.shape[0] != problem.pressure.ndofs:
            raise LossError("Darcy plans must cover every flux and pressure DOF")
        self.A, self.b = system if system is not None else assemble_darcy_sphere(problem)
        self.A = sp.csr_matrix(self.A)
        self.spec = spec
        self.precond = None
        if spec.kind == "Preconditioned":
            Bu = Preconditioner.for_space(problem.flux_test, spec.norm)
            Bp = gram_matrix(problem.pressure_test, "L2")
            B = sp.block_diag([Bu.B, Bp, sp.identity(1)])
            M = None
            if spec.norm == "L2":
                M = sp.block_diag([Bu.M, Bp, sp.identity(1)])
            self.precond = Preconditioner(B, M)
        self.nu = archs[0].nparams
        self.np_ = archs[1].nparams
        # zero-mean projection of the pressure: p - one (m.p) / (m.one)
        nf = problem.flux.ndofs
        self.m = np.asarray(self.A[-1, nf:nf + problem.pressure.ndofs].todense()).ravel()
        self.one = interpolate(problem.pressure, lambda x: np.ones(len(x)))
        self.zero_mean = zero_mean

    @property
    def nparams(self):
        return self.nu + self.np_ + 1

    def _project(self, p):
        if not self.zero_mean:
            return p
        return p - self.one * (self.m @ p) / (self.m @ self.one)

    def _project_t(self, p_bar):
        if not self.zero_mean:
            return p_bar
        return p_bar - self.m * (self.one @ p_bar) / (self.m @ self.one)

    def split(self, theta):
        return theta[:self.nu], theta[self.nu:self.nu + self.np_], theta[-1]

    def unknowns(self, theta):
        tu, tp, lam = self.split(theta)
        u, _ = self.flux.dofs(tu)
        p, _ = self.pres.dofs(tp)
        return np.concatenate([u, self._project(p), [lam]])

    def __call__(self, theta):
        tu, tp, lam = self.split(theta)
        u, cu = self.flux.dofs(tu)
        p, cp = self.pres.dofs(tp)
        x = np.concatenate([u, self._project(p), [lam]])
        r = self.A @ x - self.b
        val, r_bar = residual_norm(r, self.spec, self.precond)
        x_bar = self.A.T @ r_bar
        nf, npr = len(u), len(p)
        g = np.concatenate([self.flux.pullback(tu, cu, x_bar[:nf]),
                            self.pres.pullback(tp, cp, self._project_t(x_bar[nf:nf + npr])),
                            [x_bar[-1]]])
        return val, g


def darcy_multifield_loss(problem, plans, archs, theta_u, theta_p, spec=LossSpec()):
    """Loss and gradients (g_u, g_p); ``theta_p`` carries lambda as its last entry."""
    loss = DarcyLoss(problem, plans, archs, spec)
    val, g = loss(np.concatenate([theta_u, theta_p]))
    return val, (g[:loss.nu], g[loss.nu:])


# -- inverse problems ----------------------------------------------------

@dataclass
class ObservationSet:
    """Point observations of selected state components."""

    points: np.ndarray
    values: np.ndarray  # (M, ncomp) full components; masked ones are ignored
    mask: tuple = (True, True)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.points), -1)
        self.mask = tuple(bool(m) for m in self.mask)
        if len(self.mask) != self.values.shape[1] or not any(self.mask):
            raise LossError("component mask does not match observation values")

    @property
    def data(self):
        return self.values[:, list(self.mask)].ravel()

    def operator(self, space):
        """Sparse map from full DOFs of ``space`` to observed values."""
        cells, xhat = space.mesh.locate(self.points)
        vals = eval_basis(space, cells, xhat[:, None, :])[:, 0]  # (M, nd, ncomp)
        comps = np.flatnonzero(self.mask)
        vals = vals[:, :, comps]
        M, nd, nk = vals.shape
        rows = np.broadcast_to((np.arange(M)[:, None] * nk + np.arange(nk))[:, None, :],
                               vals.shape)
        cols = np.broadcast_to(space.cell_dofs[cells][:, :, None], vals.shape)
        D = sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())),
                          shape=(M * nk, space.ndofs)).tocsr()
        D.sum_duplicates()
        return D


def lattice_points(n, lo=0.005, hi=0.995):
    """n x n uniform lattice on [lo, hi]^2, x index fastest."""
    t = np.linspace(lo, hi, n)
    X, Y = np.meshgrid(t, t, indexing="xy")
    return np.column_stack([X.ravel(), Y.ravel()])


def boundary_points(n, inset=0.005, lo=0.0, hi=1.0):
    """4 x n points just inside the four sides of [lo, hi]^2."""
    t = np.linspace(lo + inset, hi - inset, n)
    a, b = lo + inset, hi - inset
    return np.concatenate([np.column_stack([t, np.full(n, a)]),
                           np.column_stack([np.full(n, b), t]),
                           np.column_stack([t[::-1], np.full(n, b)]),
                           np.column_stack([np.full(n, a), t[::-1]])])


def noisy(values, sigma, rng):
    """(1 + eps) u with eps ~ N(0, sigma^2) drawn per point and component."""
    values = np.asarray(values, dtype=float)
    if sigma == 0:
        return values.copy()
    return (1.0 + rng.normal(0.0, sigma, size=values.shape)) * values


def _unsquare(value, grad):
    """Turn (|x|^2, d|x|^2) into (|x|, d|x|); the gradient at zero is taken as zero."""
    root = np.sqrt(value)
    return root, (grad / (2.0 * root) if root > 0 else np.zeros_like(grad))


class InverseLoss:
    """misfit_weight * |d - D(u_h)| + alpha * |R(kappa_h, u_h)|.

    The parameter vector is theta_u followed by theta_kappa. ``boundary``
    selects the modified residual on unconstrained spaces, used when the
    tangential trace is unknown. With ``squared`` both terms are squared,
    which keeps the loss smooth at a zero residual.
    """

    def __init__(self, problem, plans, archs, obs, alpha=0.0, kappa_space=None,
                 spec=LossSpec(), misfit_weight=1.0, boundary=False, precond=None,
                 squared=False):
        if alpha < 0:
            raise LossError("alpha must be non-negative")
        self.problem = problem
        self.state = InterpolatedNet(archs[0], plans[0])
        self.coeff = InterpolatedNet(archs[1], plans[1])
        self.kspace = kappa_space
        if plans[1].matrix.shape[0] != kappa_space.ndofs:
            raise LossError("coefficient plan must cover every coefficient DOF")
        self.obs = obs
        self.D = obs.operator(problem.trial)
        self.d = obs.data
        self.alpha = float(alpha)
        self.misfit_weight = float(misfit_weight)
        self.boundary = boundary
        self.spec = spec
        if spec.kind == "Preconditioned" and precond is None:
            precond = Preconditioner.for_space(problem.test, spec.norm)
        self.precond = precond
        self.Bnd = boundary_matrix(problem) if boundary else None
        self.squared = squared
        self.nu = archs[0].nparams
        self.nk = archs[1].nparams

    def configure(self, alpha=None, misfit_weight=None):
        if alpha is not None:
            if alpha < 0:
                raise LossError("alpha must be non-negative")
            self.alpha = float(alpha)
        if misfit_weight is not None:
            self.misfit_weight = float(misfit_weight)
        return self

    @property
    def nparams(self):
        return self.nu + self.nk

    def split(self, theta):
        return theta[:self.nu], theta[self.nu:]

    def fields(self, theta):
        """Full state DOFs and coefficient DOFs of the interpolated networks."""
        tu, tk = self.split(theta)
        u, _ = self.state.dofs(tu)
        k, _ = self.coeff.dofs(tk)
        return self.problem.trial.extend(u, self.problem.offset), k

    def _system(self, kdofs):
        A, ell = assemble_maxwell_full(self.problem, FEField(self.kspace, kdofs))
        if self.boundary:
            A = A + self.Bnd
        tf = self.problem.test.free
        return A[tf], ell[tf]

    def residual(self, theta):
        u_full, k = self.fields(theta)
        A, ell = self._system(k)
        return A @ u_full - ell

    def __call__(self, theta):
        tu, tk = self.split(theta)
        prob = self.problem
        u, cu = self.state.dofs(tu)
        u_full = prob.trial.extend(u, prob.offset)
        u_bar = np.zeros(prob.trial.ndofs)
        val = 0.0
        if self.misfit_weight:
            m = self.D @ u_full - self.d
            mv, m_bar = float(m @ m), 2.0 * m
            if not self.squared:
                mv, m_bar = _unsquare(mv, m_bar)
            val += self.misfit_weight * mv
            u_bar += self.D.T @ (self.misfit_weight * m_bar)
        k_bar = np.zeros(self.kspace.ndofs)
        ck = None
        if self.alpha:
            k, ck = self.coeff.dofs(tk)
            A, ell = self._system(k)
            r = A @ u_full - ell
            rv, r_bar = residual_norm(r, self.spec, self.precond)
            if not self.squared:
                rv, r_bar = _unsquare(rv, r_bar)
            val += self.alpha * rv
            w = self.alpha * r_bar
            u_bar += A.T @ w
            k_bar = kappa_gradient(prob, w, u, FEField(self.kspace, k))
        g_u = self.state.pullback(tu, cu, u_bar[prob.trial.free])
        if ck is None:
            g_k = np.zeros(self.nk)
        else:
            g_k = self.coeff.pullback(tk, ck, k_bar)
        return val, np.concatenate([g_u, g_k])


def inverse_loss(problem, plans, archs, theta_u, theta_k, obs, alpha, kappa_space,
                 spec=LossSpec(), boundary=False, squared=False):
    """Inverse loss and gradients (g_u, g_kappa)."""
    loss = InverseLoss(problem, plans, archs, obs, alpha, kappa_space, spec,
                       boundary=boundary, squared=squared)
    val, g = loss(np.concatenate([theta_u, theta_k]))
    return val, (g[:loss.nu], g[loss.nu:])


def fe_state_values(space, dofs, points):
    cells, xhat = space.mesh.locate(points)
    return eval_cells(space, dofs, cells, xhat[:, None, :])[:, 0]
