"""Experiment drivers: FEM baselines, forward and inverse FEINN runs.

Each driver takes an ``ExperimentConfig`` and an output directory, writes
CSV tables there and returns the rows it wrote. Seeds run one after the
other; a failing seed is recorded in the ``status`` column and the study
moves on.
"""

import os

import numpy as np

from ..assembly import (SolveError, assemble_darcy_sphere, assemble_maxwell_matrix,
                        condition_estimate, darcy_sphere_problem, kappa_space, maxwell_problem,
                        solve_maxwell, solve_sparse, split_darcy)
from ..fespace import interpolation_plan, sample_at_plan
from ..mesh import build_cartesian, build_cubed_sphere, write_vtk
from ..loss import (DarcyLoss, DataFitLoss, InverseLoss, LossSpec, MaxwellLoss, ObservationSet,
                    boundary_points, lattice_points, noisy)
from ..neural import MLPArch, forward, glorot_init, input_derivatives, save_checkpoint
from ..norms import cell_quadrature, fe_errors, field_errors
from ..optimize import BFGSConfig, OptimizationError, TrainingSchedule, bfgs_minimize, \
    train_forward, train_inverse
from .cases import get_case
from .tables import fitted_slope, pairwise_rates, seed_statistics, write_csv

HISTORY_COLUMNS = ["seed", "stage", "iter", "loss", "e_l2_feinn", "e_l2_nn",
                   "e_hcurl_feinn", "e_hcurl_nn"]
DARCY_HISTORY_COLUMNS = ["seed", "stage", "iter", "loss", "e_l2_feinn", "e_l2_nn",
                         "e_hdiv_feinn", "e_l2_p_feinn", "e_l2_p_nn"]
INVERSE_HISTORY_COLUMNS = ["seed", "stage", "iter", "loss", "eps_l2_u_feinn", "eps_l2_u_nn",
                           "eps_hcurl_u_feinn", "eps_hcurl_u_nn", "eps_l2_kappa_feinn",
                           "eps_l2_kappa_nn"]

# errors from which training is allowed to recover
_RUN_ERRORS = (OptimizationError, SolveError, FloatingPointError, np.linalg.LinAlgError)


def _out(config, out=None):
    path = out or config.output.dir
    os.makedirs(path, exist_ok=True)
    return path


def _bfgs(config):
    return BFGSConfig(log_every=config.output.history_every,
                      max_linesearch=config.schedule.max_linesearch)


def _loss_spec(config):
    return LossSpec(config.loss.kind, config.loss.norm)


def _quad(config, order):
    return config.output.error_quadrature or order + 4


def _status(exc):
    return f"aborted: {type(exc).__name__}: {exc}".replace("\n", " ")


def network_curl(arch, theta):
    """Scalar curl of a planar vector network, d_x N_2 - d_y N_1."""
    def curl(x):
        _, jac, _ = input_derivatives(arch, theta, x)
        return jac[:, 1, 0] - jac[:, 0, 1]
    return curl


def network_curl_curl(arch, theta):
    """curl curl N = (d_y w, -d_x w) with w the scalar curl, from input Hessians."""
    def cc(x):
        _, _, hess = input_derivatives(arch, theta, x)
        dwdx = hess[:, 1, 0, 0] - hess[:, 0, 1, 0]
        dwdy = hess[:, 1, 0, 1] - hess[:, 0, 1, 1]
        return np.column_stack([dwdy, -dwdx])
    return cc


def tangential(arch, theta):
    """Network output projected onto the tangent plane of the unit sphere."""
    def f(x):
        v = forward(arch, theta, x)
        n = x / np.linalg.norm(x, axis=1, keepdims=True)
        return v - np.sum(v * n, axis=1, keepdims=True) * n
    return f


# -- FEM baselines ---------------------------------------------------------

def maxwell_fem(case, n, order, test="linearized"):
    """Problem and FEM solution on an n x n mesh of the unit square."""
    prob = maxwell_problem(build_cartesian(n, n), order, case.f, case.kappa, g=case.u, test=test)
    return prob, solve_maxwell(prob)


def darcy_fem(case, ne, order=1):
    prob = darcy_sphere_problem(build_cubed_sphere(ne), case.f, order)
    system = assemble_darcy_sphere(prob)
    return prob, system, split_darcy(prob, solve_sparse(*system))


def run_fem_convergence(config, out=None):
    """convergence.csv over ``mesh.sizes`` with pairwise rates and a fitted slope row."""
    out = _out(config, out)
    p = config.problem
    case = get_case(p.case)
    rows = []
    if p.kind == "darcy_sphere":
        sizes = config.mesh.sizes or [4, 8, 16]
        dname = "e_hdiv"
        for ne in sizes:
            row = {"h": 2.0 / ne, "n": ne, "k": p.order, "status": "ok"}
            try:
                prob, _, (u, pr, lam) = darcy_fem(case, ne, p.order)
                e = fe_errors(prob.flux, u, case.u, case.div_u, npts=_quad(config, p.order))
                row.update(e_l2=e["l2"], e_hdiv=e["hdiv"],
                           e_l2_p=fe_errors(prob.pressure, pr, case.p,
                                            npts=_quad(config, p.order))["l2"])
            except SolveError as exc:
                row.update(status=_status(exc), e_l2=np.nan, e_hdiv=np.nan, e_l2_p=np.nan)
            rows.append(row)
    else:
        sizes = config.mesh.sizes or [8, 16, 32, 64]
        dname = "e_hcurl"
        for n in sizes:
            row = {"h": 1.0 / n, "n": n, "k": p.order, "status": "ok"}
            try:
                prob = maxwell_problem(build_cartesian(n, n), p.order, case.f, case.kappa,
                                       g=case.u, test=p.test)
                A, b = assemble_maxwell_matrix(prob)
                uh = prob.trial.extend(solve_sparse(A, b), prob.offset)
                e = fe_errors(prob.trial, uh, case.u, case.curl_u, npts=_quad(config, p.order))
                row.update(e_l2=e["l2"], e_hcurl=e["hcurl"], cond1=condition_estimate(A))
            except SolveError as exc:
                row.update(status=_status(exc), e_l2=np.nan, e_hcurl=np.nan, cond1=np.nan)
            rows.append(row)
    h = [r["h"] for r in rows]
    for name in ("e_l2", dname):
        for r, rate in zip(rows, pairwise_rates(h, [r[name] for r in rows])):
            r["rate_" + name[2:]] = rate
    fit = {"h": "fit", "k": p.order, "status": "slope"}
    for name in ("e_l2", dname):
        fit["rate_" + name[2:]] = fitted_slope(h, [r[name] for r in rows])
    rows.append(fit)
    cols = ["h", "n", "k", "e_l2", dname, "rate_l2", "rate_" + dname[2:]]
    cols.append("e_l2_p" if p.kind == "darcy_sphere" else "cond1")
    write_csv(os.path.join(out, "convergence.csv"), cols + ["status"], rows)
    return rows


# -- forward Maxwell ---------------------------------------------------------

class ForwardSetup:
    """Everything a forward Maxwell FEINN run shares across seeds."""

    def __init__(self, config, n=None):
        p = config.problem
        self.config = config
        self.case = get_case(p.case)
        self.n = n or config.mesh.n
        self.problem, self.fem = maxwell_fem(self.case, self.n, p.order, p.test)
        self.plan = interpolation_plan(self.problem.trial)
        self.arch = MLPArch.build(2, 2, p.depth, p.width, p.activation)
        self.spec = _loss_spec(config)
        self.loss = MaxwellLoss(self.problem, self.plan, self.arch, self.spec)
        self.npts = _quad(config, p.order)
        self.fem_errors = fe_errors(self.problem.trial, self.fem, self.case.u, self.case.curl_u,
                                    npts=self.npts)

    def errors(self, theta):
        case, mesh = self.case, self.problem.trial.mesh
        fe = fe_errors(self.problem.trial, self.loss.full_dofs(theta), case.u, case.curl_u,
                       npts=self.npts)
        nn = field_errors(mesh, lambda x: forward(self.arch, theta, x), case.u,
                          network_curl(self.arch, theta), case.curl_u, npts=self.npts)
        return {"e_l2_feinn": fe["l2"], "e_l2_nn": nn["l2"],
                "e_hcurl_feinn": fe["hcurl"], "e_hcurl_nn": nn["deriv"]}

    def schedule(self):
        s = self.config.schedule
        return TrainingSchedule.forward(s.pde, s.datafit)

    def datafit(self):
        return DataFitLoss(self.arch, self.plan.points,
                           sample_at_plan(self.problem.trial, self.fem, self.plan))

    def train(self, theta0, schedule=None):
        return train_forward(self.loss, schedule or self.schedule(), theta0,
                             datafit_loss=self.datafit(), monitor=self.errors,
                             config=_bfgs(self.config))


def _history_rows(seed, hist):
    rows = []
    for r in hist.records:
        row = dict(r)
        row["seed"] = seed
        row["loss"] = r["value"]
        rows.append(row)
    return rows


def run_forward_feinn(config, out=None):
    """history.csv and summary.csv for forward Maxwell FEINN training."""
    out = _out(config, out)
    setup = ForwardSetup(config)
    history, summary = [], []
    for seed in config.problem.seeds:
        theta0 = glorot_init(setup.arch, seed)
        row = {"seed": seed, "nparams": setup.arch.nparams}
        try:
            theta, hist = setup.train(theta0)
        except _RUN_ERRORS as exc:
            row["status"] = _status(exc)
            summary.append(row)
            continue
        history += _history_rows(seed, hist)
        row.update(setup.errors(theta), status=hist.message, loss=hist.records[-1]["value"],
                   iters=hist.records[-1]["iter"], skipped=hist.skipped_updates,
                   fallbacks=hist.fallbacks)
        summary.append(row)
        save_checkpoint(os.path.join(out, f"theta_seed{seed}.cfnn"), setup.arch, theta)
        if config.output.vtk:
            from .indicators import cell_l2_error
            mesh = setup.problem.trial.mesh
            err = cell_l2_error(setup.problem.trial, setup.loss.full_dofs(theta), setup.case.u)
            write_vtk(mesh, os.path.join(out, f"fields_seed{seed}.vtk"),
                      cell_data={"feinn_l2_error": err})
    keys = ["e_l2_feinn", "e_l2_nn", "e_hcurl_feinn", "e_hcurl_nn", "loss"]
    ok = [r for r in summary if "e_l2_feinn" in r]
    fem = {"seed": "fem", "e_l2_feinn": setup.fem_errors["l2"],
           "e_hcurl_feinn": setup.fem_errors["hcurl"], "status": "FEM baseline"}
    rows = summary + seed_statistics(ok, keys) + [fem]
    write_csv(os.path.join(out, "history.csv"), HISTORY_COLUMNS, history)
    write_csv(os.path.join(out, "summary.csv"),
              ["seed"] + keys + ["nparams", "iters", "skipped", "fallbacks", "status"], rows)
    return {"history": history, "summary": rows, "fem": setup.fem_errors}


# -- Darcy on the sphere -----------------------------------------------------

class DarcySetup:
    def __init__(self, config):
        p = config.problem
        self.config = config
        self.case = get_case(p.case if p.case != "smooth_maxwell" else "darcy_sphere")
        self.problem, self.system, (self.u_fem, self.p_fem, _) = darcy_fem(
            self.case, config.mesh.ne, p.order)
        self.plans = (interpolation_plan(self.problem.flux, "all"),
                      interpolation_plan(self.problem.pressure, "all"))
        self.archs = (MLPArch.build(3, 3, p.depth, p.width, p.activation),
                      MLPArch.build(3, 1, p.depth, p.width, p.activation))
        self.loss = DarcyLoss(self.problem, self.plans, self.archs, _loss_spec(config),
                              system=self.system)
        self.npts = _quad(config, p.order)
        self.fem_errors = self._fe(self.u_fem, self.p_fem)

    def _fe(self, u, p):
        e = fe_errors(self.problem.flux, u, self.case.u, self.case.div_u, npts=self.npts)
        ep = fe_errors(self.problem.pressure, p, self.case.p, npts=self.npts)
        return {"e_l2_feinn": e["l2"], "e_hdiv_feinn": e["hdiv"], "e_l2_p_feinn": ep["l2"]}

    def theta0(self, seed):
        # distinct streams for the two networks, zero multiplier
        return np.concatenate([glorot_init(self.archs[0], seed),
                               glorot_init(self.archs[1], seed + 2 ** 32), [0.0]])

    def errors(self, theta):
        u, p, _ = split_darcy(self.problem, self.loss.unknowns(theta))
        row = self._fe(u, p)
        tu, tp, _ = self.loss.split(theta)
        mesh = self.problem.flux.mesh
        row["e_l2_nn"] = field_errors(mesh, tangential(self.archs[0], tu), self.case.u,
                                      npts=self.npts)["l2"]
        # the raw pressure network is compared after removing its mean
        x, _, dx = cell_quadrature(mesh, self.npts)
        pn = forward(self.archs[1], tp, x.reshape(-1, 3))[:, 0].reshape(dx.shape)
        pn = pn - np.sum(pn * dx) / np.sum(dx)
        pe = self.case.p(x.reshape(-1, 3)).reshape(dx.shape)
        row["e_l2_p_nn"] = float(np.sqrt(np.sum((pn - pe) ** 2 * dx)))
        return row

    def pressure_mean(self, theta):
        _, p, _ = split_darcy(self.problem, self.loss.unknowns(theta))
        return float(self.loss.m @ p / np.sum(self.loss.m))

    def fine_errors(self, theta):
        """Flux network re-interpolated onto a finer, higher-order RT space."""
        from ..fespace import build_space
        from ..refelem import RAVIART_THOMAS
        m = self.config.mesh
        fine = build_space(build_cubed_sphere(m.ne * m.fine_factor), (RAVIART_THOMAS, m.fine_order))
        plan = interpolation_plan(fine, "all")
        tu = self.loss.split(theta)[0]
        dofs = plan.apply(forward(self.archs[0], tu, plan.points))
        e = fe_errors(fine, dofs, self.case.u, self.case.div_u, npts=m.fine_order + 4)
        return {"e_l2_fine": e["l2"], "e_hdiv_fine": e["hdiv"]}


def run_darcy_sphere(config, out=None):
    """Trace FEINN for mixed Darcy flow on the sphere with fine re-interpolation."""
    out = _out(config, out)
    setup = DarcySetup(config)
    history, summary = [], []
    cfg = _bfgs(config)
    for seed in config.problem.seeds:
        row = {"seed": seed, "nparams": setup.loss.nparams}
        cfg.max_iters = config.schedule.pde
        try:
            theta, hist = bfgs_minimize(setup.loss, setup.theta0(seed), cfg,
                                        lambda it, th: setup.errors(th))
        except _RUN_ERRORS as exc:
            row["status"] = _status(exc)
            summary.append(row)
            continue
        for r in _history_rows(seed, hist):
            r["stage"] = "PDE"
            history.append(r)
        row.update(setup.errors(theta))
        row.update(setup.fine_errors(theta), status=hist.message,
                   loss=hist.records[-1]["value"], iters=hist.records[-1]["iter"],
                   pressure_mean=setup.pressure_mean(theta), multiplier=float(theta[-1]))
        summary.append(row)
        tu, tp, _ = setup.loss.split(theta)
        save_checkpoint(os.path.join(out, f"flux_seed{seed}.cfnn"), setup.archs[0], tu)
        save_checkpoint(os.path.join(out, f"pressure_seed{seed}.cfnn"), setup.archs[1], tp)
    keys = ["e_l2_feinn", "e_l2_nn", "e_hdiv_feinn", "e_l2_p_feinn", "e_l2_p_nn", "e_l2_fine",
            "e_hdiv_fine", "pressure_mean", "loss"]
    ok = [r for r in summary if "e_l2_feinn" in r]
    fem = dict(setup.fem_errors, seed="fem", status="FEM baseline")
    rows = summary + seed_statistics(ok, keys) + [fem]
    write_csv(os.path.join(out, "history.csv"), DARCY_HISTORY_COLUMNS, history)
    write_csv(os.path.join(out, "summary.csv"),
              ["seed"] + keys + ["multiplier", "nparams", "iters", "status"], rows)
    return {"history": history, "summary": rows, "fem": setup.fem_errors}


# -- inverse Maxwell -----------------------------------------------------------

_MODE_CASES = {"partial": "inverse_partial", "noisy": "inverse_noisy",
               "boundary": "inverse_boundary"}


def make_observations(case, obs):
    """Observation points and values for the configured mode; noise uses its own seed."""
    if obs.mode == "boundary":
        pts = boundary_points(obs.n, obs.inset)
    else:
        pts = lattice_points(obs.n, obs.lo, obs.hi)
    vals = noisy(case.u(pts), obs.sigma, np.random.default_rng(obs.noise_seed))
    return ObservationSet(pts, vals, tuple(obs.components))


class InverseSetup:
    def __init__(self, config):
        p, obs = self.p, self.obs = config.problem, config.observations
        self.config = config
        name = p.case if p.case.startswith("inverse") else _MODE_CASES[obs.mode]
        self.case = case = get_case(name)
        mesh = build_cartesian(config.mesh.n, config.mesh.n)
        boundary = obs.mode == "boundary"
        # kappa is the unknown: the problem carries a placeholder coefficient
        self.problem = maxwell_problem(mesh, p.order, case.f, 1.0,
                                       g=None if boundary else case.u, test=p.test,
                                       constrained=not boundary)
        self.kspace = kappa_space(mesh)
        self.plans = (interpolation_plan(self.problem.trial),
                      interpolation_plan(self.kspace, "all"))
        self.archs = (MLPArch.build(2, 2, p.depth, p.width, p.activation),
                      MLPArch.build(2, 1, p.kappa_depth, p.kappa_width, p.kappa_activation,
                                    rectify=True))
        self.observations = make_observations(case, obs)
        self.loss = InverseLoss(self.problem, self.plans, self.archs, self.observations,
                                kappa_space=self.kspace, spec=_loss_spec(config),
                                boundary=boundary, squared=config.loss.squared)
        self.npts = _quad(config, p.order)
        self.norm_u = fe_errors(self.problem.trial, np.zeros(self.problem.trial.ndofs), case.u,
                                case.curl_u, npts=self.npts)
        self.norm_k = fe_errors(self.kspace, np.zeros(self.kspace.ndofs), case.kappa,
                                npts=self.npts)["l2"]

    def theta0(self, seed):
        return np.concatenate([glorot_init(self.archs[0], seed),
                               glorot_init(self.archs[1], seed + 2 ** 32)])

    def errors(self, theta):
        case, mesh = self.case, self.problem.trial.mesh
        u_full, k = self.loss.fields(theta)
        tu, tk = self.loss.split(theta)
        fu = fe_errors(self.problem.trial, u_full, case.u, case.curl_u, npts=self.npts)
        fk = fe_errors(self.kspace, k, case.kappa, npts=self.npts)["l2"]
        nu = field_errors(mesh, lambda x: forward(self.archs[0], tu, x), case.u,
                          network_curl(self.archs[0], tu), case.curl_u, npts=self.npts)
        nk = field_errors(mesh, lambda x: forward(self.archs[1], tk, x)[:, 0], case.kappa,
                          npts=self.npts)["l2"]
        nu_l2, nu_hc = self.norm_u["l2"], self.norm_u["hcurl"]
        return {"eps_l2_u_feinn": fu["l2"] / nu_l2, "eps_l2_u_nn": nu["l2"] / nu_l2,
                "eps_hcurl_u_feinn": fu["hcurl"] / nu_hc, "eps_hcurl_u_nn": nu["deriv"] / nu_hc,
                "eps_l2_kappa_feinn": fk / self.norm_k, "eps_l2_kappa_nn": nk / self.norm_k}

    def schedule(self):
        s = self.config.schedule
        return TrainingSchedule.inverse(s.fit, s.coeff, list(s.composite), list(s.alphas))


def run_inverse_maxwell(config, out=None):
    """Three-step inverse training; summary.csv holds the per-seed box-plot data."""
    out = _out(config, out)
    setup = InverseSetup(config)
    history, summary = [], []
    for seed in config.problem.seeds:
        row = {"seed": seed, "nparams": setup.loss.nparams}
        try:
            theta, hist = train_inverse(setup.loss, setup.schedule(), setup.theta0(seed),
                                        monitor=setup.errors, config=_bfgs(config))
        except _RUN_ERRORS as exc:
            row["status"] = _status(exc)
            summary.append(row)
            continue
        history += _history_rows(seed, hist)
        row.update(setup.errors(theta), status=hist.message, loss=hist.records[-1]["value"],
                   iters=hist.records[-1]["iter"])
        summary.append(row)
        tu, tk = setup.loss.split(theta)
        save_checkpoint(os.path.join(out, f"state_seed{seed}.cfnn"), setup.archs[0], tu)
        save_checkpoint(os.path.join(out, f"kappa_seed{seed}.cfnn"), setup.archs[1], tk)
    keys = INVERSE_HISTORY_COLUMNS[4:] + ["loss"]
    ok = [r for r in summary if "eps_l2_kappa_feinn" in r]
    rows = summary + seed_statistics(ok, keys)
    write_csv(os.path.join(out, "history.csv"), INVERSE_HISTORY_COLUMNS, history)
    write_csv(os.path.join(out, "summary.csv"), ["seed"] + keys + ["nparams", "iters", "status"],
              rows)
    return {"history": history, "summary": rows}
