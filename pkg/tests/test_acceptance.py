"""Acceptance criteria, one test each.

Every test prints a single PASS/FAIL line with the measured values before
asserting, so the log of a full run doubles as the acceptance report.
Runs are single-threaded for reproducibility.
"""

import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from compfeinn.assembly import (assemble_maxwell_full, boundary_matrix, gram_matrix,
                                maxwell_problem, modified_residual_boundary_obs,
                                residual_vector)
from compfeinn.experiments.config import config_from_dict
from compfeinn.experiments.drivers import (ForwardSetup, run_darcy_sphere, run_fem_convergence,
                                           run_forward_feinn, run_inverse_maxwell)
from compfeinn.fespace import (build_space, eval_cells, eval_fe_function, interpolate,
                               interpolation_plan, linearized_test_space, zero_trace_subspace)
from compfeinn.loss import LossSpec, MaxwellLoss
from compfeinn.mesh import build_cartesian
from compfeinn.neural import MLPArch, glorot_init
from compfeinn.norms import cell_quadrature
from compfeinn.refelem import (LAGRANGE_CG, LAGRANGE_DG, NEDELEC, RAVIART_THOMAS, eval_shape,
                               make_element)

from gradcheck import loss_factories, relative_errors
from oracles import ExplicitND1, point_eval_matrix

pytestmark = pytest.mark.acceptance


@pytest.fixture(autouse=True)
def single_thread():
    with threadpool_limits(limits=1):
        yield


@pytest.fixture
def report(capsys):
    start = time.perf_counter()

    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number:>2}: {'PASS' if ok else 'FAIL'} "
                  f"({time.perf_counter() - start:.1f} s) {detail}")
        return ok
    return emit


def median(rows, key):
    return float(np.median([r[key] for r in rows if isinstance(r["seed"], int)]))


def seed_rows(rows):
    return [r for r in rows if isinstance(r["seed"], int)]


# 1 ---------------------------------------------------------------------------

def test_01_element_duality(report):
    # dof_i applied to the evaluated shape functions, independent of the
    # coefficient algebra used to build them
    worst = {}
    for family in (NEDELEC, RAVIART_THOMAS):
        for k in (1, 2, 3, 4):
            e = make_element(family, k)
            D = np.array([np.einsum("qk,qjk->j", d.weights.reshape(len(d.points), -1),
                                    eval_shape(e, d.points)) for d in e.dofs])
            worst[f"{family}{k}"] = np.abs(D - np.eye(e.ndofs)).max()
    err = max(worst.values())
    assert report(1, err < 1e-11, f"max |dof_i(phi_j) - delta_ij| = {err:.2e}")


# 2 ---------------------------------------------------------------------------

def test_02_linearized_dimensions(report):
    mismatches = []
    for family in (NEDELEC, RAVIART_THOMAS):
        for k in (2, 3, 4):
            for n in (4, 8):
                full = build_space(build_cartesian(n, n), (family, k))
                for trial in (full, zero_trace_subspace(full)):
                    test = linearized_test_space(trial)
                    if (test.ndofs, test.nfree) != (trial.ndofs, trial.nfree):
                        mismatches.append((family, k, n, trial.nfree, test.nfree))
    assert report(2, not mismatches, f"24 space pairs, mismatches: {mismatches or 'none'}")


# 3 ---------------------------------------------------------------------------

def _l2(vals, dx):
    return float(np.sqrt(np.sum(vals ** 2 * dx)))


def test_03_de_rham(report):
    mesh = build_cartesian(4, 4)
    cells = np.arange(mesh.ncells)
    complex_err, commute_err = 0.0, 0.0
    for k in (1, 2, 3, 4):
        _, q, dx = cell_quadrature(mesh, k + 4)
        cg = build_space(mesh, (LAGRANGE_CG, k))
        nd = build_space(mesh, (NEDELEC, k))
        rt = build_space(mesh, (RAVIART_THOMAS, k))
        dg = build_space(mesh, (LAGRANGE_DG, k - 1))
        # (a) gradients and rotated gradients of a discrete potential
        p = np.random.default_rng(k).normal(size=cg.ndofs)
        grad = lambda x: eval_fe_function(cg, p, x, "grad")[1]
        rgrad = lambda x: np.column_stack([-grad(x)[:, 1], grad(x)[:, 0]])
        _, c = eval_cells(nd, interpolate(nd, grad), cells, q, "curl")
        _, d = eval_cells(rt, interpolate(rt, rgrad), cells, q, "div")
        complex_err = max(complex_err, _l2(c, dx), _l2(d, dx))
        # (b) curl of the ND interpolant = DG interpolant of the curl,
        # for a field with a non-trivial gradient part and polynomial curl
        a = k + 2
        u = lambda x: np.column_stack([a * x[:, 0] ** (a - 1) * x[:, 1] ** a,
                                       a * x[:, 0] ** a * x[:, 1] ** (a - 1) + x[:, 0] ** k / k])
        curl_u = lambda x: x[:, 0] ** (k - 1)
        _, c = eval_cells(nd, interpolate(nd, u), cells, q, "curl")
        pc = eval_cells(dg, interpolate(dg, curl_u), cells, q)[..., 0]
        commute_err = max(commute_err, _l2(c - pc, dx))
    ok = complex_err < 1e-10 and commute_err < 1e-10
    assert report(3, ok, f"complex {complex_err:.2e}, commutativity {commute_err:.2e}")


# 4 ---------------------------------------------------------------------------

def _rel(a, b):
    a = a.toarray() if hasattr(a, "toarray") else np.asarray(a)
    b = b.toarray() if hasattr(b, "toarray") else np.asarray(b)
    return np.abs(a - b).max() / np.abs(b).max()


def test_04_dense_oracle(report):
    kappa = lambda x: 1.0 + x[:, 0] * x[:, 1]
    f = lambda x: np.column_stack([np.sin(3 * x[:, 1]), np.cos(2 * x[:, 0]) + x[:, 1]])
    g = lambda x: np.column_stack([x[:, 1] ** 2, np.sin(x[:, 0])])
    errs = {}
    for n in (2, 3):
        free = maxwell_problem(build_cartesian(n, n), 1, f, kappa, test="galerkin",
                               constrained=False, npts=5)
        oracle = ExplicitND1(free.trial.mesh)
        A, ell, C, M = oracle.matrices(kappa, f)
        E = oracle.boundary_matrix()
        A_h, ell_h = assemble_maxwell_full(free)
        errs[f"A{n}"] = _rel(A_h, A)
        errs[f"l{n}"] = _rel(ell_h, ell)
        u = np.random.default_rng(n).normal(size=free.trial.ndofs)
        errs[f"bnd{n}"] = _rel(modified_residual_boundary_obs(free, u), A @ u - ell + E @ u)
        prob = maxwell_problem(build_cartesian(n, n), 1, f, kappa, g=g, test="galerkin", npts=5)
        uf = np.random.default_rng(n + 10).normal(size=prob.trial.nfree)
        full = prob.trial.extend(uf, prob.offset)
        want = (A @ full - ell)[prob.test.free]
        errs[f"res{n}"] = max(_rel(residual_vector(prob, uf, cached=c), want) for c in (1, 0))
        arch = MLPArch.build(2, 2, 2, 5)
        theta = glorot_init(arch, n)
        tf = prob.test.free
        for norm in ("Unorm", "L2"):
            loss = MaxwellLoss(prob, interpolation_plan(prob.trial), arch,
                               LossSpec("Preconditioned", norm))
            r = loss.residual(theta)
            z = np.linalg.solve(C[np.ix_(tf, tf)], r)
            ref = r @ z if norm == "Unorm" else z @ M[np.ix_(tf, tf)] @ z
            errs[f"pre-{norm}{n}"] = abs(loss(theta)[0] - ref) / abs(ref)
        # higher order through a point-evaluation route
        hi = maxwell_problem(build_cartesian(n, n), 2, f, kappa, constrained=False)
        errs[f"A-k2-{n}"] = _rel(assemble_maxwell_full(hi)[0],
                                 point_eval_matrix(hi.test, hi.trial, kappa))
        errs[f"gram{n}"] = max(_rel(gram_matrix(free.trial, "Hcurl", free=False), C),
                               _rel(boundary_matrix(free), E))
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-10
    assert report(4, ok, f"{len(errs)} comparisons, worst {worst} = {errs[worst]:.2e}")


# 5 ---------------------------------------------------------------------------

def test_05_gradients(report):
    worst = {}
    for name, make in loss_factories().items():
        for seed in range(5):
            loss, theta = make(seed)
            coords = np.random.default_rng(100 + seed).choice(len(theta), 10, replace=False)
            worst[name] = max(worst.get(name, 0.0), relative_errors(loss, theta, coords).max())
    name = max(worst, key=worst.get)
    ok = worst[name] < 1e-6
    assert report(5, ok, f"{len(worst)} loss kinds x 5 seeds x 10 coordinates, "
                         f"worst {name} = {worst[name]:.2e}")


# 6 ---------------------------------------------------------------------------

def test_06_fem_convergence(report, tmp_path):
    slopes = {}
    for k in (1, 2):
        cfg = config_from_dict({"problem": {"order": k}, "mesh": {"sizes": [8, 16, 32, 64]}})
        fit = run_fem_convergence(cfg, tmp_path / f"k{k}")[-1]
        slopes[k] = (fit["rate_l2"], fit["rate_hcurl"])
    ok = all(abs(s - k) <= 0.15 for k, pair in slopes.items() for s in pair)
    detail = ", ".join(f"k={k}: L2 {a:.3f} Hcurl {b:.3f}" for k, (a, b) in slopes.items())
    assert report(6, ok, detail)


# 7 ---------------------------------------------------------------------------

FORWARD = {"problem": {"order": 1, "depth": 3, "width": 30, "seeds": [0, 1, 2, 3, 4]},
           "mesh": {"n": 8}, "loss": {"kind": "Preconditioned", "norm": "Unorm"},
           "schedule": {"pde": 2000}, "output": {"history_every": 100}}


def test_07_forward_parity(report, tmp_path):
    res = run_forward_feinn(config_from_dict(FORWARD), tmp_path)
    rows = seed_rows(res["summary"])
    fem = res["fem"]["l2"]
    feinn, nn = median(rows, "e_l2_feinn"), median(rows, "e_l2_nn")
    dev = abs(feinn - fem) / fem
    ok = dev <= 0.05 and nn <= fem
    assert report(7, ok, f"FEM {fem:.5e}, median FEINN {feinn:.5e} ({100 * dev:.3f}%), "
                         f"median NN {nn:.5e} ({nn / fem:.3f} x FEM)")


# 8 ---------------------------------------------------------------------------

def test_08_preconditioned_stability(report):
    cfg = config_from_dict({"problem": {"order": 3, "depth": 3, "width": 20},
                            "mesh": {"n": 16}, "loss": {"kind": "Preconditioned"},
                            "schedule": {"datafit": 300, "pde": 300},
                            "output": {"history_every": 1}})
    setup = ForwardSetup(cfg)
    _, hist = setup.train(glorot_init(setup.arch, 0))
    fit_end = [r for r in hist.records if r["stage"] == "DataFit"][-1]
    pde = [fit_end] + [r for r in hist.records if r["stage"] == "PDE"]
    e = np.array([r["e_hcurl_feinn"] for r in pde])
    nn = np.array([r["e_hcurl_nn"] for r in pde])
    ok = e.max() <= 3 * e[0] and e[-1] <= e[0]
    assert report(8, ok, f"{len(e) - 1} PDE iterates: start {e[0]:.3e}, max/start "
                         f"{e.max() / e[0]:.3f}, final {e[-1]:.3e} (raw NN max/start "
                         f"{nn.max() / nn[0]:.3f}, FEM {setup.fem_errors['hcurl']:.3e})")


# 9 ---------------------------------------------------------------------------

def test_09_darcy_sphere(report, tmp_path):
    conv = config_from_dict({"problem": {"kind": "darcy_sphere", "case": "darcy_sphere"},
                             "mesh": {"sizes": [4, 8, 16]}})
    slope = run_fem_convergence(conv, tmp_path / "fem")[-1]["rate_l2"]
    cfg = config_from_dict({"problem": {"kind": "darcy_sphere", "case": "darcy_sphere",
                                        "depth": 2, "width": 20, "seeds": [0, 1, 2]},
                            "mesh": {"ne": 8}, "loss": {"kind": "Preconditioned"},
                            "schedule": {"pde": 1500}, "output": {"history_every": 100}})
    res = run_darcy_sphere(cfg, tmp_path / "feinn")
    rows = seed_rows(res["summary"])
    fem = res["fem"]["e_l2_feinn"]
    feinn = median(rows, "e_l2_feinn")
    mean = max(abs(r["pressure_mean"]) for r in rows)
    dev = abs(feinn - fem) / fem
    ok = 0.85 <= slope <= 1.15 and dev <= 0.10 and mean < 1e-8
    assert report(9, ok, f"FEM flux slope {slope:.3f}; FEM {fem:.5e}, median FEINN "
                         f"{feinn:.5e} ({100 * dev:.3f}%); max |pressure mean| {mean:.1e}")


# 10 --------------------------------------------------------------------------

INVERSE = {
    "partial": {"problem": {"kind": "inverse_maxwell", "case": "inverse_partial",
                            "depth": 2, "width": 20, "activation": "softplus",
                            "seeds": [0, 1, 2, 3, 4]},
                "mesh": {"n": 20}, "observations": {"mode": "partial", "n": 30},
                "schedule": {"fit": 150, "coeff": 50, "composite": [600, 600, 600],
                             "alphas": [0.001, 0.003, 0.009]},
                "output": {"history_every": 100}},
    "noisy": {"problem": {"kind": "inverse_maxwell", "case": "inverse_noisy",
                          "depth": 2, "width": 20, "activation": "softplus", "kappa_width": 50,
                          "seeds": [0, 1, 2, 3, 4]},
              "mesh": {"n": 20},
              "observations": {"mode": "noisy", "n": 30, "sigma": 0.05,
                               "components": [True, True]},
              "schedule": {"fit": 150, "coeff": 50, "composite": [400, 400],
                           "alphas": [0.01, 0.03]},
              "output": {"history_every": 100}},
}


def test_10_inverse_robustness(report, tmp_path):
    parts, ok = [], True
    for mode, data in INVERSE.items():
        rows = seed_rows(run_inverse_maxwell(config_from_dict(data), tmp_path / mode)["summary"])
        k, u = median(rows, "eps_l2_kappa_feinn"), median(rows, "eps_l2_u_feinn")
        ok &= k < 0.15 and u < 0.05
        parts.append(f"{mode}: median eps(kappa) {100 * k:.1f}%, eps(u) {100 * u:.2f}%")
    assert report(10, ok, "; ".join(parts) + " (targets 15% and 5%)")


# 11 --------------------------------------------------------------------------

def test_11_determinism(report, tmp_path):
    runs = {
        "fem-convergence": (run_fem_convergence,
                            {"problem": {"order": 2}, "mesh": {"sizes": [4, 8]}}),
        "forward-maxwell": (run_forward_feinn,
                            dict(FORWARD, problem=dict(FORWARD["problem"], seeds=[0]))),
        "forward-darcy-sphere": (run_darcy_sphere,
                                 {"problem": {"kind": "darcy_sphere", "case": "darcy_sphere",
                                              "depth": 2, "width": 10},
                                  "mesh": {"ne": 2, "fine_factor": 2},
                                  "schedule": {"pde": 200}}),
        "inverse-maxwell": (run_inverse_maxwell,
                            dict(INVERSE["noisy"], problem=dict(INVERSE["noisy"]["problem"],
                                                                seeds=[0]), mesh={"n": 8})),
    }
    differing = []
    for name, (driver, data) in runs.items():
        outs = []
        for rep in ("a", "b"):
            out = tmp_path / name / rep
            driver(config_from_dict(data), out)
            outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        if outs[0] != outs[1]:
            differing.append(name)
    files = sum(len(list((tmp_path / n / "a").iterdir())) for n in runs)
    assert report(11, not differing, f"{len(runs)} drivers, {files} output files compared, "
                                     f"differing: {differing or 'none'}")
