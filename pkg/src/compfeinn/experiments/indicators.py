"""Per-cell error indicators, cell marking and the mesh-sequence driver."""

import math
import os

import numpy as np

from ..fespace import eval_cells, interpolation_plan
from ..neural import forward, glorot_init
from ..norms import cell_quadrature
from ..optimize import TrainingSchedule
from .tables import write_csv

INDICATOR_KINDS = ("real", "integration", "network")


def _cellwise(diff, dx):
    if diff.ndim == 3:
        diff = np.sum(diff ** 2, axis=-1)
    else:
        diff = diff ** 2
    return np.sqrt(np.sum(diff * dx, axis=1))


def _at(f, x):
    vals = np.asarray(f(x.reshape(-1, x.shape[-1])), dtype=float)
    return vals.reshape(x.shape[:2] + vals.shape[1:])


def cell_l2_error(space, dofs, exact, npts=None):
    """Per-cell L2 norm of (FE function - exact)."""
    npts = npts or space.elem.order + 4
    x, q, dx = cell_quadrature(space.mesh, npts)
    uh = eval_cells(space, dofs, np.arange(space.mesh.ncells), q)
    if space.elem.ncomp == 1:
        uh = uh[..., 0]
    return _cellwise(uh - _at(exact, x), dx)


def compute_error_indicators(kind, space, field, dofs=None, exact=None, f=None, kappa=None,
                             curl_curl=None, npts=None):
    """Per-cell indicator values for a trained field on ``space``.

    real        -- L2 error of the FE function ``dofs`` against ``exact``;
    integration -- L2 distance between ``field`` and its interpolant;
    network     -- L2 norm of the strong residual curl curl u + kappa u - f,
                   with ``curl_curl`` evaluating the field's second derivatives.
    ``dofs`` defaults to the interpolant of ``field`` over all DOFs.
    """
    if kind not in INDICATOR_KINDS:
        raise ValueError(f"unknown indicator kind {kind!r}; expected one of {INDICATOR_KINDS}")
    npts = npts or space.elem.order + 4
    if dofs is None and kind != "network":
        plan = interpolation_plan(space, "all")
        dofs = plan.apply(np.asarray(field(plan.points), dtype=float))
    if kind == "real":
        if exact is None:
            raise ValueError("the 'real' indicator needs the analytic solution")
        return cell_l2_error(space, dofs, exact, npts)
    x, q, dx = cell_quadrature(space.mesh, npts)
    u = _at(field, x)
    if kind == "integration":
        uh = eval_cells(space, dofs, np.arange(space.mesh.ncells), q)
        return _cellwise(u - uh, dx)
    if f is None or kappa is None or curl_curl is None:
        raise ValueError("the 'network' indicator needs f, kappa and curl_curl")
    res = _at(curl_curl, x) + _at(kappa, x)[..., None] * u - _at(f, x)
    return _cellwise(res, dx)


def mark_cells(values, fraction=0.10):
    """Ids of the ceil(fraction * n) largest values, ties broken by lowest id."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("empty indicator")
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    count = math.ceil(fraction * len(values))
    order = np.lexsort((np.arange(len(values)), -values))
    return np.sort(order[:count])


def network_indicators(setup, theta):
    """All three indicators for a forward setup at parameters ``theta``."""
    from .drivers import network_curl_curl
    arch, case = setup.arch, setup.case
    field = lambda x: forward(arch, theta, x)
    space = setup.problem.trial
    return {
        "real": compute_error_indicators("real", space, field, setup.loss.full_dofs(theta),
                                         exact=case.u, npts=setup.npts),
        "integration": compute_error_indicators("integration", space, field, npts=setup.npts),
        "network": compute_error_indicators("network", space, field, f=case.f, kappa=case.kappa,
                                            curl_curl=network_curl_curl(arch, theta),
                                            npts=setup.npts),
    }


def run_indicators(config, out=None):
    """Train on a mesh, compute and mark indicators, then refine uniformly and continue.

    Each entry of ``schedule.refinements`` is the PDE budget on the next,
    twice finer mesh, warm-started from the previous parameters.
    """
    from .drivers import ForwardSetup, _history_rows, _out
    out = _out(config, out)
    fraction = config.mesh.mark_fraction
    seed = config.problem.seeds[0]
    setup = ForwardSetup(config)
    theta = glorot_init(setup.arch, seed)
    budgets = [None] + list(config.schedule.refinements)
    history, cells, levels = [], [], []
    offset = 0
    for level, budget in enumerate(budgets):
        if level:
            setup = ForwardSetup(config, n=setup.n * 2)
            sched = TrainingSchedule.forward(budget)
        else:
            sched = setup.schedule()
        theta, hist = setup.train(theta, sched)
        for r in _history_rows(seed, hist):
            r["level"] = level
            r["iter"] += offset
            history.append(r)
        offset = history[-1]["iter"] if history else 0
        ind = network_indicators(setup, theta)
        marked = {k: set(mark_cells(v, fraction).tolist()) for k, v in ind.items()}
        centres = setup.problem.trial.mesh.map(np.zeros((1, 2)))[0][:, 0]
        for c in range(len(ind["real"])):
            row = {"level": level, "cell": c, "x": centres[c, 0], "y": centres[c, 1]}
            for k in INDICATOR_KINDS:
                row[k] = ind[k][c]
                row["marked_" + k] = c in marked[k]
            cells.append(row)
        levels.append(dict(setup.errors(theta), level=level, n=setup.n,
                           iters=offset, fem_l2=setup.fem_errors["l2"]))
    write_csv(os.path.join(out, "history.csv"),
              ["level", "seed", "stage", "iter", "loss", "e_l2_feinn", "e_l2_nn",
               "e_hcurl_feinn", "e_hcurl_nn"], history)
    write_csv(os.path.join(out, "indicators.csv"),
              ["level", "cell", "x", "y"] + list(INDICATOR_KINDS)
              + ["marked_" + k for k in INDICATOR_KINDS], cells)
    write_csv(os.path.join(out, "sequence.csv"),
              ["level", "n", "iters", "e_l2_feinn", "e_l2_nn", "e_hcurl_feinn", "e_hcurl_nn",
               "fem_l2"], levels)
    return {"history": history, "cells": cells, "levels": levels}
