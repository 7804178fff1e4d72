"""Error norms by cellwise tensor Gauss quadrature."""

import numpy as np

from .fespace import eval_cells
from .mesh import area_element
from .quadrature import gauss_square


def cell_quadrature(mesh, npts):
    """Physical points (nc, nq, dim), reference points (nq, 2) and weights (nc, nq)."""
    q, w = gauss_square(npts)
    x, J = mesh.map(q)
    return x, q, w * area_element(J)


def _sample(f, x):
    vals = np.asarray(f(x.reshape(-1, x.shape[-1])), dtype=float)
    return vals.reshape(x.shape[:2] + vals.shape[1:])


def _sq(diff, dx):
    if diff.ndim == 3:
        diff = np.sum(diff ** 2, axis=-1)
    else:
        diff = diff ** 2
    return float(np.sum(diff * dx))


def fe_errors(space, dofs, exact, exact_deriv=None, npts=None):
    """L2 error and, when ``exact_deriv`` is given, the H(curl)/H(div)/H1 error.

    ``exact_deriv`` returns curl (ND), div (RT) or gradient (CG) of the exact
    field at points. Defaults to (k + 4)^2 points per cell.
    """
    k = space.elem.order
    npts = npts or k + 4
    x, q, dx = cell_quadrature(space.mesh, npts)
    cells = np.arange(space.mesh.ncells)
    deriv = {"covariant": "curl", "contravariant": "div", "scalar": "grad"}[space.elem.mapping]
    if exact_deriv is None:
        uh = eval_cells(space, dofs, cells, q)
        dh = None
    else:
        uh, dh = eval_cells(space, dofs, cells, q, deriv)
    u = _sample(exact, x)
    if space.elem.ncomp == 1:
        uh = uh[..., 0]
    l2sq = _sq(uh - u, dx)
    out = {"l2": np.sqrt(l2sq)}
    if dh is not None:
        d = _sample(exact_deriv, x)
        out[{"curl": "hcurl", "div": "hdiv", "grad": "h1"}[deriv]] = np.sqrt(l2sq + _sq(dh - d, dx))
    return out


def field_errors(mesh, approx, exact, approx_deriv=None, exact_deriv=None, npts=6):
    """Errors of a raw callable (for example a network) against an exact field."""
    x, _, dx = cell_quadrature(mesh, npts)
    l2sq = _sq(_sample(approx, x) - _sample(exact, x), dx)
    out = {"l2": np.sqrt(l2sq)}
    if approx_deriv is not None and exact_deriv is not None:
        out["deriv"] = np.sqrt(l2sq + _sq(_sample(approx_deriv, x) - _sample(exact_deriv, x), dx))
    return out


def l2_norm(mesh, f, npts=6):
    x, _, dx = cell_quadrature(mesh, npts)
    return np.sqrt(_sq(_sample(f, x), dx))
