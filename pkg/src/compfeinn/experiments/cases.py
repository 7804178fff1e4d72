"""Manufactured solutions.

Maxwell cases are written symbolically and their sources derived with
sympy, so f = curl curl u + kappa u holds by construction. In 2D the
scalar curl is w = d_x u_2 - d_y u_1 and curl w = (d_y w, -d_x w).
"""

from dataclasses import dataclass, field

import numpy as np
import sympy as sym

X, Y = sym.symbols("x y", real=True)


def _lambdify(expr, ncomp):
    exprs = list(expr) if ncomp > 1 else [expr]
    funcs = [sym.lambdify((X, Y), e, "numpy") for e in exprs]

    def f(points):
        points = np.asarray(points, dtype=float)
        xs, ys = points[:, 0], points[:, 1]
        cols = [np.broadcast_to(np.asarray(fn(xs, ys), dtype=float), xs.shape) for fn in funcs]
        return np.column_stack(cols) if ncomp > 1 else np.array(cols[0])
    return f


@dataclass
class ManufacturedCase:
    name: str
    kind: str
    u: object
    curl_u: object = None
    div_u: object = None
    f: object = None
    kappa: object = None
    p: object = None
    curl_curl_u: object = None
    exprs: dict = field(default_factory=dict, repr=False)

    def g(self, points):
        """Dirichlet data: the exact state itself."""
        return self.u(points)


def maxwell_case(name, u1, u2, kappa):
    w = sym.diff(u2, X) - sym.diff(u1, Y)
    cc = (sym.diff(w, Y), -sym.diff(w, X))
    f = (cc[0] + kappa * u1, cc[1] + kappa * u2)
    return ManufacturedCase(
        name, "maxwell", _lambdify((u1, u2), 2), curl_u=_lambdify(w, 1),
        f=_lambdify(f, 2), kappa=_lambdify(kappa, 1), curl_curl_u=_lambdify(cc, 2),
        exprs={"u": (u1, u2), "curl": w, "kappa": kappa, "f": f})


def _sphere_u(points):
    x, y, z = np.asarray(points, dtype=float).T
    return np.column_stack([y * z * (1 - 3 * x ** 2), x * z * (1 - 3 * y ** 2),
                            x * y * (1 - 3 * z ** 2)])


def _sphere_p(points):
    x, y, z = np.asarray(points, dtype=float).T
    return -x * y * z


def _sphere_f(points):
    x, y, z = np.asarray(points, dtype=float).T
    return -12.0 * x * y * z


def darcy_sphere_case():
    """u = -grad_S p with p = -xyz on the unit sphere; div_S u = -12 xyz."""
    return ManufacturedCase("darcy_sphere", "darcy_sphere", _sphere_u, div_u=_sphere_f,
                            f=_sphere_f, p=_sphere_p)


def _registry():
    pi = sym.pi
    cases = {}
    cases["smooth_maxwell"] = lambda: maxwell_case(
        "smooth_maxwell", sym.cos(4.6 * X) * sym.cos(3.4 * Y),
        sym.sin(3.2 * X) * sym.sin(4.8 * Y), sym.Integer(1))
    inv_u = (sym.cos(pi * X) * sym.cos(pi * Y), sym.sin(pi * X) * sym.sin(pi * Y))
    cases["inverse_partial"] = lambda: maxwell_case(
        "inverse_partial", *inv_u,
        1 + 5 * sym.exp(-5 * ((2 * X - 1) ** 2 + (Y - sym.Rational(1, 2)) ** 2)))
    cases["inverse_noisy"] = lambda: maxwell_case(
        "inverse_noisy", *inv_u, 1 / (1 + X ** 2 + Y ** 2 + (X - 1) ** 2 + (Y - 1) ** 2))
    cases["inverse_boundary"] = lambda: maxwell_case(
        "inverse_boundary", sym.cos(pi * X) * sym.cos(Y), sym.sin(X) * sym.sin(pi * Y),
        sym.Piecewise((sym.Integer(1), Y > 2 * X), (sym.Integer(10), True)))
    cases["wave_front"] = lambda: maxwell_case(
        "wave_front",
        sym.atan(50 * (sym.sqrt((X + sym.Rational(1, 20)) ** 2 + (Y + sym.Rational(1, 20)) ** 2)
                       - sym.Rational(6, 5))),
        sym.Rational(3, 2) * sym.exp(-500 * ((X - sym.Rational(1, 2)) ** 2
                                            + (Y - sym.Rational(1, 2)) ** 2)),
        sym.Integer(1))
    cases["darcy_sphere"] = darcy_sphere_case
    return cases


CASES = _registry()
_BUILT = {}


def get_case(name):
    if name not in CASES:
        raise KeyError(f"unknown manufactured case {name!r}; known: {sorted(CASES)}")
    if name not in _BUILT:
        _BUILT[name] = CASES[name]()
    return _BUILT[name]


def wave_front_distance(points):
    """Distance of points to the circular front of the wave-front case."""
    points = np.asarray(points, dtype=float)
    return np.abs(np.hypot(points[:, 0] + 0.05, points[:, 1] + 0.05) - 1.2)


def spot_check(case, rng, npts=20, h=1e-5):
    """Largest mismatch between the source and finite differences of the exact fields.

    Used to guard the symbolic pipeline: the curl is compared with central
    differences of u, and curl curl u + kappa u with differences of the curl.
    """
    if case.kind != "maxwell":
        raise ValueError("spot checks are defined for Maxwell cases")
    p = rng.uniform(0.1, 0.9, size=(npts, 2))
    ex, ey = np.array([h, 0.0]), np.array([0.0, h])
    du_dx = (case.u(p + ex) - case.u(p - ex)) / (2 * h)
    du_dy = (case.u(p + ey) - case.u(p - ey)) / (2 * h)
    curl_fd = du_dx[:, 1] - du_dy[:, 0]
    dw_dx = (case.curl_u(p + ex) - case.curl_u(p - ex)) / (2 * h)
    dw_dy = (case.curl_u(p + ey) - case.curl_u(p - ey)) / (2 * h)
    f_fd = np.column_stack([dw_dy, -dw_dx]) + case.kappa(p)[:, None] * case.u(p)
    scale = max(1.0, np.abs(case.f(p)).max())
    return max(np.abs(curl_fd - case.curl_u(p)).max() / max(1.0, np.abs(curl_fd).max()),
               np.abs(f_fd - case.f(p)).max() / scale)
