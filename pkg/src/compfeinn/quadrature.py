"""Gauss-Legendre rules and Legendre polynomial tables on [-1, 1]."""

import numpy as np
from numpy.polynomial import legendre


def gauss_1d(npts):
    """Gauss-Legendre points and weights on [-1, 1], exact to degree 2*npts - 1."""
    if npts < 1:
        raise ValueError("need at least one quadrature point")
    return legendre.leggauss(npts)


def gauss_square(npts):
    """Tensor Gauss rule on [-1, 1]^2 with ``npts`` points per direction.

    Points are ordered with the x index running fastest.
    """
    x, w = gauss_1d(npts)
    X, Y = np.meshgrid(x, x, indexing="xy")
    W = np.outer(w, w)
    return np.column_stack([X.ravel(), Y.ravel()]), W.ravel()


def legendre_table(x, degree):
    """Values of P_0..P_degree at ``x``, shape (len(x), degree + 1)."""
    return legendre.legvander(np.asarray(x, dtype=float), degree)


def legendre_derivative_table(x, degree):
    """Derivatives P_0'..P_degree' at ``x``, shape (len(x), degree + 1)."""
    x = np.asarray(x, dtype=float)
    out = np.zeros((x.size, degree + 1))
    for n in range(1, degree + 1):
        c = np.zeros(n + 1)
        c[n] = 1.0
        out[:, n] = legendre.legval(x, legendre.legder(c))
    return out
