"""Quadrature rules on the reference triangle.

Rules are returned in barycentric form ``(bary, weights)`` with ``bary`` of
shape ``(nq, 3)`` and weights summing to one, so that

    int_T g  ~=  |T| * sum_q weights[q] * g(x_q)

for any triangle ``T``.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

__all__ = ["triangle_rule", "collapsed_gauss_rule", "map_points"]


def _dunavant5():
    s = np.sqrt(15.0)
    a1 = (6.0 - s) / 21.0
    a2 = (6.0 + s) / 21.0
    w1 = (155.0 - s) / 1200.0
    w2 = (155.0 + s) / 1200.0
    bary = [[1 / 3, 1 / 3, 1 / 3]]
    weights = [9.0 / 40.0]
    for a, w in ((a1, w1), (a2, w2)):
        b = 1.0 - 2.0 * a
        bary += [[a, a, b], [a, b, a], [b, a, a]]
        weights += [w, w, w]
    return np.array(bary), np.array(weights)


@lru_cache(maxsize=None)
def collapsed_gauss_rule(degree: int):
    """Conical product Gauss rule, exact for polynomials of total ``degree``.

    Built from the Duffy map of the unit square onto the triangle; the
    Jacobian adds one to the polynomial degree in the collapsed direction.
    """
    n = max(1, int(np.ceil((degree + 2) / 2)))
    g, wg = np.polynomial.legendre.leggauss(n)
    t = 0.5 * (g + 1.0)
    wt = 0.5 * wg
    u, v = np.meshgrid(t, t, indexing="ij")
    wu, wv = np.meshgrid(wt, wt, indexing="ij")
    x = u.ravel()
    y = (v * (1.0 - u)).ravel()
    w = (wu * wv * (1.0 - u)).ravel() * 2.0
    bary = np.column_stack([1.0 - x - y, x, y])
    return bary, w


@lru_cache(maxsize=None)
def triangle_rule(degree: int):
    """Return a rule exact for polynomials up to ``degree``.

    Degree <= 2 uses the 3-point interior rule, degree <= 5 the 7-point
    Dunavant rule, anything higher a collapsed Gauss product rule.
    """
    if degree < 0:
        raise ValueError("quadrature degree must be non-negative")
    if degree <= 2:
        bary = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
        return bary, np.full(3, 1.0 / 3.0)
    if degree <= 5:
        return _dunavant5()
    return collapsed_gauss_rule(degree)


def map_points(vertices: np.ndarray, triangles: np.ndarray, bary: np.ndarray) -> np.ndarray:
    """Physical quadrature points, shape ``(nt, nq, 2)``."""
    corners = vertices[triangles]  # (nt, 3, 2)
    return np.einsum("qk,tkd->tqd", bary, corners)
