"""Quadrature on the reference triangle and on edges."""
import numpy as np

# Dunavant degree-4 rule, barycentric points, weights summing to 1
_A1, _B1, _W1 = 0.445948490915965, 0.108103018168070, 0.223381589678011
_A2, _B2, _W2 = 0.091576213509771, 0.816847572980459, 0.109951743655322


def _dunavant4():
    pts = []
    for a, b in ((_A1, _B1), (_A2, _B2)):
        pts += [(b, a, a), (a, b, a), (a, a, b)]
    w = [_W1] * 3 + [_W2] * 3
    return np.array(pts), np.array(w)


def _collapsed(order):
    """Duffy-collapsed Gauss rule exact for polynomials of the given degree."""
    n = order // 2 + 2
    x, wx = np.polynomial.legendre.leggauss(n)
    u, wu = 0.5 * (x + 1), 0.5 * wx
    U, V = np.meshgrid(u, u, indexing="ij")
    W = np.outer(wu, wu) * (1 - U)
    l1 = U.ravel()
    l2 = (V * (1 - U)).ravel()
    pts = np.column_stack([1 - l1 - l2, l1, l2])
    return pts, 2 * W.ravel()


def triangle_rule(order=4):
    """Barycentric points (Q,3) and weights (Q,) with sum(weights) = 1."""
    if order <= 4:
        return _dunavant4()
    return _collapsed(order)


def edge_rule(order=5):
    """Gauss-Legendre points on [0, 1] and weights summing to 1."""
    n = (order + 2) // 2
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1), 0.5 * w
