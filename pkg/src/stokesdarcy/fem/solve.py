"""Direct sparse solve of a reduced saddle-point system."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fields import Field

log = logging.getLogger(__name__)


class SingularSystemError(RuntimeError):
    pass


@dataclass
class Solution:
    x: np.ndarray
    residual: float
    fields: dict
    ndof: int

    def __getitem__(self, name):
        return self.fields[name]


class _Umfpack:
    """UMFPACK factorization through cvxopt; solve(b) like a SuperLU object."""

    def __init__(self, matrix):
        from cvxopt import matrix as cmatrix, spmatrix, umfpack

        A = matrix.tocoo()
        self._umf = umfpack
        self._A = spmatrix(cmatrix(A.data.astype(float)), cmatrix(A.row.astype("i")),
                           cmatrix(A.col.astype("i")), A.shape)
        try:
            self._F = umfpack.numeric(self._A, umfpack.symbolic(self._A))
        except ArithmeticError as exc:
            raise SingularSystemError(f"UMFPACK: {exc}") from exc

    def solve(self, b):
        from cvxopt import matrix as cmatrix

        x = cmatrix(np.ascontiguousarray(b, float))
        self._umf.solve(self._A, self._F, x)
        return np.array(x).ravel()


def _factor(matrix, method="umfpack"):
    """Sparse LU: UMFPACK by default, SuperLU (symmetric mode or COLAMD) otherwise."""
    if method == "umfpack":
        return _Umfpack(matrix)
    opts = dict(permc_spec="COLAMD") if method == "colamd" else \
        dict(permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options=dict(SymmetricMode=True))
    try:
        return spla.splu(matrix.tocsc(), **opts)
    except RuntimeError as exc:
        raise SingularSystemError(str(exc)) from exc


def _direct(Ar, br, tol):
    """Try the factorizations in order; keep the best residual."""
    nb = np.linalg.norm(br)
    nb = nb if nb > 0 else 1.0
    xr, res, errors = None, np.inf, []
    for method in ("umfpack", "colamd"):
        try:
            lu = _factor(Ar, method)
        except SingularSystemError as exc:
            errors.append(f"{method}: {exc}")
            continue
        x_try = lu.solve(br)
        r_try = float(np.linalg.norm(Ar @ x_try - br) / nb)
        if xr is None or (np.isfinite(r_try) and not r_try >= res):
            xr, res = x_try, r_try
        if np.isfinite(res) and res <= tol:
            break
        log.info("%s residual %.2e, trying the next factorization", method, res)
    return xr, res, errors


def _pinned(system, tol):
    """Single gauge condition with a known nullspace mode: pin one dof, then shift."""
    cs = system.constraints
    if len(cs.mean_zero) != 1 or cs.mean_zero_modes[0] is None:
        return None
    A0, b0, T, g, free = system.eliminate()
    c, value = cs.mean_zero[0]
    z = cs.mean_zero_modes[0][free]
    scale = abs(A0).max() if A0.nnz else 1.0
    if not z.any() or np.abs(A0 @ z).max() > 1e-10 * scale * np.abs(z).max():
        return None
    cr = T.T @ c
    cz = cr @ z
    if abs(cz) < 1e-14 * np.abs(cr).sum():
        return None
    k = int(np.flatnonzero(z)[0])
    keep = np.ones(A0.shape[0])
    keep[k] = 0.0
    P = sp.diags(keep)
    A1 = (P @ A0 @ P + sp.csr_matrix(([1.0], ([k], [k])), shape=A0.shape)).tocsr()
    b1 = b0 * keep
    x, _, errors = _direct(A1, b1, tol)
    if x is None:
        return None
    x = x + (value - c @ g - cr @ x) / cz * z
    nb = np.linalg.norm(b0)
    res = float(np.linalg.norm(A0 @ x - b0) / (nb if nb > 0 else 1.0))
    if not np.isfinite(res) or res > tol:
        log.info("pinned gauge residual %.2e (data incompatible?), using the multiplier form", res)
        return None
    return np.concatenate([x, [0.0]]), res, A0.shape[0]


def _suspects(system):
    out = []
    if system.pressure_modes():
        out.append("pressure gauge (constant pressure mode unfixed)")
    A0 = system.eliminate()[0]
    one = np.ones(A0.shape[0])
    scale = abs(A0).max() if A0.nnz else 1.0
    if A0.shape[0] and np.abs(A0 @ one).max() <= 1e-10 * scale * A0.shape[0]:
        out.append("constant mode unfixed (pure Neumann data or a floating periodic component)")
    if not out:
        out.append("floating periodic component or missing Dirichlet data")
    return out


def solve(system, tol=1e-10, hard_tol=1e-6):
    """Factor and solve; returns a Solution whose fields follow system.partition.

    A factorization whose relative residual exceeds tol is retried with the
    next method; the best result is kept with a warning if none meets it, and
    a residual above hard_tol is reported as a singular system.
    A single gauge condition on a nullspace mode is imposed by pinning and
    shifting, otherwise by a bordered multiplier system.
    """
    pinned = _pinned(system, tol)
    if pinned is not None:
        xr, res, n = pinned
        T = system.eliminate()[2]
    else:
        Ar, br, T, g = system.reduce()
        n = Ar.shape[0]
        xr, res, errors = _direct(Ar, br, tol)
        if xr is None:
            raise SingularSystemError(f"singular factorization ({'; '.join(errors)}); "
                                      f"suspect: {', '.join(_suspects(system))}")
    if not np.all(np.isfinite(xr)) or not res <= hard_tol:
        raise SingularSystemError(f"numerically singular system (relative residual {res:.2e}); "
                                  f"suspect: {', '.join(_suspects(system))}")
    if res > tol:
        log.warning("solver residual %.3e exceeds %.1e", res, tol)
    x = system.expand(xr)
    fields = {}
    for name, sl in system.partition.items():
        space = system.spaces.get(name)
        if space is not None:
            fields[name] = Field(space, x[sl], name)
    if system.constraints.mean_zero:
        fields["multipliers"] = xr[T.shape[1]:]
    return Solution(x, res, fields, n)
