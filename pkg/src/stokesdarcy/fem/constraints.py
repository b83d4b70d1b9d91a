"""Affine dof constraints eliminated as u = T u_free + g.

Identifications (periodic pairs, interface jumps) are merged with a weighted
union-find, so every constrained dof ends up expressed through one free root
dof plus an offset and no slave is ever the master of another constraint.
Dirichlet data fixes the value of a whole identification class.  Mean-zero
conditions are kept apart and become Lagrange multiplier rows.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp


class ConstraintError(ValueError):
    pass


class ConstraintSet:
    def __init__(self, ndof, tol=1e-12):
        self.ndof = ndof
        self.tol = tol
        self._parent = np.arange(ndof)
        self._off = np.zeros(ndof)  # u[i] = u[parent[i]] + off[i]
        self._value = {}  # root -> fixed value of the root
        self.mean_zero = []  # (vector, value) multiplier rows
        self.mean_zero_modes = []  # optional nullspace direction per row
        self.log = []

    # -- union-find with offsets -------------------------------------------
    def _find(self, i):
        path = []
        while self._parent[i] != i:
            path.append(i)
            i = self._parent[i]
        root = i
        # compress: accumulate offsets from the top of the path down
        acc = 0.0
        for j in reversed(path):
            acc += self._off[j]
            self._off[j] = acc
            self._parent[j] = root
        return root

    def _link(self, master, slave, jump):
        """Impose u[slave] = u[master] + jump."""
        rm, rs = self._find(master), self._find(slave)
        om, os_ = self._offset(master), self._offset(slave)
        if rm == rs:
            if abs(os_ - om - jump) > self.tol * max(1.0, abs(jump)):
                raise ConstraintError(f"conflicting identification of dofs {master}, {slave}")
            return
        # u[rs] = u[slave] - os = u[master] + jump - os = u[rm] + om + jump - os
        shift = om + jump - os_
        vm, vs = self._value.get(rm), self._value.get(rs)
        if vm is not None and vs is not None:
            if abs(vs - (vm + shift)) > 1e-9 * max(1.0, abs(vs)):
                raise ConstraintError(f"identified dofs {master}, {slave} carry different fixed values")
        self._parent[rs] = rm
        self._off[rs] = shift
        if vs is not None:
            self._value.pop(rs)
            if vm is None:
                self._value[rm] = vs - shift

    def _offset(self, i):
        self._find(i)
        return 0.0 if self._parent[i] == i else self._off[i]

    # -- public constraint classes -------------------------------------------
    def dirichlet(self, dofs, values=0.0):
        dofs = np.atleast_1d(np.asarray(dofs, int))
        values = np.broadcast_to(np.asarray(values, float), dofs.shape)
        for i, v in zip(dofs, values):
            r = self._find(i)
            rv = v - self._offset(i)
            old = self._value.get(r)
            if old is not None and abs(old - rv) > 1e-9 * max(1.0, abs(rv)):
                raise ConstraintError(f"dof {i} receives two different Dirichlet values")
            self._value[r] = rv
        return self

    def periodic(self, masters, slaves):
        for m, s in zip(np.atleast_1d(masters), np.atleast_1d(slaves)):
            self._link(int(m), int(s), 0.0)
        return self

    def jump(self, masters, slaves, values):
        """slave (plus side) = master (minus side) + jump value."""
        masters = np.atleast_1d(np.asarray(masters, int))
        values = np.broadcast_to(np.asarray(values, float), masters.shape)
        for m, s, v in zip(masters, np.atleast_1d(slaves), values):
            self._link(int(m), int(s), float(v))
        return self

    def add_mean_zero(self, vector, value=0.0, mode=None):
        """vector·u = value, enforced by a multiplier.

        `mode` may name the nullspace direction the condition fixes (e.g. the
        constant pressure); the solver then pins one dof and shifts along it
        instead of bordering the matrix with a dense row.
        """
        vector = np.asarray(vector, float)
        for v, val in self.mean_zero:
            if v.shape == vector.shape and np.array_equal(v, vector) and val == value:
                return self
        self.mean_zero.append((vector, float(value)))
        self.mean_zero_modes.append(None if mode is None else np.asarray(mode, float))
        return self

    # -- elimination ----------------------------------------------------------
    def resolve(self):
        """Return (T, g, free) with u = T @ u_free + g."""
        roots = np.array([self._find(i) for i in range(self.ndof)])
        off = np.where(roots == np.arange(self.ndof), 0.0, self._off)
        fixed = np.zeros(self.ndof, bool)
        rootval = np.zeros(self.ndof)
        for r, v in self._value.items():
            fixed[r] = True
            rootval[r] = v
        free = np.flatnonzero((roots == np.arange(self.ndof)) & ~fixed)
        col = -np.ones(self.ndof, int)
        col[free] = np.arange(len(free))
        g = off + rootval[roots]
        rows = np.flatnonzero(~fixed[roots])
        T = sp.csr_matrix((np.ones(len(rows)), (rows, col[roots[rows]])),
                          shape=(self.ndof, len(free)))
        return T, g, free

    def n_constrained(self):
        return self.ndof - len(self.resolve()[2])
