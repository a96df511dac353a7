"""Clarabel adapter implementing the backend contract.

Clarabel solves  min q'x  s.t.  A x + s = b,  s in K.  The standard form
maps onto it as: equality rows into a zero cone, each nonnegative variable
through a one-row nonnegative cone, and each rotated block through the
usual orthogonal rotation onto a second-order cone.
"""

from __future__ import annotations

import math

import clarabel
import numpy as np
from scipy import sparse

from .program import (
    OPTIMAL_RESIDUAL,
    ConeProgram,
    ConicBackend,
    ConicSolution,
    SolveStatus,
    primal_residuals,
)

_SQ2 = math.sqrt(2.0)


class ClarabelBackend(ConicBackend):
    name = "clarabel"

    def __init__(self, tol: float = 1e-10, max_iter: int = 200, scale_rows: bool = True):
        self.tol = tol
        self.max_iter = max_iter
        self.scale_rows = scale_rows

    def _settings(self):
        s = clarabel.DefaultSettings()
        s.verbose = False
        s.tol_gap_abs = self.tol
        s.tol_gap_rel = self.tol
        s.tol_feas = self.tol
        s.max_iter = self.max_iter
        return s

    def solve(self, prog: ConeProgram) -> ConicSolution:
        c, A_eq, b_eq = prog.matrices()
        n = prog.num_vars
        m_eq = prog.num_rows

        scale = np.ones(m_eq)
        if self.scale_rows and m_eq:
            # Unit infinity-norm per equality row; p.u. data is already
            # well-scaled so this is the only presolve applied.
            row_max = np.maximum(np.abs(A_eq).max(axis=1).toarray().ravel(), 1e-300)
            scale = 1.0 / np.maximum(row_max, 1e-12)
            A_eq = sparse.diags(scale) @ A_eq
            b_eq = b_eq * scale

        blocks = [A_eq]
        bs = [b_eq]
        cones = [clarabel.ZeroConeT(m_eq)]

        nn = prog.nonneg_indices()
        if nn.size:
            N = sparse.csc_matrix(
                (-np.ones(nn.size), (np.arange(nn.size), nn)), shape=(nn.size, n)
            )
            blocks.append(N)
            bs.append(np.zeros(nn.size))
            cones.append(clarabel.NonnegativeConeT(int(nn.size)))

        for blk in prog.rsoc_blocks:
            dim = len(blk)
            rows = []
            cols = []
            vals = []
            rows += [0, 0, 1, 1]
            cols += [blk[0], blk[1], blk[0], blk[1]]
            vals += [-1.0 / _SQ2, -1.0 / _SQ2, -1.0 / _SQ2, 1.0 / _SQ2]
            for j, zi in enumerate(blk[2:]):
                rows.append(2 + j)
                cols.append(zi)
                vals.append(-1.0)
            blocks.append(sparse.csc_matrix((vals, (rows, cols)), shape=(dim, n)))
            bs.append(np.zeros(dim))
            cones.append(clarabel.SecondOrderConeT(dim))

        A = sparse.vstack(blocks).tocsc()
        b = np.concatenate(bs)
        P = sparse.csc_matrix((n, n))
        solver = clarabel.DefaultSolver(P, c, A, b, cones, self._settings())
        res = solver.solve()
        status_name = str(res.status)

        x = np.asarray(res.x) if res.x is not None else None
        z = np.asarray(res.z) if res.z is not None else None
        y_eq = None
        if z is not None and m_eq:
            # Standard-form equality duals: A'y + s = c, so y = -z (scaled back).
            y_eq = -z[:m_eq] * scale
        elif z is not None:
            y_eq = np.zeros(0)

        if status_name in ("Solved", "AlmostSolved"):
            assert x is not None
            resid = primal_residuals(prog, x)
            gap = abs(res.obj_val - res.obj_val_dual) / (1.0 + abs(res.obj_val))
            resid["gap"] = gap
            resid["dual"] = float(res.r_dual)
            status = (
                SolveStatus.OPTIMAL
                if status_name == "Solved" and max(resid.values()) <= OPTIMAL_RESIDUAL
                else SolveStatus.NUMERICAL_LIMIT
            )
            obj = float(c @ x)
            return ConicSolution(
                status=status,
                x=x,
                y=y_eq,
                objective=obj,
                residuals=resid,
                iterations=res.iterations,
                solve_time=res.solve_time,
                raw_status=status_name,
            )
        if status_name == "PrimalInfeasible":
            cert = -z[:m_eq] * scale if z is not None else None
            return ConicSolution(
                status=SolveStatus.INFEASIBLE,
                x=None,
                y=None,
                objective=None,
                certificate=cert,
                iterations=res.iterations,
                solve_time=res.solve_time,
                raw_status=status_name,
            )
        if status_name == "DualInfeasible":
            return ConicSolution(
                status=SolveStatus.UNBOUNDED,
                x=None,
                y=None,
                objective=None,
                certificate=x,
                iterations=res.iterations,
                solve_time=res.solve_time,
                raw_status=status_name,
            )
        return ConicSolution(
            status=SolveStatus.NUMERICAL_LIMIT,
            x=x,
            y=y_eq,
            objective=float(c @ x) if x is not None else None,
            residuals=primal_residuals(prog, x) if x is not None else {},
            iterations=res.iterations,
            solve_time=res.solve_time,
            raw_status=status_name,
        )


_BACKENDS = {"clarabel": ClarabelBackend}


def get_backend(name: str = "clarabel", **kwargs) -> ConicBackend:
    try:
        return _BACKENDS[name](**kwargs)
    except KeyError:
        raise KeyError(f"unknown backend {name!r}; available: {sorted(_BACKENDS)}")
