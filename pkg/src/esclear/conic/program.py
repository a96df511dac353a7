"""Standard-form conic program container and the solver backend contract.

A program is  min c'x  s.t.  A x = b,  x in K,  where K partitions the
variables into free scalars, nonnegative scalars, and rotated second-order
cone blocks (u, v, z...) with 2 u v >= ||z||^2, u, v >= 0.  Backends adapt
this form to a concrete solver and must honor the residual and certificate
guarantees of :class:`ConicSolution`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

#: Residual ceiling for a solution to be declared Optimal.
OPTIMAL_RESIDUAL = 1e-8


class VarKind(enum.Enum):
    FREE = "free"
    NONNEG = "nonneg"
    RSOC = "rsoc"


class SolveStatus(enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    NUMERICAL_LIMIT = "NumericalLimit"


class ConeProgram:
    """Incrementally built conic program; freeze happens implicitly when
    the matrices are first materialized."""

    def __init__(self):
        self.var_names: list[str] = []
        self.var_kinds: list[VarKind] = []
        self.rsoc_blocks: list[tuple[int, ...]] = []
        self.rows: list[dict[int, float]] = []
        self.rhs: list[float] = []
        self.row_names: list[str] = []
        self.obj: dict[int, float] = {}
        self._cache = None

    # -- variables ----------------------------------------------------------

    def _new_var(self, name: str, kind: VarKind) -> int:
        self.var_names.append(name)
        self.var_kinds.append(kind)
        self._cache = None
        return len(self.var_names) - 1

    def add_free(self, name: str) -> int:
        return self._new_var(name, VarKind.FREE)

    def add_nonneg(self, name: str) -> int:
        return self._new_var(name, VarKind.NONNEG)

    def add_rsoc(self, u_name: str, v_name: str, z_names: list[str]) -> tuple[int, ...]:
        """New block (u, v, z...) constrained by 2 u v >= ||z||^2."""
        idx = tuple(
            self._new_var(nm, VarKind.RSOC) for nm in (u_name, v_name, *z_names)
        )
        self.rsoc_blocks.append(idx)
        return idx

    # -- rows and objective --------------------------------------------------

    def add_eq(self, coeffs: dict[int, float], rhs: float, name: str = "") -> int:
        self.rows.append(dict(coeffs))
        self.rhs.append(float(rhs))
        self.row_names.append(name)
        self._cache = None
        return len(self.rows) - 1

    def add_obj(self, idx: int, coef: float) -> None:
        self.obj[idx] = self.obj.get(idx, 0.0) + coef
        self._cache = None

    # -- views ----------------------------------------------------------------

    @property
    def num_vars(self) -> int:
        return len(self.var_names)

    @property
    def num_rows(self) -> int:
        return len(self.rows)

    def nonneg_indices(self) -> np.ndarray:
        return np.array(
            [i for i, k in enumerate(self.var_kinds) if k is VarKind.NONNEG], dtype=int
        )

    def free_indices(self) -> np.ndarray:
        return np.array(
            [i for i, k in enumerate(self.var_kinds) if k is VarKind.FREE], dtype=int
        )

    def matrices(self):
        """(c, A, b) with A in CSC form; cached."""
        if self._cache is None:
            n = self.num_vars
            c = np.zeros(n)
            for i, coef in self.obj.items():
                c[i] = coef
            rows_idx = []
            cols_idx = []
            vals = []
            for r, coeffs in enumerate(self.rows):
                for i, coef in coeffs.items():
                    rows_idx.append(r)
                    cols_idx.append(i)
                    vals.append(coef)
            A = sparse.csc_matrix(
                (vals, (rows_idx, cols_idx)), shape=(self.num_rows, n)
            )
            b = np.array(self.rhs)
            self._cache = (c, A, b)
        return self._cache

    def to_debug_dict(self) -> dict:
        """Structured dump (objective, triplet equality matrix, cone
        partition) for external-solver cross-checks."""
        c, A, b = self.matrices()
        coo = A.tocoo()
        return {
            "num_vars": self.num_vars,
            "var_names": list(self.var_names),
            "objective": {self.var_names[i]: v for i, v in sorted(self.obj.items())},
            "equalities": {
                "rows": coo.row.tolist(),
                "cols": coo.col.tolist(),
                "vals": coo.data.tolist(),
                "rhs": b.tolist(),
                "names": list(self.row_names),
            },
            "cones": {
                "free": [self.var_names[i] for i in self.free_indices()],
                "nonneg": [self.var_names[i] for i in self.nonneg_indices()],
                "rsoc": [[self.var_names[i] for i in blk] for blk in self.rsoc_blocks],
            },
        }

    def equality_rank_deficiency(self) -> int:
        """Rows minus numerical rank; diagnostic for small programs only."""
        _, A, _ = self.matrices()
        dense = A.toarray()
        return A.shape[0] - int(np.linalg.matrix_rank(dense))

    def freeze(self) -> "FrozenProgram":
        c, A, b = self.matrices()
        return FrozenProgram(
            c=c,
            A=A,
            b=b,
            _free=self.free_indices(),
            _nonneg=self.nonneg_indices(),
            rsoc_blocks=list(self.rsoc_blocks),
        )


@dataclass
class FrozenProgram:
    """Immutable matrix view of a ConeProgram; cheap to pin and to ship
    across worker processes."""

    c: np.ndarray
    A: sparse.csc_matrix
    b: np.ndarray
    _free: np.ndarray
    _nonneg: np.ndarray
    rsoc_blocks: list[tuple[int, ...]]

    @property
    def num_vars(self) -> int:
        return self.c.shape[0]

    @property
    def num_rows(self) -> int:
        return self.A.shape[0]

    def matrices(self):
        return self.c, self.A, self.b

    def nonneg_indices(self) -> np.ndarray:
        return self._nonneg

    def free_indices(self) -> np.ndarray:
        return self._free

    def pinned(self, zero_vars: list[int]) -> "FrozenProgram":
        """Program with extra rows fixing the given variables to zero."""
        if not zero_vars:
            return self
        E = sparse.csc_matrix(
            (np.ones(len(zero_vars)), (np.arange(len(zero_vars)), zero_vars)),
            shape=(len(zero_vars), self.num_vars),
        )
        return FrozenProgram(
            c=self.c,
            A=sparse.vstack([self.A, E]).tocsc(),
            b=np.concatenate([self.b, np.zeros(len(zero_vars))]),
            _free=self._free,
            _nonneg=self._nonneg,
            rsoc_blocks=self.rsoc_blocks,
        )


@dataclass
class ConicSolution:
    status: SolveStatus
    x: np.ndarray | None
    y: np.ndarray | None  # duals of the equality rows (standard-form sign)
    objective: float | None
    residuals: dict[str, float] = field(default_factory=dict)
    certificate: np.ndarray | None = None
    iterations: int = 0
    solve_time: float = 0.0
    raw_status: str = ""

    @property
    def max_residual(self) -> float:
        return max(self.residuals.values(), default=float("nan"))


def primal_residuals(prog: ConeProgram, x: np.ndarray) -> dict[str, float]:
    """Equality and cone violations of a candidate point, relative scale."""
    c, A, b = prog.matrices()
    eq = float(np.max(np.abs(A @ x - b), initial=0.0)) / (1.0 + float(np.max(np.abs(b), initial=0.0)))
    cone = 0.0
    nn = prog.nonneg_indices()
    if nn.size:
        cone = max(cone, float(np.max(-x[nn], initial=0.0)))
    for blk in prog.rsoc_blocks:
        u, v = x[blk[0]], x[blk[1]]
        z = x[list(blk[2:])]
        znorm2 = float(z @ z)
        cone = max(cone, -u, -v, (znorm2 - 2.0 * u * v) / (1.0 + znorm2))
    scale = 1.0 + float(np.max(np.abs(x), initial=0.0))
    return {"primal_eq": eq, "cone": cone / scale if cone > 0 else 0.0}


def verify_infeasibility_certificate(
    prog: ConeProgram, y: np.ndarray, tol: float = 1e-6
) -> bool:
    """Farkas-type check: b'y > 0 and -A'y in the dual cone."""
    _, A, b = prog.matrices()
    norm = float(np.max(np.abs(y), initial=0.0))
    if norm == 0.0:
        return False
    y = y / norm
    if float(b @ y) <= tol * (1.0 + float(np.max(np.abs(b), initial=0.0))):
        return False
    s = -(A.T @ y)
    fr = prog.free_indices()
    if fr.size and float(np.max(np.abs(s[fr]), initial=0.0)) > tol:
        return False
    nn = prog.nonneg_indices()
    if nn.size and float(np.min(s[nn], initial=0.0)) < -tol:
        return False
    for blk in prog.rsoc_blocks:
        u, v = s[blk[0]], s[blk[1]]
        z = s[list(blk[2:])]
        if u < -tol or v < -tol:
            return False
        if float(z @ z) > 2.0 * max(u, 0.0) * max(v, 0.0) + tol:
            return False
    return True


def verify_unboundedness_certificate(
    prog: ConeProgram, ray: np.ndarray, tol: float = 1e-6
) -> bool:
    """Improving-ray check: A ray ~ 0, ray in K, c'ray < 0."""
    c, A, _ = prog.matrices()
    norm = float(np.max(np.abs(ray), initial=0.0))
    if norm == 0.0:
        return False
    ray = ray / norm
    if float(np.max(np.abs(A @ ray), initial=0.0)) > tol:
        return False
    nn = prog.nonneg_indices()
    if nn.size and float(np.min(ray[nn], initial=0.0)) < -tol:
        return False
    for blk in prog.rsoc_blocks:
        u, v = ray[blk[0]], ray[blk[1]]
        z = ray[list(blk[2:])]
        if u < -tol or v < -tol or float(z @ z) > 2.0 * max(u, 0.0) * max(v, 0.0) + tol:
            return False
    return float(c @ ray) < -tol


class ConicBackend:
    """Contract every backend must honor.

    solve() is deterministic for fixed inputs and settings, returns
    Optimal only when the iterate's residuals are within
    OPTIMAL_RESIDUAL, and attaches a certificate vector on Infeasible /
    Unbounded outcomes.
    """

    name = "abstract"

    def solve(self, prog: ConeProgram) -> ConicSolution:  # pragma: no cover
        raise NotImplementedError
