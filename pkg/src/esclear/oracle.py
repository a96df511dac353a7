"""Independent exact solver for the lower-layer sharing subproblem.

Enumerates all 4^n KKT mode assignments, solves the implied scalar linear
equation for the aggregate sharing energy, and keeps the assignment whose
primal bounds and multiplier signs all hold.  This is the ground truth the
best-response construction is tested against and the verification step of
the end-to-end clearing; it deliberately shares no code with the sweep.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .bestresp import Mode
from .errors import CapExceeded, NoValidAssignment
from .model import LesmSpec, ProsumerParams

#: Largest market enumerated exhaustively (4^8 = 65,536 assignments).
ENUMERATION_CAP = 8
#: Absolute tolerance on every sign/bound validity condition.
VALIDITY_ATOL = 1e-9

_MODES = (Mode.M1, Mode.M2, Mode.M3, Mode.M4)


@dataclass(frozen=True)
class ProsumerSolution:
    x: float
    p: float
    p_plus: float
    p_minus: float
    mode: Mode


@dataclass(frozen=True)
class LesmSolution:
    per_prosumer: tuple[ProsumerSolution, ...]
    X: float
    P: float
    w: float


@dataclass(frozen=True)
class VerificationRecord:
    node_id: int | None
    passed: bool
    x_residual: float
    p_residual: float
    tol: float
    method: str


class _Enumeration:
    """Per-market tables: every mode assignment's aggregate equation is
    affine in w0, so X = (slope*w0 + const)/denom per assignment."""

    def __init__(self, lesm: LesmSpec):
        n = lesm.n
        if n > ENUMERATION_CAP:
            raise CapExceeded(f"{n} prosumers exceeds enumeration cap {ENUMERATION_CAP}")
        self.lesm = lesm
        a = lesm.a
        c = np.array([p.c for p in lesm.prosumers])
        b = np.array([p.b for p in lesm.prosumers])
        d = np.array([p.d for p in lesm.prosumers])
        pmax = np.array([p.p_max for p in lesm.prosumers])
        self.c, self.b, self.d, self.pmax = c, b, d, pmax
        self.alpha = (lesm.w_minus - b) / c - d
        self.beta = (lesm.w_plus - b) / c - d
        self.gamma = pmax - d
        self.p_buy = np.minimum(pmax, (lesm.w_plus - b) / c)
        self.p_sell = np.minimum(pmax, (lesm.w_minus - b) / c)

        codes = np.indices((4,) * n).reshape(n, -1).T.astype(np.int8)  # lexicographic
        self.codes = codes
        m1 = codes == 0
        m2 = codes == 1
        m3 = codes == 2
        m4 = codes == 3
        inv_ca = 1.0 / (c + a)
        n23 = (m2 | m3).sum(axis=1)
        self.denom = 1.0 + a * (m1 * inv_ca).sum(axis=1) + n23
        self.slope = (m1 * inv_ca).sum(axis=1) + n23 / a
        self.const = (
            (m1 * (-(b + c * d) * inv_ca)).sum(axis=1)
            - m2.sum(axis=1) * lesm.w_plus / a
            - m3.sum(axis=1) * lesm.w_minus / a
            + (m4 * self.gamma).sum(axis=1)
        )
        self._m1, self._m2, self._m3, self._m4 = m1, m2, m3, m4
        self._inv_ca = inv_ca

    def shared_energy(self, w0: float) -> np.ndarray:
        """x_m for every assignment at base price w0, shape (4^n, n)."""
        lesm = self.lesm
        a = lesm.a
        X = ((self.slope * w0 + self.const) / self.denom)[:, None]
        x = np.where(self._m1, (w0 - self.b - self.c * self.d - a * X) * self._inv_ca, 0.0)
        x = np.where(self._m2, (w0 - lesm.w_plus) / a - X, x)
        x = np.where(self._m3, (w0 - lesm.w_minus) / a - X, x)
        x = np.where(self._m4, self.gamma, x)
        return x

    def validity(self, w0: float, x: np.ndarray) -> np.ndarray:
        lesm = self.lesm
        a = lesm.a
        tol = VALIDITY_ATOL
        X = x.sum(axis=1, keepdims=True)
        ok1 = (x >= self.alpha - tol) & (x <= self.beta + tol) & (x <= self.gamma + tol)
        ok2 = self.d + x - self.p_buy >= -tol
        ok3 = self.p_sell - self.d - x >= -tol
        lam = w0 - a * (x + X)
        lam_lo = np.maximum(lesm.w_minus, self.c * self.pmax + self.b)
        ok4 = (lam >= lam_lo - tol) & (lam <= lesm.w_plus + tol)
        ok = np.where(self._m1, ok1, True)
        ok = np.where(self._m2, ok2, ok)
        ok = np.where(self._m3, ok3, ok)
        ok = np.where(self._m4, ok4, ok)
        return ok.all(axis=1)


@lru_cache(maxsize=16)
def _enumeration(lesm: LesmSpec) -> _Enumeration:
    return _Enumeration(lesm)


def _modes_from_codes(codes: np.ndarray) -> tuple[Mode, ...]:
    return tuple(_MODES[int(k)] for k in codes)


def solve_assignment(lesm: LesmSpec, w0: float, modes: tuple[Mode, ...]) -> LesmSolution:
    """Solve the stationarity system for one fixed mode assignment.

    Does not check validity; used to reconstruct the allocation once the
    active segment (hence the assignment) is already known.
    """
    a = lesm.a
    denom = 1.0
    rhs = 0.0
    for p, st in zip(lesm.prosumers, modes):
        if st is Mode.M1:
            inv = 1.0 / (p.c + a)
            denom += a * inv
            rhs += (w0 - p.b - p.c * p.d) * inv
        elif st is Mode.M2:
            denom += 1.0
            rhs += (w0 - lesm.w_plus) / a
        elif st is Mode.M3:
            denom += 1.0
            rhs += (w0 - lesm.w_minus) / a
        else:
            rhs += p.p_max - p.d
    X = rhs / denom

    sols = []
    for p, st in zip(lesm.prosumers, modes):
        if st is Mode.M1:
            x = (w0 - p.b - p.c * p.d - a * X) / (p.c + a)
            gen = p.d + x
            plus = minus = 0.0
        elif st is Mode.M2:
            x = (w0 - lesm.w_plus) / a - X
            gen = min(p.p_max, (lesm.w_plus - p.b) / p.c)
            plus, minus = max(p.d + x - gen, 0.0), 0.0
        elif st is Mode.M3:
            x = (w0 - lesm.w_minus) / a - X
            gen = min(p.p_max, (lesm.w_minus - p.b) / p.c)
            plus, minus = 0.0, max(gen - p.d - x, 0.0)
        else:
            x = p.p_max - p.d
            gen = p.p_max
            plus = minus = 0.0
        sols.append(ProsumerSolution(x=x, p=gen, p_plus=plus, p_minus=minus, mode=st))
    P = sum(s.x + s.p_minus - s.p_plus for s in sols)
    return LesmSolution(per_prosumer=tuple(sols), X=X, P=P, w=w0 - a * X)


def valid_assignments(lesm: LesmSpec, w0: float) -> list[tuple[tuple[Mode, ...], float, float]]:
    """All mode assignments passing validity, with their (X, P) aggregates.

    Exposed for uniqueness/degeneracy checks; `solve_lesm` keeps only the
    lexicographically first one.
    """
    enum = _enumeration(lesm)
    x = enum.shared_energy(w0)
    ok = enum.validity(w0, x)
    out = []
    for idx in np.flatnonzero(ok):
        modes = _modes_from_codes(enum.codes[idx])
        sol = solve_assignment(lesm, w0, modes)
        out.append((modes, sol.X, sol.P))
    return out


def solve_lesm(lesm: LesmSpec, w0: float) -> LesmSolution:
    """Exact subproblem optimum by exhaustive mode enumeration.

    On boundary degeneracy several assignments pass; the lexicographically
    first (M1 < M2 < M3 < M4 per prosumer) is returned, and only the
    aggregates are contract-bearing there.
    """
    enum = _enumeration(lesm)
    x = enum.shared_energy(w0)
    ok = enum.validity(w0, x)
    idx = int(np.argmax(ok))
    if not ok[idx]:
        raise NoValidAssignment(f"no valid mode assignment at w0 = {w0}")
    return solve_assignment(lesm, w0, _modes_from_codes(enum.codes[idx]))


def solve_no_sharing(p: ProsumerParams, w_plus: float, w_minus: float) -> ProsumerSolution:
    """Closed-form individually optimal operation with sharing disabled."""
    p_sell = min(p.p_max, (w_minus - p.b) / p.c)
    p_buy = min(p.p_max, (w_plus - p.b) / p.c)
    gen = min(max(p.d, p_sell), p_buy)
    if gen >= p.d:
        plus, minus = 0.0, gen - p.d
    else:
        plus, minus = p.d - gen, 0.0
    if plus > 0:
        mode = Mode.M2
    elif minus > 0:
        mode = Mode.M3
    elif gen >= p.p_max:
        mode = Mode.M4
    else:
        mode = Mode.M1
    return ProsumerSolution(x=0.0, p=gen, p_plus=plus, p_minus=minus, mode=mode)


def prosumer_cost(
    s: ProsumerSolution, p: ProsumerParams, w_plus: float, w_minus: float, w: float
) -> float:
    """Generation cost plus trading fees at realized sharing price w."""
    return (
        0.5 * p.c * s.p * s.p
        + p.b * s.p
        + w_plus * s.p_plus
        - w_minus * s.p_minus
        - w * s.x
    )


def convex_objective(lesm: LesmSpec, w0: float, sols: tuple[ProsumerSolution, ...]) -> float:
    """Value of the convexified subproblem objective at a feasible point."""
    a = lesm.a
    total = 0.0
    X = 0.0
    for p, s in zip(lesm.prosumers, sols):
        total += (
            0.5 * p.c * s.p * s.p
            + p.b * s.p
            + lesm.w_plus * s.p_plus
            - lesm.w_minus * s.p_minus
            - w0 * s.x
            + 0.5 * a * s.x * s.x
        )
        X += s.x
    return total + 0.5 * a * X * X


def verify_aggregates(
    lesm: LesmSpec,
    w0_star: float,
    x_star: float,
    p_star: float,
    tol: float = 1e-6,
    node_id: int | None = None,
) -> VerificationRecord:
    """Re-solve the subproblem at w0_star and compare aggregates."""
    sol = solve_lesm(lesm, w0_star)
    rx = abs(sol.X - x_star)
    rp = abs(sol.P - p_star)
    passed = rx <= tol * (1.0 + abs(x_star)) and rp <= tol * (1.0 + abs(p_star))
    return VerificationRecord(
        node_id=node_id,
        passed=passed,
        x_residual=rx,
        p_residual=rp,
        tol=tol,
        method="oracle",
    )
