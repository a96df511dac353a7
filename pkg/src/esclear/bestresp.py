"""Exact piecewise-linear best responses for one lower-layer market.

Builds the map from base price to uncleared sharing energy, X(w0), by
sweeping mode-transition breakpoints in ascending price order, then derives
the aggregate grid exchange as a function of sharing energy, P(X).  Both
come out as exact polylines: segment coefficients are obtained by summing
per-prosumer stationarity relations, trigger prices by solving the active
segment's affine form against each prosumer's transition level, so no
bisection or region enumeration is involved.
"""

from __future__ import annotations

import bisect
import warnings
from dataclasses import dataclass
from enum import IntEnum

from .errors import (
    DomainTooNarrow,
    InconsistentStates,
    NumericalTieUnresolved,
    OutOfDomain,
    OutOfRange,
)
from .model import LesmSpec, ProsumerParams

#: Relative tolerance for continuity checks at breakpoints.
CONTINUITY_RTOL = 1e-9
#: Minimum relative gap between consecutive breakpoints.
BREAKPOINT_GAP_RTOL = 1e-12
#: Coincident trigger prices within this tolerance share one breakpoint.
TIE_RTOL = 1e-9


class Mode(IntEnum):
    """KKT regime of a prosumer on one price segment.

    M1: self-balanced at an interior generation point (no grid trade).
    M2: buying from the grid at w_plus.
    M3: selling to the grid at w_minus.
    M4: generator capacity-saturated, no grid trade.
    """

    M1 = 1
    M2 = 2
    M3 = 3
    M4 = 4


@dataclass(frozen=True)
class AuxParams:
    """Transition levels of the shared energy x: alpha (leave selling),
    beta (start buying), gamma (capacity saturation)."""

    alpha: float
    beta: float
    gamma: float


def aux_params(p: ProsumerParams, w_plus: float, w_minus: float) -> AuxParams:
    return AuxParams(
        alpha=(w_minus - p.b) / p.c - p.d,
        beta=(w_plus - p.b) / p.c - p.d,
        gamma=p.p_max - p.d,
    )


def migration_path(aux: AuxParams) -> tuple[Mode, ...]:
    """Ordered modes a prosumer visits as the base price rises."""
    if aux.gamma > aux.beta:
        return (Mode.M3, Mode.M1, Mode.M2)
    if aux.gamma <= aux.alpha:
        return (Mode.M3, Mode.M4, Mode.M2)
    return (Mode.M3, Mode.M1, Mode.M4, Mode.M2)


@dataclass(frozen=True)
class PiecewiseLinear:
    """Continuous piecewise-affine scalar function on a closed domain.

    ``breakpoints`` are the interior kinks, strictly increasing;
    ``slopes``/``intercepts`` have one entry more than ``breakpoints`` and
    give the affine form on (-inf, t1], [t1, t2], ..., [tK, +inf) clipped
    to [lo, hi].
    """

    breakpoints: tuple[float, ...]
    slopes: tuple[float, ...]
    intercepts: tuple[float, ...]
    lo: float
    hi: float

    def __post_init__(self):
        k = len(self.breakpoints)
        if len(self.slopes) != k + 1 or len(self.intercepts) != k + 1:
            raise ValueError("segment count must be len(breakpoints)+1")
        if self.hi < self.lo:
            raise ValueError("empty domain")
        prev = None
        for t in self.breakpoints:
            if not self.lo <= t <= self.hi:
                raise ValueError(f"breakpoint {t} outside domain [{self.lo}, {self.hi}]")
            if prev is not None and t - prev <= BREAKPOINT_GAP_RTOL * (1.0 + abs(t)):
                raise ValueError(f"breakpoints too close: {prev}, {t}")
            prev = t
        for j, t in enumerate(self.breakpoints):
            left = self.slopes[j] * t + self.intercepts[j]
            right = self.slopes[j + 1] * t + self.intercepts[j + 1]
            if abs(left - right) > CONTINUITY_RTOL * (1.0 + abs(left)):
                raise ValueError(f"discontinuity at breakpoint {t}: {left} vs {right}")

    @property
    def num_segments(self) -> int:
        return len(self.slopes)

    def segment_index(self, t: float) -> int:
        return bisect.bisect_right(self.breakpoints, t)

    def segment_interval(self, j: int) -> tuple[float, float]:
        lo = self.lo if j == 0 else self.breakpoints[j - 1]
        hi = self.hi if j == len(self.breakpoints) else self.breakpoints[j]
        return lo, hi

    def __call__(self, t: float) -> float:
        tol = 1e-9 * (1.0 + abs(t))
        if t < self.lo - tol or t > self.hi + tol:
            raise OutOfDomain(f"{t} outside [{self.lo}, {self.hi}]")
        if t < self.lo or t > self.hi:
            warnings.warn(f"evaluation point {t} clamped to domain", stacklevel=2)
            t = min(max(t, self.lo), self.hi)
        j = self.segment_index(t)
        return self.slopes[j] * t + self.intercepts[j]


def evaluate(f: PiecewiseLinear, t: float) -> float:
    return f(t)


@dataclass(frozen=True)
class BestResponse:
    """Both polylines of one market plus the per-segment mode assignment.

    ``states[j]`` gives each prosumer's Mode on segment j of ``x_of_w0``.
    ``locked`` records whether the sweep ended in the all-M4 state.
    """

    lesm: LesmSpec
    aux: tuple[AuxParams, ...]
    x_of_w0: PiecewiseLinear
    p_of_x: PiecewiseLinear
    states: tuple[tuple[Mode, ...], ...]
    locked: bool


# ---------------------------------------------------------------------------
# X(w0) construction
# ---------------------------------------------------------------------------


def _segment_coeffs(lesm: LesmSpec, states: list[Mode]) -> tuple[float, float]:
    """Affine X = k*w0 + b implied by summing each prosumer's active
    stationarity relation."""
    a = lesm.a
    denom = 1.0
    k_num = 0.0
    b_num = 0.0
    for p, st in zip(lesm.prosumers, states):
        if st is Mode.M1:
            inv = 1.0 / (p.c + a)
            denom += a * inv
            k_num += inv
            b_num -= (p.b + p.c * p.d) * inv
        elif st is Mode.M2:
            denom += 1.0
            k_num += 1.0 / a
            b_num -= lesm.w_plus / a
        elif st is Mode.M3:
            denom += 1.0
            k_num += 1.0 / a
            b_num -= lesm.w_minus / a
        else:  # M4
            b_num += p.p_max - p.d
    return k_num / denom, b_num / denom


def _trigger_price(
    lesm: LesmSpec,
    p: ProsumerParams,
    aux: AuxParams,
    state: Mode,
    succ: Mode | None,
    k: float,
    b: float,
) -> float:
    """Price at which prosumer p leaves `state` on the segment X = k*w0 + b."""
    if succ is None:
        return float("inf")
    a = lesm.a
    if state is Mode.M3:
        level = aux.alpha if succ is Mode.M1 else aux.gamma
        return (level + lesm.w_minus / a + b) / (1.0 / a - k)
    if state is Mode.M1:
        level = aux.beta if succ is Mode.M2 else aux.gamma
        return (level * (p.c + a) + p.b + p.c * p.d + a * b) / (1.0 - a * k)
    if state is Mode.M4:
        # Aggregate-coupled condition: the would-be buying position reaches
        # gamma, i.e. X = (w0 - w_plus)/a - gamma.
        return (aux.gamma + lesm.w_plus / a + b) / (1.0 / a - k)
    return float("inf")


@dataclass(frozen=True)
class _Sweep:
    breakpoints: tuple[float, ...]
    coeffs: tuple[tuple[float, float], ...]
    states: tuple[tuple[Mode, ...], ...]
    locked: bool
    lock_trigger: float  # first M4->M2 price of the locked state (inf if not locked)


def _sweep(lesm: LesmSpec, lock_in: bool = True) -> _Sweep:
    n = lesm.n
    aux = [aux_params(p, lesm.w_plus, lesm.w_minus) for p in lesm.prosumers]
    paths = [migration_path(ax) for ax in aux]
    pos = [0] * n
    states: list[Mode] = [Mode.M3] * n

    k, b = _segment_coeffs(lesm, states)
    breakpoints: list[float] = []
    coeffs: list[tuple[float, float]] = [(k, b)]
    state_log: list[tuple[Mode, ...]] = [tuple(states)]
    prev_bp = -float("inf")
    locked = False
    lock_trigger = float("inf")

    def candidates() -> list[float]:
        return [
            _trigger_price(
                lesm,
                lesm.prosumers[m],
                aux[m],
                states[m],
                paths[m][pos[m] + 1] if pos[m] + 1 < len(paths[m]) else None,
                k,
                b,
            )
            for m in range(n)
        ]

    while True:
        cand = candidates()
        step_tol = BREAKPOINT_GAP_RTOL * (1.0 + abs(prev_bp)) if prev_bp > -float("inf") else 0.0
        viable = [w for w in cand if prev_bp + step_tol < w < float("inf")]
        if not viable:
            break
        bp = min(viable)
        tie_tol = TIE_RTOL * (1.0 + abs(bp))

        x_before = k * bp + b
        rounds = 0
        while True:
            hits = [m for m in range(n) if cand[m] <= bp + tie_tol and cand[m] < float("inf")]
            hits = [m for m in hits if pos[m] + 1 < len(paths[m])]
            if not hits:
                break
            for m in hits:
                pos[m] += 1
                states[m] = paths[m][pos[m]]
            k, b = _segment_coeffs(lesm, states)
            cand = candidates()
            rounds += 1
            if rounds > 4 * n + 4:
                raise NumericalTieUnresolved(f"tie loop stalled at w0 = {bp}")
        x_after = k * bp + b
        if abs(x_after - x_before) > CONTINUITY_RTOL * (1.0 + abs(x_before)):
            raise NumericalTieUnresolved(
                f"aggregate discontinuity {x_before} -> {x_after} at w0 = {bp}"
            )

        breakpoints.append(bp)
        coeffs.append((k, b))
        state_log.append(tuple(states))
        prev_bp = bp

        if lock_in and all(st is Mode.M4 for st in states):
            locked = True
            lock_trigger = min(
                _trigger_price(lesm, lesm.prosumers[m], aux[m], Mode.M4, Mode.M2, k, b)
                for m in range(n)
            )
            break

    return _Sweep(tuple(breakpoints), tuple(coeffs), tuple(state_log), locked, lock_trigger)


def initial_segment(lesm: LesmSpec) -> tuple[float, float, float]:
    """Slope and intercept of the all-M3 segment and its upper trigger price.

    Closed form: X = (w0 - w_minus) * n / (a (1+n)); the segment ends when
    the common shared energy reaches the smallest min(alpha_m, gamma_m).
    """
    n = lesm.n
    a = lesm.a
    slope = n / (a * (1.0 + n))
    intercept = -lesm.w_minus * n / (a * (1.0 + n))
    level = min(
        min(ax.alpha, ax.gamma)
        for ax in (aux_params(p, lesm.w_plus, lesm.w_minus) for p in lesm.prosumers)
    )
    trigger = lesm.w_minus + a * (1.0 + n) * level
    return slope, intercept, trigger


def default_domain(lesm: LesmSpec) -> tuple[float, float]:
    """Compact default price window: one utility spread below the first
    trigger and above the last breakpoint, with the ceiling capped at the
    first post-lock-in M4->M2 trigger so the constructed polyline matches
    the subproblem optimum everywhere on the window."""
    sweep = _sweep(lesm)
    spread = lesm.w_plus - lesm.w_minus
    first_bp = sweep.breakpoints[0]
    last_bp = sweep.breakpoints[-1]
    lo = min(first_bp, lesm.w_minus) - spread
    hi = last_bp + spread
    if sweep.locked:
        hi = min(hi, max(sweep.lock_trigger, last_bp))
    return lo, hi


def build_x_of_w0(
    lesm: LesmSpec,
    domain: tuple[float, float] | None = None,
    lock_in: bool = True,
) -> tuple[PiecewiseLinear, tuple[tuple[Mode, ...], ...]]:
    """Run the breakpoint sweep and clip the polyline to the price window.

    A floor above the first trigger is lowered to the default floor so the
    leftmost segment is always the all-M3 one; a ceiling inside a segment
    truncates it.  With ``lock_in`` disabled the sweep continues past the
    all-saturated state through the buy-to-share transitions until every
    prosumer is grid-buying (used by the local-only clearing, where the
    self-clearing price of a capacity-short market lies in that region).
    """
    sweep = _sweep(lesm, lock_in=lock_in)
    spread = lesm.w_plus - lesm.w_minus
    first_bp = sweep.breakpoints[0]
    last_bp = sweep.breakpoints[-1]
    default_lo = min(first_bp, lesm.w_minus) - spread
    default_hi = last_bp + spread
    if sweep.locked:
        default_hi = min(default_hi, max(sweep.lock_trigger, last_bp))
    if domain is None:
        lo, hi = default_lo, default_hi
    else:
        lo, hi = domain
        if hi <= lo:
            raise DomainTooNarrow(f"price window [{lo}, {hi}] is empty")
        if lo > first_bp:
            lo = default_lo

    keep = [
        j
        for j in range(len(sweep.coeffs))
        if (j == 0 or sweep.breakpoints[j - 1] < hi)
        and (j == len(sweep.breakpoints) or sweep.breakpoints[j] > lo)
    ]
    bps = [sweep.breakpoints[j] for j in keep[:-1]]
    coeffs = [sweep.coeffs[j] for j in keep]
    states = [sweep.states[j] for j in keep]

    # Drop breakpoints that collide with the clipped domain edges.
    while bps and bps[0] <= lo + BREAKPOINT_GAP_RTOL * (1.0 + abs(lo)):
        bps.pop(0)
        coeffs.pop(0)
        states.pop(0)
    while bps and bps[-1] >= hi - BREAKPOINT_GAP_RTOL * (1.0 + abs(hi)):
        bps.pop()
        coeffs.pop()
        states.pop()

    merged_bps: list[float] = []
    merged_coeffs = [coeffs[0]]
    merged_states = [states[0]]
    for t, (kk, bb), st in zip(bps, coeffs[1:], states[1:]):
        pk, pb = merged_coeffs[-1]
        if _same_line(kk, bb, pk, pb) and _same_p_line(lesm, st, kk, bb, merged_states[-1]):
            continue
        merged_bps.append(t)
        merged_coeffs.append((kk, bb))
        merged_states.append(st)

    pwl = PiecewiseLinear(
        breakpoints=tuple(merged_bps),
        slopes=tuple(k for k, _ in merged_coeffs),
        intercepts=tuple(b for _, b in merged_coeffs),
        lo=lo,
        hi=hi,
    )
    return pwl, tuple(merged_states)


# ---------------------------------------------------------------------------
# P(X) construction
# ---------------------------------------------------------------------------

#: Segments with |dX/dw0| below this are treated as price-flat.
FLAT_SLOPE_FLOOR = 1e-14


def _same_line(k1: float, b1: float, k2: float, b2: float) -> bool:
    return abs(k1 - k2) <= 1e-12 * (1.0 + abs(k2)) and abs(b1 - b2) <= 1e-12 * (
        1.0 + abs(b2)
    )


def _same_p_line(
    lesm: LesmSpec,
    st1: tuple[Mode, ...],
    k: float,
    b: float,
    st2: tuple[Mode, ...],
) -> bool:
    """Whether two state tuples induce the same P line on a shared X segment."""
    if st1 == st2:
        return True
    if k <= FLAT_SLOPE_FLOOR:
        return False
    return _same_line(*_p_line(lesm, st1, k, b), *_p_line(lesm, st2, k, b))


def _p_line(
    lesm: LesmSpec, states: tuple[Mode, ...], k: float, b: float
) -> tuple[float, float]:
    """(slope, intercept) of P as a function of X on one sloped segment."""
    a = lesm.a
    k_x = 1.0 / k
    b_x = -b / k
    kp = 0.0
    bp = 0.0
    for p, st in zip(lesm.prosumers, states):
        ax = aux_params(p, lesm.w_plus, lesm.w_minus)
        if st is Mode.M1:
            kp += (k_x - a) / (p.c + a)
            bp += (b_x - p.b - p.c * p.d) / (p.c + a)
        elif st is Mode.M2:
            bp += min(ax.beta, ax.gamma)
        elif st is Mode.M3:
            bp += min(ax.alpha, ax.gamma)
        else:
            bp += ax.gamma
    return kp, bp


def _p_flat_value(lesm: LesmSpec, states: tuple[Mode, ...]) -> float:
    """Aggregate exchange on a price-flat (all-M4) segment."""
    total = 0.0
    for p, st in zip(lesm.prosumers, states):
        if st is not Mode.M4:
            raise InconsistentStates("price-flat segment with a non-M4 prosumer")
        total += p.p_max - p.d
    return total


def build_p_of_x(
    lesm: LesmSpec,
    x_fun: PiecewiseLinear,
    states: tuple[tuple[Mode, ...], ...],
) -> PiecewiseLinear:
    """Derive the P(X) polyline from the segments of X(w0).

    Sloped price segments invert to X-intervals; price-flat segments pin X
    and contribute a single point, which by continuity coincides with the
    neighbouring segment endpoint and is merged away.
    """
    if len(states) != x_fun.num_segments:
        raise InconsistentStates(
            f"{len(states)} state tuples for {x_fun.num_segments} segments"
        )
    pieces: list[tuple[float, float, float, float]] = []  # (X_lo, X_hi, kP, bP)
    for j in range(x_fun.num_segments):
        w_lo, w_hi = x_fun.segment_interval(j)
        k, b = x_fun.slopes[j], x_fun.intercepts[j]
        if k <= FLAT_SLOPE_FLOOR:
            _p_flat_value(lesm, states[j])  # validates the all-M4 claim
            continue
        kp, bp = _p_line(lesm, states[j], k, b)
        pieces.append((k * w_lo + b, k * w_hi + b, kp, bp))

    if not pieces:
        # Entire window is price-flat: P(X) degenerates to one point.
        x_val = x_fun.slopes[0] * x_fun.lo + x_fun.intercepts[0]
        p_val = _p_flat_value(lesm, states[0])
        return PiecewiseLinear((), (0.0,), (p_val,), x_val, x_val)

    bps: list[float] = []
    slopes = [pieces[0][2]]
    intercepts = [pieces[0][3]]
    for x_lo, _x_hi, kk, bb in pieces[1:]:
        if _same_line(kk, bb, slopes[-1], intercepts[-1]):
            continue
        bps.append(x_lo)
        slopes.append(kk)
        intercepts.append(bb)
    return PiecewiseLinear(
        breakpoints=tuple(bps),
        slopes=tuple(slopes),
        intercepts=tuple(intercepts),
        lo=pieces[0][0],
        hi=pieces[-1][1],
    )


def build_best_response(
    lesm: LesmSpec,
    domain: tuple[float, float] | None = None,
    lock_in: bool = True,
) -> BestResponse:
    x_fun, states = build_x_of_w0(lesm, domain, lock_in=lock_in)
    p_fun = build_p_of_x(lesm, x_fun, states)
    sweep_locked = all(st is Mode.M4 for st in states[-1])
    return BestResponse(
        lesm=lesm,
        aux=tuple(aux_params(p, lesm.w_plus, lesm.w_minus) for p in lesm.prosumers),
        x_of_w0=x_fun,
        p_of_x=p_fun,
        states=states,
        locked=sweep_locked,
    )


def invert_price(x_fun: PiecewiseLinear, x_star: float) -> float:
    """Leftmost price with X(w0) = x_star on a nondecreasing polyline."""
    tol = 1e-9 * (1.0 + abs(x_star))
    lo_val = x_fun.slopes[0] * x_fun.lo + x_fun.intercepts[0]
    hi_val = x_fun.slopes[-1] * x_fun.hi + x_fun.intercepts[-1]
    if x_star < lo_val - tol or x_star > hi_val + tol:
        raise OutOfRange(f"{x_star} outside function range [{lo_val}, {hi_val}]")
    x_star = min(max(x_star, lo_val), hi_val)
    for j in range(x_fun.num_segments):
        t_lo, t_hi = x_fun.segment_interval(j)
        k, b = x_fun.slopes[j], x_fun.intercepts[j]
        v_lo = k * t_lo + b
        v_hi = k * t_hi + b
        if x_star > v_hi + tol:
            continue
        if k <= FLAT_SLOPE_FLOOR:
            return t_lo
        return min(max((x_star - b) / k, t_lo), t_hi)
    return x_fun.hi
