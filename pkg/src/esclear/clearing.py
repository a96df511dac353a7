"""Single-level market clearing: best responses embedded into the
branch-flow SOCP, solved by branch and bound, with price recovery and
oracle verification.

The piecewise coupling P = P(X) enters through the vertex convex-combination
encoding: one indicator and two weights per segment, so the continuous
relaxation is exactly the convex hull of the response graph per market.
Branching splits a market's segment range in two around the relaxation's X
value; incumbents come from fixing every market to the segment containing
its relaxed X and re-solving the plain SOCP.
"""

from __future__ import annotations

import bisect
import heapq
import itertools
import pickle
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import multiprocessing
import numpy as np

from . import oracle as oracle_mod
from .bestresp import (
    BestResponse,
    Mode,
    build_best_response,
    build_x_of_w0,
    invert_price,
)
from .conic.assemble import SocpModel, TightnessReport, assemble_socp, check_tightness
from .conic.backends import get_backend
from .conic.program import FrozenProgram, SolveStatus
from .errors import (
    EmptyDomain,
    NodeLimit,
    NoIncumbent,
    VerificationFailed,
    ZeroUnreachable,
)
from .model import LesmSpec, NetworkCase, ValidatedCase, to_per_unit, validate_case
from .oracle import LesmSolution, VerificationRecord

NVC_V_LIMITS = (0.5, 1.5)  # physically absurd-but-bounded band for GS-NVC


# ---------------------------------------------------------------------------
# Piecewise-linear embedding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PwlSegment:
    x_lo: float
    p_lo: float
    x_hi: float
    p_hi: float


@dataclass(frozen=True)
class PwlEmbedding:
    node_id: int
    segments: tuple[PwlSegment, ...]

    @property
    def x_range(self) -> tuple[float, float]:
        return self.segments[0].x_lo, self.segments[-1].x_hi

    @property
    def p_range(self) -> tuple[float, float]:
        los = [min(s.p_lo, s.p_hi) for s in self.segments]
        his = [max(s.p_lo, s.p_hi) for s in self.segments]
        return min(los), max(his)

    def segment_of(self, x: float) -> int:
        """Index of the segment containing x (leftmost on ties)."""
        xs = [s.x_lo for s in self.segments]
        j = bisect.bisect_right(xs, x) - 1
        return min(max(j, 0), len(self.segments) - 1)


def embed_pwl(br: BestResponse, domain: tuple[float, float] | None = None) -> PwlEmbedding:
    """Vertex list of the best-response graph on the (possibly truncated)
    sharing-energy domain; zero-width pieces merge into their neighbors."""
    g = br.p_of_x
    lo, hi = g.lo, g.hi
    if domain is not None:
        lo, hi = max(lo, domain[0]), min(hi, domain[1])
        if hi < lo:
            raise EmptyDomain(f"truncated domain [{lo}, {hi}] is empty")
    segs: list[PwlSegment] = []
    if hi <= lo:
        p = g(lo)
        return PwlEmbedding(br.lesm.node_id, (PwlSegment(lo, p, lo, p),))
    for j in range(g.num_segments):
        s_lo, s_hi = g.segment_interval(j)
        a, b = max(s_lo, lo), min(s_hi, hi)
        if b - a <= 1e-12 * (1.0 + abs(a)):
            continue
        k, c = g.slopes[j], g.intercepts[j]
        segs.append(PwlSegment(a, k * a + c, b, k * b + c))
    if not segs:
        p = g(lo)
        segs = [PwlSegment(lo, p, hi, p)]
    return PwlEmbedding(br.lesm.node_id, tuple(segs))


@dataclass
class MisocpModel:
    socp: SocpModel
    embeddings: list[PwlEmbedding]
    x_var: dict[int, int]                 # node -> sharing energy variable
    y_vars: dict[int, list[int]]          # node -> segment indicators
    frozen: FrozenProgram = None


def attach_embeddings(model: SocpModel, embeddings: list[PwlEmbedding]) -> MisocpModel:
    """Add the convex-combination rows and the zero-sum sharing balance."""
    prog = model.program
    x_var: dict[int, int] = {}
    y_vars: dict[int, list[int]] = {}
    sum_x: dict[int, float] = {}
    for emb in embeddings:
        nid = emb.node_id
        xi = prog.add_free(f"X[{nid}]")
        x_var[nid] = xi
        sum_x[xi] = 1.0
        ys: list[int] = []
        row_x = {xi: -1.0}
        row_p = {model.vars.inj[nid]: -1.0}
        for s, seg in enumerate(emb.segments):
            y = prog.add_nonneg(f"y[{nid},{s}]")
            w_lo = prog.add_nonneg(f"lam_lo[{nid},{s}]")
            w_hi = prog.add_nonneg(f"lam_hi[{nid},{s}]")
            ys.append(y)
            prog.add_eq({w_lo: 1.0, w_hi: 1.0, y: -1.0}, 0.0, f"lam_sum[{nid},{s}]")
            row_x[w_lo] = seg.x_lo
            row_x[w_hi] = seg.x_hi
            row_p[w_lo] = seg.p_lo
            row_p[w_hi] = seg.p_hi
        prog.add_eq({y: 1.0 for y in ys}, 1.0, f"segment_choice[{nid}]")
        prog.add_eq(row_x, 0.0, f"x_link[{nid}]")
        prog.add_eq(row_p, 0.0, f"p_link[{nid}]")
        y_vars[nid] = ys
    if sum_x:
        prog.add_eq(sum_x, 0.0, "sharing_balance")
    return MisocpModel(
        socp=model,
        embeddings=embeddings,
        x_var=x_var,
        y_vars=y_vars,
        frozen=prog.freeze(),
    )


# ---------------------------------------------------------------------------
# Branch and bound
# ---------------------------------------------------------------------------

INTEGRALITY_TOL = 1e-7

_WORKER: dict = {}


def _worker_init(payload: bytes) -> None:
    frozen, backend_name, backend_kwargs = pickle.loads(payload)
    _WORKER["frozen"] = frozen
    _WORKER["backend"] = get_backend(backend_name, **backend_kwargs)


def _worker_solve(pins: tuple[int, ...]):
    sol = _WORKER["backend"].solve(_WORKER["frozen"].pinned(list(pins)))
    return sol.status, sol.objective, sol.x


@dataclass
class BnbOutcome:
    x: np.ndarray
    objective: float
    bound: float
    gap_abs: float
    gap_rel: float
    nodes: int
    status: str                       # "optimal" or "node_limit"
    fixing: dict[int, int]            # node -> chosen segment


@dataclass(order=True)
class _Node:
    bound: float
    seq: int
    ranges: dict[int, tuple[int, int]] = field(compare=False)


class _Pool:
    """Sequential fallback or a bulk-synchronous process pool."""

    def __init__(self, mmodel: MisocpModel, backend_name: str, backend_kwargs: dict, workers: int):
        self.workers = max(1, workers)
        self.frozen = mmodel.frozen
        self.backend = get_backend(backend_name, **backend_kwargs)
        self._pool = None
        if self.workers > 1:
            payload = pickle.dumps((self.frozen, backend_name, backend_kwargs))
            ctx = multiprocessing.get_context("fork")
            self._pool = ProcessPoolExecutor(
                max_workers=self.workers,
                mp_context=ctx,
                initializer=_worker_init,
                initargs=(payload,),
            )

    def solve_many(self, pin_sets: list[tuple[int, ...]]):
        if self._pool is None or len(pin_sets) == 1:
            out = []
            for pins in pin_sets:
                sol = self.backend.solve(self.frozen.pinned(list(pins)))
                out.append((sol.status, sol.objective, sol.x))
            return out
        return list(self._pool.map(_worker_solve, pin_sets))

    def solve_root(self):
        sol = self.backend.solve(self.frozen)
        return sol

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()


def _pins_for(mmodel: MisocpModel, ranges: dict[int, tuple[int, int]]) -> tuple[int, ...]:
    pins: list[int] = []
    for nid, ys in mmodel.y_vars.items():
        lo, hi = ranges.get(nid, (0, len(ys) - 1))
        pins.extend(ys[:lo])
        pins.extend(ys[hi + 1 :])
    return tuple(pins)


def _pins_for_fixing(mmodel: MisocpModel, fixing: dict[int, int]) -> tuple[int, ...]:
    pins: list[int] = []
    for nid, ys in mmodel.y_vars.items():
        s = fixing[nid]
        pins.extend(ys[:s])
        pins.extend(ys[s + 1 :])
    return tuple(pins)


def _fractionality(mmodel: MisocpModel, x: np.ndarray, ranges) -> dict[int, float]:
    out = {}
    for nid, ys in mmodel.y_vars.items():
        lo, hi = ranges.get(nid, (0, len(ys) - 1))
        ymax = max(x[ys[s]] for s in range(lo, hi + 1))
        out[nid] = 1.0 - float(ymax)
    return out


def _rounded_fixing(mmodel: MisocpModel, x: np.ndarray, ranges) -> dict[int, int]:
    fixing = {}
    for emb in mmodel.embeddings:
        nid = emb.node_id
        lo, hi = ranges.get(nid, (0, len(emb.segments) - 1))
        s = emb.segment_of(float(x[mmodel.x_var[nid]]))
        fixing[nid] = min(max(s, lo), hi)
    return fixing


def branch_and_bound(
    mmodel: MisocpModel,
    backend_name: str = "clarabel",
    backend_kwargs: dict | None = None,
    gap_tol: float = 1e-6,
    node_limit: int = 5000,
    workers: int = 1,
) -> BnbOutcome:
    """Best-bound search over per-market segment ranges.

    Returns the incumbent with its certified gap; raises NoIncumbent when
    the root is infeasible or no segment fixing is feasible, and NodeLimit
    when the node budget runs out with no incumbent found.
    """
    backend_kwargs = backend_kwargs or {}
    pool = _Pool(mmodel, backend_name, backend_kwargs, workers)
    try:
        return _bnb_loop(mmodel, pool, gap_tol, node_limit)
    finally:
        pool.close()


def _bnb_loop(mmodel: MisocpModel, pool: _Pool, gap_tol: float, node_limit: int) -> BnbOutcome:
    root_sol = pool.solve_root()
    if root_sol.status is SolveStatus.INFEASIBLE:
        raise NoIncumbent("root relaxation infeasible (certificate attached)")
    if root_sol.status is SolveStatus.UNBOUNDED:
        raise NoIncumbent("root relaxation unbounded")
    if root_sol.x is None:
        raise NoIncumbent(f"root relaxation failed: {root_sol.raw_status}")

    ub = float("inf")
    incumbent: np.ndarray | None = None
    incumbent_fixing: dict[int, int] | None = None
    tried_fixings: set[tuple] = set()
    seq = itertools.count()
    nodes_done = 1

    root_ranges: dict[int, tuple[int, int]] = {
        e.node_id: (0, len(e.segments) - 1) for e in mmodel.embeddings
    }
    heap: list[_Node] = []

    def gap_pair():
        # Guarded relative gap (denominator 1+|UB|) so the threshold stays
        # meaningful for near-zero loss objectives.
        lb = min([n.bound for n in heap], default=ub)
        lb = min(lb, ub)
        ga = max(ub - lb, 0.0)
        return ga, ga / (1.0 + abs(ub))

    def try_fixings(fixings: list[dict[int, int]]):
        nonlocal ub, incumbent, incumbent_fixing, nodes_done
        todo = []
        for fx in fixings:
            key = tuple(sorted(fx.items()))
            if key in tried_fixings:
                continue
            tried_fixings.add(key)
            todo.append(fx)
        if not todo:
            return
        results = pool.solve_many([_pins_for_fixing(mmodel, fx) for fx in todo])
        nodes_done += len(todo)
        for fx, (status, obj, x) in zip(todo, results):
            if status is SolveStatus.OPTIMAL and obj < ub:
                ub = obj
                incumbent = x
                incumbent_fixing = fx

    # Root node processing.
    root_bound = root_sol.objective if root_sol.status is SolveStatus.OPTIMAL else -float("inf")
    pending = [(_Node(root_bound, next(seq), root_ranges), root_sol)]
    while True:
        for node, sol in pending:
            if sol.status is SolveStatus.INFEASIBLE:
                continue
            if sol.x is None:
                continue  # numerical failure: drop the node, keep soundness via others
            # A non-converged relaxation value is not a certified bound.
            bound = (
                max(sol.objective, node.bound)
                if sol.status is SolveStatus.OPTIMAL
                else node.bound
            )
            if bound >= ub - 1e-12 * max(1.0, abs(ub)):
                continue
            frac = _fractionality(mmodel, sol.x, node.ranges)
            worst = max(frac.values(), default=0.0)
            fixing = _rounded_fixing(mmodel, sol.x, node.ranges)
            try_fixings([fixing])
            if worst <= INTEGRALITY_TOL:
                continue  # relaxation already integral: fixing above is exact
            nid = max(frac, key=lambda k: (frac[k], -k))
            lo, hi = node.ranges[nid]
            split = min(max(fixing[nid], lo), hi - 1)
            for rng in ((lo, split), (split + 1, hi)):
                child = dict(node.ranges)
                child[nid] = rng
                heapq.heappush(heap, _Node(bound, next(seq), child))
        pending = []

        ga, gr = gap_pair()
        if incumbent is not None and gr <= gap_tol:
            break
        if not heap:
            break
        if nodes_done >= node_limit:
            if incumbent is None:
                raise NodeLimit(f"node limit {node_limit} reached with no incumbent")
            break

        batch: list[_Node] = []
        while heap and len(batch) < pool.workers:
            node = heapq.heappop(heap)
            if node.bound >= ub - 1e-12 * max(1.0, abs(ub)):
                continue
            batch.append(node)
        if not batch:
            continue
        results = pool.solve_many([_pins_for(mmodel, n.ranges) for n in batch])
        nodes_done += len(batch)
        pending = [
            (node, _SolWrap(status, obj, x))
            for node, (status, obj, x) in zip(batch, results)
        ]

    if incumbent is None:
        raise NoIncumbent("no segment fixing produced a feasible schedule")
    ga, gr = gap_pair()
    return BnbOutcome(
        x=incumbent,
        objective=ub,
        bound=ub - ga,
        gap_abs=ga,
        gap_rel=gr,
        nodes=nodes_done,
        status="optimal" if gr <= gap_tol else "node_limit",
        fixing=dict(incumbent_fixing),
    )


@dataclass
class _SolWrap:
    status: SolveStatus
    objective: float | None
    x: np.ndarray | None


# ---------------------------------------------------------------------------
# End-to-end clearing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClearOptions:
    backend: str = "clarabel"
    gap_tol: float = 1e-6
    node_limit: int = 5000
    workers: int = 1
    disable_voltage: bool = False
    strict: bool = False
    verify_tol: float = 1e-6
    tightness_rtol: float = 1e-6
    oracle_cap: int = oracle_mod.ENUMERATION_CAP
    seed: int = 0
    canonical_tiebreak: bool = True


@dataclass
class MarketClearing:
    node_id: int
    w0: float
    w: float
    x: float           # p.u.
    p: float           # p.u.
    segment: int
    verification: VerificationRecord


@dataclass
class ClearingResult:
    markets: list[MarketClearing]
    node_v: dict[int, float]          # squared voltage, p.u.
    node_q: dict[int, float]
    branch_flows: list[dict]
    objective: float                  # network losses, p.u.
    gap_abs: float
    gap_rel: float
    bnb_nodes: int
    bnb_status: str
    tightness: TightnessReport
    kw_base: float
    warnings: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def sum_x(self) -> float:
        return sum(m.x for m in self.markets)

    def to_dict(self) -> dict:
        return {
            "format": "esclear-result-v1",
            "objective_pu": self.objective,
            "gap_abs": self.gap_abs,
            "gap_rel": self.gap_rel,
            "bnb_nodes": self.bnb_nodes,
            "bnb_status": self.bnb_status,
            "sum_x_pu": self.sum_x,
            "markets": [
                {
                    "node": m.node_id,
                    "w0": m.w0,
                    "w": m.w,
                    "x_kw": m.x * self.kw_base,
                    "p_kw": m.p * self.kw_base,
                    "segment": m.segment,
                    "verification": {
                        "passed": m.verification.passed,
                        "x_residual": m.verification.x_residual,
                        "p_residual": m.verification.p_residual,
                        "tol": m.verification.tol,
                        "method": m.verification.method,
                    },
                }
                for m in sorted(self.markets, key=lambda m: m.node_id)
            ],
            "nodes": [
                {
                    "node": nid,
                    "v_pu_magnitude": float(np.sqrt(v)),
                    "q_pu": self.node_q.get(nid, 0.0),
                }
                for nid, v in sorted(self.node_v.items())
            ],
            "branches": self.branch_flows,
            "tightness": self.tightness.to_dict(),
            "warnings": list(self.warnings),
            "timings": dict(self.timings),
        }


def recover_prices(br: BestResponse, a: float, x_star: float) -> tuple[float, float]:
    w0 = invert_price(br.x_of_w0, x_star)
    return w0, w0 - a * x_star


def _canonicalize(
    pu: ValidatedCase,
    embeddings: list[PwlEmbedding],
    injections: dict,
    v_limits,
    fixing: dict[int, int],
    loss_star: float,
    opts: ClearOptions,
    backend,
) -> tuple[np.ndarray, SocpModel, MisocpModel] | None:
    """Resolve the degenerate sharing directions deterministically.

    At a loss optimum, markets sitting on exchange-flat response pieces can
    trade sharing volume among themselves without moving any flow, so the
    solver's landing point would leak into prices and costs.  Re-solving
    the incumbent fixing with objective  loss + mu * sum(a_i X_i^2)  picks
    the minimum-sharing point of the optimal face; mu is sized so the loss
    excess stays at least an order of magnitude below the gap tolerance.
    """
    lesm_a = {m.node_id: m.a for m in pu.lesms}
    socp = assemble_socp(pu, injections, v_limits=v_limits)
    mmodel = attach_embeddings(socp, embeddings)
    prog = socp.program
    z_names = [f"xw[{e.node_id}]" for e in embeddings]
    blk = prog.add_rsoc("share_norm", "share_half", z_names)
    prog.add_eq({blk[1]: 1.0}, 0.5, "share_half_fix")
    norm_cap = 0.0
    for z_idx, emb in zip(blk[2:], embeddings):
        w = float(np.sqrt(lesm_a[emb.node_id]))
        prog.add_eq({z_idx: 1.0, mmodel.x_var[emb.node_id]: -w}, 0.0, f"xw_def[{emb.node_id}]")
        x_lo, x_hi = emb.x_range
        norm_cap += lesm_a[emb.node_id] * max(abs(x_lo), abs(x_hi)) ** 2
    mu = 0.1 * opts.gap_tol * max(abs(loss_star), 1e-9) / max(norm_cap, 1e-12)
    prog.add_obj(blk[0], mu)
    frozen = prog.freeze()
    sol = backend.solve(frozen.pinned(list(_pins_for_fixing(mmodel, fixing))))
    if sol.status is not SolveStatus.OPTIMAL:
        return None
    return sol.x, socp, mmodel


def _build_responses(lesms, workers: int) -> list[BestResponse]:
    if workers > 1 and len(lesms) > 3:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            return list(pool.map(build_best_response, lesms))
    return [build_best_response(m) for m in lesms]


def _check_prosumer_kkt(
    lesm: LesmSpec, idx: int, mode: Mode, x_m: float, X: float, w0: float, tol: float
) -> bool:
    p = lesm.prosumers[idx]
    a = lesm.a
    alpha = (lesm.w_minus - p.b) / p.c - p.d
    beta = (lesm.w_plus - p.b) / p.c - p.d
    gamma = p.p_max - p.d
    scale = 1.0 + abs(x_m)
    if mode is Mode.M1:
        return (
            x_m >= alpha - tol * scale
            and x_m <= beta + tol * scale
            and x_m <= gamma + tol * scale
        )
    if mode is Mode.M2:
        gen = min(p.p_max, (lesm.w_plus - p.b) / p.c)
        return p.d + x_m - gen >= -tol * scale
    if mode is Mode.M3:
        gen = min(p.p_max, (lesm.w_minus - p.b) / p.c)
        return gen - p.d - x_m >= -tol * scale
    lam = w0 - a * (x_m + X)
    lam_lo = max(lesm.w_minus, p.c * p.p_max + p.b)
    return lam >= lam_lo - tol and lam <= lesm.w_plus + tol


def _verify_market(
    lesm: LesmSpec,
    br: BestResponse,
    w0: float,
    x_star: float,
    p_star: float,
    opts: ClearOptions,
) -> VerificationRecord:
    """Oracle check when the market is small enough to enumerate;
    otherwise the constructed polylines plus a seeded sub-market KKT probe."""
    if lesm.n <= opts.oracle_cap:
        return oracle_mod.verify_aggregates(
            lesm, w0, x_star, p_star, tol=opts.verify_tol, node_id=lesm.node_id
        )
    x_alg = br.x_of_w0(w0)
    g = br.p_of_x
    p_alg = g(min(max(x_alg, g.lo), g.hi))
    rx = abs(x_alg - x_star)
    rp = abs(p_alg - p_star)
    passed = rx <= opts.verify_tol * (1.0 + abs(x_star)) and rp <= opts.verify_tol * (
        1.0 + abs(p_star)
    )
    states = br.states[br.x_of_w0.segment_index(w0)]
    sol = oracle_mod.solve_assignment(lesm, w0, states)
    rng = np.random.RandomState(opts.seed + lesm.node_id)
    sample = rng.choice(lesm.n, size=min(lesm.n, opts.oracle_cap), replace=False)
    for m in sorted(int(i) for i in sample):
        if not _check_prosumer_kkt(
            lesm, m, states[m], sol.per_prosumer[m].x, sol.X, w0, 1e-6
        ):
            passed = False
            break
    return VerificationRecord(
        node_id=lesm.node_id,
        passed=passed,
        x_residual=rx,
        p_residual=rp,
        tol=opts.verify_tol,
        method="bestresp+submarket",
    )


def clear_market(
    case: NetworkCase | ValidatedCase, options: ClearOptions | None = None
) -> ClearingResult:
    """Full clearing pass: responses, embedding, MISOCP, prices, checks."""
    opts = options or ClearOptions()
    vcase = validate_case(case)
    pu = to_per_unit(vcase)
    timings: dict[str, float] = {}
    warnings: list[str] = []

    t0 = time.perf_counter()
    responses = _build_responses(pu.lesms, opts.workers)
    timings["best_response_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    embeddings = [embed_pwl(br) for br in responses]
    injections = {e.node_id: e.p_range for e in embeddings}
    v_limits = None
    if opts.disable_voltage:
        v_limits = {n.id: NVC_V_LIMITS for n in pu.nodes if n.id != pu.slack}
    socp = assemble_socp(pu, injections, v_limits=v_limits)
    mmodel = attach_embeddings(socp, embeddings)
    timings["assemble_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    outcome = branch_and_bound(
        mmodel,
        backend_name=opts.backend,
        gap_tol=opts.gap_tol,
        node_limit=opts.node_limit,
        workers=opts.workers,
    )
    timings["misocp_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    x = outcome.x
    objective = outcome.objective
    if opts.canonical_tiebreak and embeddings:
        canon = _canonicalize(
            pu,
            embeddings,
            injections,
            v_limits,
            outcome.fixing,
            outcome.objective,
            opts,
            get_backend(opts.backend),
        )
        if canon is None:
            warnings.append("canonical tie-break solve failed; reporting raw incumbent")
        else:
            x, socp, mmodel = canon
            objective = sum(
                br.r * float(x[socp.vars.br_l[e]]) for e, br in enumerate(pu.branches)
            )
    timings["canonicalize_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    by_node = {m.node_id: m for m in pu.lesms}
    markets: list[MarketClearing] = []
    for br, emb in zip(responses, embeddings):
        nid = emb.node_id
        lesm = by_node[nid]
        x_star = float(x[mmodel.x_var[nid]])
        p_star = float(x[mmodel.socp.vars.inj[nid]])
        f = br.x_of_w0
        lo_val = f.slopes[0] * f.lo + f.intercepts[0]
        hi_val = f.slopes[-1] * f.hi + f.intercepts[-1]
        w0, w = recover_prices(br, lesm.a, min(max(x_star, lo_val), hi_val))
        markets.append(
            MarketClearing(
                node_id=nid,
                w0=w0,
                w=w,
                x=x_star,
                p=p_star,
                segment=outcome.fixing[nid],
                verification=None,
            )
        )
    timings["price_recovery_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    for mc, br in zip(markets, responses):
        mc.verification = _verify_market(
            by_node[mc.node_id], br, mc.w0, mc.x, mc.p, opts
        )
        if not mc.verification.passed:
            warnings.append(
                f"market {mc.node_id}: verification failed "
                f"(x residual {mc.verification.x_residual:.3e}, "
                f"p residual {mc.verification.p_residual:.3e})"
            )
    timings["verification_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    sol = _SolWrap(SolveStatus.OPTIMAL, objective, x)
    tightness = check_tightness(sol, socp, rtol=opts.tightness_rtol)
    if not tightness.passed:
        warnings.append(
            f"relaxation not tight: max relative residual {tightness.max_rel_residual:.3e}"
        )
    warnings.extend(tightness.warnings)
    timings["tightness_s"] = time.perf_counter() - t0

    sum_x = sum(m.x for m in markets)
    if abs(sum_x) > 1e-6:
        warnings.append(f"sharing balance violated: sum X = {sum_x:.3e}")

    node_v = {nid: float(x[vi]) for nid, vi in socp.vars.v.items()}
    node_v[pu.slack] = 1.0
    node_q = {nid: float(x[qi]) for nid, qi in socp.vars.q.items()}
    node_q[pu.slack] = float(x[socp.vars.slack_q])
    branch_flows = [
        {
            "from": br.parent,
            "to": br.child,
            "p_pu": float(x[socp.vars.br_p[e]]),
            "q_pu": float(x[socp.vars.br_q[e]]),
            "l_pu": float(x[socp.vars.br_l[e]]),
        }
        for e, br in enumerate(pu.branches)
    ]

    result = ClearingResult(
        markets=markets,
        node_v=node_v,
        node_q=node_q,
        branch_flows=branch_flows,
        objective=objective,
        gap_abs=max(outcome.gap_abs, objective - outcome.bound),
        gap_rel=max(outcome.gap_rel, (objective - outcome.bound) / (1.0 + abs(objective))),
        bnb_nodes=outcome.nodes,
        bnb_status=outcome.status,
        tightness=tightness,
        kw_base=pu.kw_base,
        warnings=warnings,
        timings=timings,
    )
    if opts.strict and any(not m.verification.passed for m in markets):
        raise VerificationFailed("; ".join(warnings) or "verification failed")
    return result


# ---------------------------------------------------------------------------
# Local-only clearing and the four market configurations
# ---------------------------------------------------------------------------


def clear_local_only(
    lesm: LesmSpec,
    oracle_cap: int = oracle_mod.ENUMERATION_CAP,
    extend_past_lock_in: bool = False,
) -> tuple[float, LesmSolution]:
    """Price at which the market self-clears (X = 0) and its allocation.

    A capacity-short market (sum of gamma < 0) never reaches X = 0 on the
    locked-in polyline and raises ZeroUnreachable.  With
    ``extend_past_lock_in`` the sweep continues through the buy-to-share
    transitions, where the self-clearing price of such a market lives;
    the four-configuration comparison enables this so local sharing is
    well defined on every market.
    """
    br = build_best_response(lesm)
    f = br.x_of_w0
    lo_val = f.slopes[0] * f.lo + f.intercepts[0]
    hi_val = f.slopes[-1] * f.hi + f.intercepts[-1]
    if not lo_val - 1e-12 <= 0.0 <= hi_val + 1e-12:
        if not extend_past_lock_in:
            raise ZeroUnreachable(
                f"market at node {lesm.node_id}: X range [{lo_val}, {hi_val}] excludes 0"
            )
        x_fun, states = build_x_of_w0(lesm, lock_in=False)
        if x_fun.slopes[-1] * x_fun.hi + x_fun.intercepts[-1] < 0.0:
            # Stretch the window to the zero crossing of the terminal
            # all-buying segment.
            k, c = x_fun.slopes[-1], x_fun.intercepts[-1]
            hi = -c / k + (lesm.w_plus - lesm.w_minus)
            x_fun, states = build_x_of_w0(lesm, domain=(x_fun.lo, hi), lock_in=False)
        w0 = invert_price(x_fun, 0.0)
        if lesm.n <= oracle_cap:
            return w0, oracle_mod.solve_lesm(lesm, w0)
        return w0, oracle_mod.solve_assignment(lesm, w0, states[x_fun.segment_index(w0)])
    w0 = invert_price(f, 0.0)
    if lesm.n <= oracle_cap:
        return w0, oracle_mod.solve_lesm(lesm, w0)
    states = br.states[f.segment_index(w0)]
    return w0, oracle_mod.solve_assignment(lesm, w0, states)


@dataclass
class CostReport:
    mode: str
    total_cost: float                   # dollars
    served_load_kwh: float
    avg_cost_per_kwh: float
    per_prosumer: list[dict]

    def check_total(self) -> bool:
        return abs(self.total_cost - sum(r["cost"] for r in self.per_prosumer)) <= 1e-9 * (
            1.0 + abs(self.total_cost)
        )


CONFIG_MODES = ("ns", "ls", "gs", "gs-nvc")


def run_config(
    case: NetworkCase | ValidatedCase,
    mode: str,
    options: ClearOptions | None = None,
) -> CostReport:
    """Per-prosumer costs under one of the four market configurations."""
    mode = mode.lower()
    if mode not in CONFIG_MODES:
        raise ValueError(f"mode must be one of {CONFIG_MODES}")
    opts = options or ClearOptions()
    vcase = validate_case(case)
    pu = to_per_unit(vcase)
    base = pu.kw_base
    rows: list[dict] = []

    def add_rows(lesm: LesmSpec, sols, w):
        for k, (p, s) in enumerate(zip(lesm.prosumers, sols)):
            cost = oracle_mod.prosumer_cost(s, p, lesm.w_plus, lesm.w_minus, w) * base
            rows.append(
                {
                    "node": lesm.node_id,
                    "prosumer": k,
                    "cost": cost,
                    "x_kw": s.x * base,
                    "p_kw": s.p * base,
                }
            )

    if mode == "ns":
        for lesm in pu.lesms:
            sols = [
                oracle_mod.solve_no_sharing(p, lesm.w_plus, lesm.w_minus)
                for p in lesm.prosumers
            ]
            add_rows(lesm, sols, 0.0)  # x = 0 for all, so w never enters
    elif mode == "ls":
        for lesm in pu.lesms:
            w0, sol = clear_local_only(
                lesm, oracle_cap=opts.oracle_cap, extend_past_lock_in=True
            )
            add_rows(lesm, sol.per_prosumer, sol.w)
    else:
        run_opts = opts if mode == "gs" else replace(opts, disable_voltage=True)
        result = clear_market(vcase, run_opts)
        responses = {m.node_id: m for m in result.markets}
        for lesm in pu.lesms:
            mc = responses[lesm.node_id]
            if lesm.n <= opts.oracle_cap:
                sol = oracle_mod.solve_lesm(lesm, mc.w0)
            else:
                br = build_best_response(lesm)
                states = br.states[br.x_of_w0.segment_index(mc.w0)]
                sol = oracle_mod.solve_assignment(lesm, mc.w0, states)
            add_rows(lesm, sol.per_prosumer, sol.w)

    total = sum(r["cost"] for r in rows)
    served = sum(max(p.d, 0.0) for m in pu.lesms for p in m.prosumers) * base
    avg = total / served if served > 0 else 0.0
    return CostReport(
        mode=mode,
        total_cost=total,
        served_load_kwh=served,
        avg_cost_per_kwh=avg,
        per_prosumer=rows,
    )
