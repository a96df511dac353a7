"""Branch-flow SOCP assembly over a validated radial case, and the
relaxation tightness certificate.

Squared voltages and squared currents per the DistFlow convention; the
slack voltage is fixed at 1.0 p.u. squared and eliminated at assembly
time.  Per branch (i -> j) the relaxed current law  P^2 + Q^2 <= l * v_i
enters as a rotated cone on (l, v_i/2, P, Q).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..model import ValidatedCase
from .program import ConeProgram, ConicSolution

Injection = float | tuple[float, float]


@dataclass
class SocpVars:
    """Variable indices of an assembled program, keyed by node/branch."""

    v: dict[int, int]          # squared voltage, non-slack nodes
    q: dict[int, int]          # reactive support, non-slack nodes
    inj: dict[int, int]        # active injection where it is a variable
    slack_p: int
    slack_q: int
    br_p: list[int]
    br_q: list[int]
    br_l: list[int]
    br_h: list[int]            # half parent voltage copies


@dataclass
class SocpModel:
    program: ConeProgram
    vars: SocpVars
    vcase: ValidatedCase
    v_bounds: dict[int, tuple[float, float]]  # squared bounds actually imposed


def assemble_socp(
    vcase: ValidatedCase,
    injections: dict[int, Injection] | None = None,
    v_limits: dict[int, tuple[float, float]] | None = None,
) -> SocpModel:
    """Build the loss-minimizing branch-flow relaxation.

    ``injections`` maps non-slack node ids to a fixed active injection or
    an interval; omitted nodes are fixed at zero.  ``v_limits`` overrides
    voltage magnitude bounds per node (used to widen them when voltage
    constraints are disabled).
    """
    injections = injections or {}
    v_limits = v_limits or {}
    prog = ConeProgram()
    case = vcase.case
    slack = vcase.slack

    v_idx: dict[int, int] = {}
    q_idx: dict[int, int] = {}
    inj_idx: dict[int, int] = {}
    v_bounds: dict[int, tuple[float, float]] = {}

    for node in case.nodes:
        if node.id == slack:
            continue
        vmin, vmax = v_limits.get(node.id, (node.v_min, node.v_max))
        lo, hi = vmin * vmin, vmax * vmax
        v_bounds[node.id] = (lo, hi)
        vi = prog.add_free(f"v[{node.id}]")
        v_idx[node.id] = vi
        s_lo = prog.add_nonneg(f"v_lo_slack[{node.id}]")
        s_hi = prog.add_nonneg(f"v_hi_slack[{node.id}]")
        prog.add_eq({vi: 1.0, s_lo: -1.0}, lo, f"v_min[{node.id}]")
        prog.add_eq({vi: 1.0, s_hi: 1.0}, hi, f"v_max[{node.id}]")

        qi = prog.add_free(f"q[{node.id}]")
        q_idx[node.id] = qi
        q_lo = prog.add_nonneg(f"q_lo_slack[{node.id}]")
        q_hi = prog.add_nonneg(f"q_hi_slack[{node.id}]")
        prog.add_eq({qi: 1.0, q_lo: -1.0}, node.q_min, f"q_min[{node.id}]")
        prog.add_eq({qi: 1.0, q_hi: 1.0}, node.q_max, f"q_max[{node.id}]")

        spec = injections.get(node.id, 0.0)
        if isinstance(spec, tuple):
            pj = prog.add_free(f"p[{node.id}]")
            inj_idx[node.id] = pj
            p_lo = prog.add_nonneg(f"p_lo_slack[{node.id}]")
            p_hi = prog.add_nonneg(f"p_hi_slack[{node.id}]")
            prog.add_eq({pj: 1.0, p_lo: -1.0}, spec[0], f"p_min[{node.id}]")
            prog.add_eq({pj: 1.0, p_hi: 1.0}, spec[1], f"p_max[{node.id}]")

    slack_p = prog.add_free("p[slack]")
    slack_q = prog.add_free("q[slack]")

    br_p: list[int] = []
    br_q: list[int] = []
    br_l: list[int] = []
    br_h: list[int] = []
    for e, br in enumerate(vcase.branches):
        l, h, p, q = prog.add_rsoc(
            f"l[{br.parent}-{br.child}]",
            f"h[{br.parent}-{br.child}]",
            [f"P[{br.parent}-{br.child}]", f"Q[{br.parent}-{br.child}]"],
        )
        br_l.append(l)
        br_q.append(q)
        br_p.append(p)
        br_h.append(h)
        # Half parent voltage: 2 l h >= P^2 + Q^2 becomes l v_i >= P^2 + Q^2.
        if br.parent == slack:
            prog.add_eq({h: 1.0}, 0.5, f"half_v[{e}]")
        else:
            prog.add_eq({h: 1.0, v_idx[br.parent]: -0.5}, 0.0, f"half_v[{e}]")
        l_cap = prog.add_nonneg(f"l_slack[{br.parent}-{br.child}]")
        prog.add_eq({l: 1.0, l_cap: 1.0}, br.l_max, f"l_max[{e}]")
        # Voltage drop: v_child = v_parent - 2(r P + x Q) + (r^2 + x^2) l.
        coeffs = {
            v_idx[br.child]: 1.0,
            p: 2.0 * br.r,
            q: 2.0 * br.x,
            l: -(br.r * br.r + br.x * br.x),
        }
        rhs = 0.0
        if br.parent == slack:
            rhs = 1.0
        else:
            coeffs[v_idx[br.parent]] = -1.0
        prog.add_eq(coeffs, rhs, f"v_drop[{e}]")
        prog.add_obj(l, br.r)

    out_edges: dict[int, list[int]] = {n.id: [] for n in case.nodes}
    in_edge: dict[int, int] = {}
    for e, br in enumerate(vcase.branches):
        out_edges[br.parent].append(e)
        in_edge[br.child] = e

    for node in case.nodes:
        nid = node.id
        # Active: inj = sum(out P) - sum(in (P - r l)); reactive likewise.
        coeffs_p: dict[int, float] = {}
        coeffs_q: dict[int, float] = {}
        rhs_p = 0.0
        for e in out_edges[nid]:
            coeffs_p[br_p[e]] = coeffs_p.get(br_p[e], 0.0) - 1.0
            coeffs_q[br_q[e]] = coeffs_q.get(br_q[e], 0.0) - 1.0
        if nid in in_edge:
            e = in_edge[nid]
            br = vcase.branches[e]
            coeffs_p[br_p[e]] = coeffs_p.get(br_p[e], 0.0) + 1.0
            coeffs_p[br_l[e]] = coeffs_p.get(br_l[e], 0.0) - br.r
            coeffs_q[br_q[e]] = coeffs_q.get(br_q[e], 0.0) + 1.0
            coeffs_q[br_l[e]] = coeffs_q.get(br_l[e], 0.0) - br.x
        if nid == slack:
            coeffs_p[slack_p] = 1.0
            coeffs_q[slack_q] = 1.0
        else:
            coeffs_q[q_idx[nid]] = 1.0
            spec = injections.get(nid, 0.0)
            if isinstance(spec, tuple):
                coeffs_p[inj_idx[nid]] = 1.0
            else:
                rhs_p = -float(spec)
        prog.add_eq(coeffs_p, rhs_p, f"balance_p[{nid}]")
        prog.add_eq(coeffs_q, 0.0, f"balance_q[{nid}]")

    return SocpModel(program=prog, vars=SocpVars(
        v=v_idx, q=q_idx, inj=inj_idx, slack_p=slack_p, slack_q=slack_q,
        br_p=br_p, br_q=br_q, br_l=br_l, br_h=br_h,
    ), vcase=vcase, v_bounds=v_bounds)


@dataclass
class BranchResidual:
    parent: int
    child: int
    residual: float
    rel_limit: float
    passed: bool


@dataclass
class TightnessReport:
    passed: bool
    max_rel_residual: float
    branches: list[BranchResidual]
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_rel_residual": self.max_rel_residual,
            "branches": [
                {
                    "from": b.parent,
                    "to": b.child,
                    "residual": b.residual,
                    "rel_limit": b.rel_limit,
                    "passed": b.passed,
                }
                for b in self.branches
            ],
            "warnings": list(self.warnings),
        }


def check_tightness(
    sol: ConicSolution, model: SocpModel, rtol: float = 1e-6
) -> TightnessReport:
    """Per-branch relaxation residual l*v_i - P^2 - Q^2 in leaf-to-root order.

    Also surfaces a warning when a node with a binding upper voltage bound
    has its reactive support at the lower bound, where the backward
    induction argument loses its perturbation margin.
    """
    x = sol.x
    assert x is not None, "tightness check needs an Optimal solution"
    vcase = model.vcase
    slack = vcase.slack
    by_child = {br.child: e for e, br in enumerate(vcase.branches)}

    branches = []
    worst = 0.0
    for child in vcase.order:
        if child == slack:
            continue
        e = by_child[child]
        br = vcase.branches[e]
        v_i = 1.0 if br.parent == slack else x[model.vars.v[br.parent]]
        l = x[model.vars.br_l[e]]
        p = x[model.vars.br_p[e]]
        q = x[model.vars.br_q[e]]
        rho = float(l * v_i - p * p - q * q)
        limit = float(rtol * (1.0 + l * v_i))
        ok = bool(rho <= limit)
        worst = max(worst, rho / (1.0 + float(l * v_i)))
        branches.append(BranchResidual(br.parent, br.child, rho, limit, ok))

    warnings = []
    for nid, vi in model.vars.v.items():
        lo, hi = model.v_bounds[nid]
        if abs(x[vi] - hi) <= 1e-6 * (1.0 + hi):
            node = vcase.node(nid)
            if x[model.vars.q[nid]] - node.q_min <= 1e-6 * (1.0 + abs(node.q_min)):
                warnings.append(
                    f"node {nid}: upper voltage bound binds with reactive support "
                    f"at its lower bound; tightness argument has no margin here"
                )

    return TightnessReport(
        passed=all(b.passed for b in branches),
        max_rel_residual=float(worst),
        branches=branches,
        warnings=warnings,
    )


def recompute_voltages(sol: ConicSolution, model: SocpModel) -> dict[int, float]:
    """Squared voltages propagated root-to-leaf from the drop equation;
    diagnostic used to cross-check solver voltages."""
    x = sol.x
    v: dict[int, float] = {model.vcase.slack: 1.0}
    for child in reversed(model.vcase.order):
        if child == model.vcase.slack:
            continue
        e = {br.child: i for i, br in enumerate(model.vcase.branches)}[child]
        br = model.vcase.branches[e]
        v[child] = (
            v[br.parent]
            - 2.0 * (br.r * x[model.vars.br_p[e]] + br.x * x[model.vars.br_q[e]])
            + (br.r**2 + br.x**2) * x[model.vars.br_l[e]]
        )
    return v
