"""Domain data model: prosumers, lower-layer markets, and the radial feeder.

All types are frozen dataclasses; a case that passed :func:`validate_case`
is safe to share across workers.  Voltage bounds are stored as magnitudes
on the node records and squared internally by the network assembly
(DistFlow convention).  Power base handling: :func:`to_per_unit` divides every
market-side power (net load, capacity) by ``base_power`` and rescales the
quadratic cost and elasticity coefficients so that every stationarity and
pricing relation is unchanged.  Prices stay in natural $/kWh; objective
values in the scaled system are ``1/base_power`` times the dollar values,
so cost reports multiply back by the stored ``kw_base``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

from .errors import (
    CycleDetected,
    DisconnectedNode,
    MarketOnSlack,
    MultipleSlack,
    NonPositiveBase,
    NoSlack,
    ParameterOutOfRange,
)


@dataclass(frozen=True)
class ProsumerParams:
    """One prosumer: quadratic generator cost c/2 p^2 + b p, net load d, cap p_max."""

    c: float
    b: float
    d: float
    p_max: float


@dataclass(frozen=True)
class LesmSpec:
    """One lower-layer market: host node, price elasticity, utility prices."""

    node_id: int
    a: float
    w_plus: float
    w_minus: float
    prosumers: tuple[ProsumerParams, ...]

    @property
    def n(self) -> int:
        return len(self.prosumers)


@dataclass(frozen=True)
class NodeSpec:
    id: int
    is_slack: bool
    v_min: float
    v_max: float
    q_min: float
    q_max: float


@dataclass(frozen=True)
class BranchSpec:
    from_node: int
    to_node: int
    r: float
    x: float
    l_max: float


@dataclass(frozen=True)
class NetworkCase:
    base_power: float
    nodes: tuple[NodeSpec, ...]
    branches: tuple[BranchSpec, ...]
    lesms: tuple[LesmSpec, ...]


@dataclass(frozen=True)
class OrientedBranch:
    """A branch re-oriented parent -> child along the tree rooted at the slack."""

    parent: int
    child: int
    r: float
    x: float
    l_max: float


@dataclass(frozen=True)
class ValidatedCase:
    """A NetworkCase whose invariants all hold, plus precomputed topology.

    ``order`` lists node ids leaf-to-root: every node appears before its
    parent and the slack comes last.  This is the traversal order the
    tightness checker uses.  ``kw_base`` is the kW value of 1.0 p.u.
    regardless of normalization state.
    """

    case: NetworkCase
    slack: int
    parent: Mapping[int, int]
    order: tuple[int, ...]
    branches: tuple[OrientedBranch, ...]
    kw_base: float

    @property
    def nodes(self) -> tuple[NodeSpec, ...]:
        return self.case.nodes

    @property
    def lesms(self) -> tuple[LesmSpec, ...]:
        return self.case.lesms

    def node(self, node_id: int) -> NodeSpec:
        return self._node_map[node_id]

    def lesm_at(self, node_id: int) -> LesmSpec | None:
        return self._lesm_map.get(node_id)

    @property
    def _node_map(self) -> dict[int, NodeSpec]:
        return {n.id: n for n in self.case.nodes}

    @property
    def _lesm_map(self) -> dict[int, LesmSpec]:
        return {m.node_id: m for m in self.case.lesms}


def _check_prosumer(p: ProsumerParams, w_minus: float, where: str) -> None:
    if not p.c > 0:
        raise ParameterOutOfRange(f"{where}.c", "c must be > 0")
    if not 0 < p.b < w_minus:
        raise ParameterOutOfRange(f"{where}.b", "requires 0 < b < w_minus")
    if p.p_max < 0:
        raise ParameterOutOfRange(f"{where}.p_max", "p_max must be >= 0")


def _check_lesm(m: LesmSpec, where: str) -> None:
    if not m.a > 0:
        raise ParameterOutOfRange(f"{where}.a", "a must be > 0")
    if not m.w_plus > m.w_minus > 0:
        raise ParameterOutOfRange(f"{where}.w_plus/w_minus", "requires w_plus > w_minus > 0")
    if not m.prosumers:
        raise ParameterOutOfRange(f"{where}.prosumers", "market has no prosumers")
    for k, p in enumerate(m.prosumers):
        _check_prosumer(p, m.w_minus, f"{where}.prosumers[{k}]")


def _check_node(n: NodeSpec, where: str) -> None:
    if not 0 < n.v_min < n.v_max:
        raise ParameterOutOfRange(f"{where}.v_min/v_max", "requires 0 < v_min < v_max")
    if not n.q_min < n.q_max:
        raise ParameterOutOfRange(f"{where}.q_min/q_max", "requires q_min < q_max")


def _check_branch(b: BranchSpec, where: str) -> None:
    if b.r < 0:
        raise ParameterOutOfRange(f"{where}.r", "r must be >= 0")
    if not b.x > 0:
        raise ParameterOutOfRange(f"{where}.x", "x must be > 0")
    if not b.l_max > 0:
        raise ParameterOutOfRange(f"{where}.l_max", "l_max must be > 0")


def validate_case(case: NetworkCase | ValidatedCase) -> ValidatedCase:
    """Check every type invariant and precompute the rooted tree topology.

    Idempotent: a ValidatedCase revalidates to an equal ValidatedCase.
    """
    if isinstance(case, ValidatedCase):
        kw_base = case.kw_base
        case = case.case
    else:
        kw_base = case.base_power
    if case.base_power <= 0:
        raise NonPositiveBase(f"base_power = {case.base_power}")

    node_ids = [n.id for n in case.nodes]
    if len(set(node_ids)) != len(node_ids):
        raise ParameterOutOfRange("nodes.id", "duplicate node id")
    id_set = set(node_ids)

    slacks = [n.id for n in case.nodes if n.is_slack]
    if not slacks:
        raise NoSlack("no slack node designated")
    if len(slacks) > 1:
        raise MultipleSlack(f"slack nodes {slacks}")
    slack = slacks[0]

    for i, n in enumerate(case.nodes):
        _check_node(n, f"nodes[{i}]")
    for i, b in enumerate(case.branches):
        _check_branch(b, f"branches[{i}]")
        if b.from_node not in id_set or b.to_node not in id_set:
            raise DisconnectedNode(f"branches[{i}] references unknown node")

    market_nodes = [m.node_id for m in case.lesms]
    if len(set(market_nodes)) != len(market_nodes):
        raise ParameterOutOfRange("lesms.node", "more than one market on a node")
    for i, m in enumerate(case.lesms):
        if m.node_id not in id_set:
            raise DisconnectedNode(f"lesms[{i}] references unknown node {m.node_id}")
        if m.node_id == slack:
            raise MarketOnSlack(f"market on slack node {slack}")
        _check_lesm(m, f"lesms[{i}]")

    # Tree check: |E| = |N|-1, connected, no parallel edges.
    if len(case.branches) != len(case.nodes) - 1:
        if len(case.branches) >= len(case.nodes):
            raise CycleDetected(
                f"{len(case.branches)} branches for {len(case.nodes)} nodes"
            )
        raise DisconnectedNode("fewer branches than nodes-1")
    adj: dict[int, list[tuple[int, int]]] = {i: [] for i in node_ids}
    seen_edges = set()
    for bi, b in enumerate(case.branches):
        key = (min(b.from_node, b.to_node), max(b.from_node, b.to_node))
        if b.from_node == b.to_node or key in seen_edges:
            raise CycleDetected(f"branches[{bi}] duplicates an edge or is a self-loop")
        seen_edges.add(key)
        adj[b.from_node].append((b.to_node, bi))
        adj[b.to_node].append((b.from_node, bi))

    # BFS from slack orients every branch parent -> child.
    parent: dict[int, int] = {}
    oriented: dict[int, OrientedBranch] = {}
    visited = {slack}
    frontier = [slack]
    order_root_first = [slack]
    while frontier:
        nxt = []
        for u in frontier:
            for v, bi in adj[u]:
                if v in visited:
                    continue
                visited.add(v)
                parent[v] = u
                b = case.branches[bi]
                oriented[bi] = OrientedBranch(u, v, b.r, b.x, b.l_max)
                nxt.append(v)
                order_root_first.append(v)
        frontier = nxt
    if len(visited) != len(node_ids):
        missing = sorted(id_set - visited)
        # Edge count matched nodes-1, so unreachable nodes imply a cycle
        # elsewhere; report the more specific condition.
        raise CycleDetected(f"nodes {missing} unreachable from slack (cycle elsewhere)")

    leaf_to_root = tuple(reversed(order_root_first))
    branches = tuple(oriented[bi] for bi in sorted(oriented))
    return ValidatedCase(
        case=case,
        slack=slack,
        parent=dict(parent),
        order=leaf_to_root,
        branches=branches,
        kw_base=kw_base,
    )


def to_per_unit(vcase: ValidatedCase) -> ValidatedCase:
    """Normalize market powers by the case power base.

    d and p_max divide by the base; c and a multiply by it, which keeps
    w = w0 - a*X and every KKT stationarity relation identical in the
    scaled variables.  Prices are untouched.  Idempotent because the
    scaled case carries base_power = 1.
    """
    base = vcase.case.base_power
    if base <= 0:
        raise NonPositiveBase(f"base_power = {base}")
    if base == 1.0:
        return vcase
    lesms = tuple(
        replace(
            m,
            a=m.a * base,
            prosumers=tuple(
                replace(p, c=p.c * base, d=p.d / base, p_max=p.p_max / base)
                for p in m.prosumers
            ),
        )
        for m in vcase.case.lesms
    )
    case = replace(vcase.case, base_power=1.0, lesms=lesms)
    return replace(vcase, case=case, kw_base=vcase.kw_base)
