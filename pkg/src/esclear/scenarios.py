"""Deterministic scenario generation: the three-region study protocol.

All randomness flows through a SplitMix64 stream so identical seeds yield
byte-identical case files on every platform.  The draw order is frozen and
is part of the format: first per-branch impedances in branch index order,
then per market node (ascending id) the elasticity followed by each
prosumer's (c, b, p_max, d).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import BadTemplate
from .model import BranchSpec, LesmSpec, NetworkCase, NodeSpec, ProsumerParams

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX_MUL_1 = 0xBF58476D1CE4E5B9
MIX_MUL_2 = 0x94D049BB133111EB


class SplitMix64:
    """Reference SplitMix64; uniform() maps the top 53 bits onto [0, 1)."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * MIX_MUL_1) & MASK64
        z = ((z ^ (z >> 27)) * MIX_MUL_2) & MASK64
        return z ^ (z >> 31)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * 2.0**-53
        return lo + (hi - lo) * u


REGION_D_KW = {
    "surplus": (-40.0, -20.0),
    "deficit": (20.0, 40.0),
    "balance": (-5.0, 5.0),
}

#: Elasticity range before dividing by the market size.
A_RANGE = (2.5e-3, 5e-3)
C_RANGE = (0.5e-3, 1e-3)
B_RANGE = (0.01, 0.05)
P_MAX_RANGE = (0.0, 40.0)
W_PLUS = 0.2
W_MINUS = 0.05

#: Per-branch impedance draws (p.u.); the power base grows with the
#: prosumer population (see DEFAULT_KW_PER_PROSUMER) so these stay
#: size-independent and the feeder remains voltage-feasible.
R_RANGE = (1.5e-3, 2.5e-3)
X_OVER_R = (1.8, 2.2)
L_MAX_PU = 50.0
#: Auto power base: 20 kW of base per prosumer, floored at 1000 kW.
DEFAULT_KW_PER_PROSUMER = 20.0
MIN_BASE_KW = 1000.0

#: Reactive support sized from the node's aggregate net load (floored).
Q_FRACTION = 0.3
Q_FLOOR_PU = 0.05


@dataclass(frozen=True)
class ScenarioTemplate:
    nodes: int = 15                       # market nodes; slack id 0 is added
    prosumers: int = 10
    seed: int = 0
    topology: str = "path"                # "path" or "tree"
    regions: tuple[str, ...] | None = None
    base_power_kw: float | None = None    # None: scale with prosumer count
    v_min: float = 0.93
    v_max: float = 1.07
    d_ranges: dict = field(default_factory=lambda: dict(REGION_D_KW))
    r_range: tuple[float, float] = R_RANGE
    q_fraction: float = Q_FRACTION

    def resolved_base_kw(self) -> float:
        if self.base_power_kw is not None:
            return self.base_power_kw
        return max(MIN_BASE_KW, DEFAULT_KW_PER_PROSUMER * self.nodes * self.prosumers)

    def region_blocks(self) -> tuple[str, ...]:
        """Contiguous thirds: surplus nearest the slack, deficit farthest."""
        if self.regions is not None:
            if len(self.regions) != self.nodes:
                raise BadTemplate(
                    f"{len(self.regions)} regions for {self.nodes} market nodes"
                )
            for r in self.regions:
                if r not in REGION_D_KW:
                    raise BadTemplate(f"unknown region {r!r}")
            return tuple(self.regions)
        n_sur = (self.nodes + 2) // 3
        n_bal = (self.nodes + 1) // 3
        n_def = self.nodes - n_sur - n_bal
        return ("surplus",) * n_sur + ("balance",) * n_bal + ("deficit",) * n_def


def _topology(t: ScenarioTemplate) -> list[tuple[int, int]]:
    n = t.nodes
    if t.topology == "path":
        return [(i, i + 1) for i in range(n)]
    if t.topology == "tree":
        # Binary-heap shape rooted at the slack.
        edges = []
        for i in range(1, n + 1):
            parent = 0 if i == 1 else i // 2
            edges.append((parent, i))
        return edges
    raise BadTemplate(f"unknown topology {t.topology!r}")


def generate_case(t: ScenarioTemplate) -> NetworkCase:
    if t.nodes < 1 or t.prosumers < 1:
        raise BadTemplate("need at least one market node and one prosumer")
    if t.seed < 0 or t.seed > MASK64:
        raise BadTemplate("seed must fit in 64 bits")
    rng = SplitMix64(t.seed)
    edges = _topology(t)
    base_kw = t.resolved_base_kw()

    branches = []
    for u, v in edges:
        r = rng.uniform(*t.r_range)
        x = r * rng.uniform(*X_OVER_R)
        branches.append(BranchSpec(u, v, r, x, L_MAX_PU))

    regions = t.region_blocks()
    lesms = []
    q_bounds: dict[int, float] = {}
    for k in range(t.nodes):
        node_id = k + 1
        a = rng.uniform(*A_RANGE) / t.prosumers
        prosumers = []
        abs_d_kw = 0.0
        d_lo, d_hi = t.d_ranges[regions[k]]
        for _ in range(t.prosumers):
            c = rng.uniform(*C_RANGE)
            b = rng.uniform(*B_RANGE)
            p_max = rng.uniform(*P_MAX_RANGE)
            d = rng.uniform(d_lo, d_hi)
            abs_d_kw += abs(d)
            prosumers.append(ProsumerParams(c=c, b=b, d=d, p_max=p_max))
        lesms.append(
            LesmSpec(
                node_id=node_id,
                a=a,
                w_plus=W_PLUS,
                w_minus=W_MINUS,
                prosumers=tuple(prosumers),
            )
        )
        q_bounds[node_id] = max(Q_FLOOR_PU, t.q_fraction * abs_d_kw / base_kw)

    nodes = [NodeSpec(0, True, t.v_min, t.v_max, -1e3, 1e3)]
    for k in range(t.nodes):
        q = q_bounds[k + 1]
        nodes.append(NodeSpec(k + 1, False, t.v_min, t.v_max, -q, q))

    return NetworkCase(
        base_power=base_kw,
        nodes=tuple(nodes),
        branches=tuple(branches),
        lesms=tuple(lesms),
    )
