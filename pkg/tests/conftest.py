"""Shared builders for markets and cases used across the suite."""

import numpy as np
import pytest

from esclear.model import BranchSpec, LesmSpec, NetworkCase, NodeSpec, ProsumerParams

W_PLUS = 0.2
W_MINUS = 0.05

REGION_D = {
    "surplus": (-40.0, -20.0),
    "deficit": (20.0, 40.0),
    "balance": (-5.0, 5.0),
    "mixed": (-40.0, 40.0),
}


def market(prosumers, a=1.0, w_plus=W_PLUS, w_minus=W_MINUS, node_id=1):
    return LesmSpec(
        node_id=node_id,
        a=a,
        w_plus=w_plus,
        w_minus=w_minus,
        prosumers=tuple(ProsumerParams(*p) for p in prosumers),
    )


def single_prosumer_market(c=1.0, b=0.0, d=0.0, p_max=10.0, a=1.0):
    """The worked single-prosumer example: breakpoints at 0.15 and 0.6."""
    return market([(c, b, d, p_max)], a=a)


def random_market_field(rng, n, region="mixed", node_id=1):
    """Markets drawn with the field-study parameter protocol."""
    a = rng.uniform(2.5e-3, 5e-3) / n
    lo, hi = REGION_D[region]
    pros = [
        (
            rng.uniform(0.5e-3, 1e-3),
            rng.uniform(0.01, 0.045),
            rng.uniform(lo, hi),
            rng.uniform(0.0, 40.0),
        )
        for _ in range(n)
    ]
    return market(pros, a=a, node_id=node_id)


def random_market_wide(rng, n, node_id=1):
    """Wider parameter draws so all three migration paths occur."""
    a = 10.0 ** rng.uniform(-3, 0)
    pros = [
        (
            10.0 ** rng.uniform(-3, -0.5),
            rng.uniform(0.002, 0.045),
            rng.uniform(-20.0, 20.0),
            rng.uniform(0.0, 30.0),
        )
        for _ in range(n)
    ]
    return market(pros, a=a, node_id=node_id)


def random_market(rng, n=None, kind=None, node_id=1):
    n = n if n is not None else int(rng.randint(1, 9))
    kind = kind if kind is not None else ("field" if rng.rand() < 0.5 else "wide")
    if kind == "field":
        region = ["surplus", "deficit", "balance", "mixed"][rng.randint(4)]
        return random_market_field(rng, n, region=region, node_id=node_id)
    return random_market_wide(rng, n, node_id=node_id)


def two_node_case(
    r=0.01,
    x=0.02,
    l_max=5.0,
    v_min=0.93,
    v_max=1.07,
    q_min=-0.2,
    q_max=0.2,
    lesms=(),
):
    nodes = (
        NodeSpec(0, True, v_min, v_max, -10.0, 10.0),
        NodeSpec(1, False, v_min, v_max, q_min, q_max),
    )
    return NetworkCase(
        base_power=1.0,
        nodes=nodes,
        branches=(BranchSpec(0, 1, r, x, l_max),),
        lesms=tuple(lesms),
    )


def random_radial_case(rng, max_nodes=15, with_markets=False):
    """Random feasible radial case with strictly interior reactive bounds.

    Injections are rescaled until the voltage band is loose enough that a
    feasible point surely exists (checked against the lossless voltage
    drop along the worst path).
    """
    n = int(rng.randint(2, max_nodes + 1))
    parents = [int(rng.randint(0, i)) for i in range(1, n)]
    r = rng.uniform(0.001, 0.006, size=n - 1)
    x = r * rng.uniform(1.5, 2.5, size=n - 1)
    inj = rng.uniform(-0.35, 0.25, size=n - 1)

    for _ in range(30):
        # Lossless bound on the worst cumulative drop: accumulate child
        # subtree injections up each path.
        sub = {i: inj[i - 1] for i in range(1, n)}
        for i in range(n - 1, 0, -1):
            p = parents[i - 1]
            if p != 0:
                sub[p] += sub[i]
        drop = {0: 0.0}
        worst = 0.0
        for i in range(1, n):
            p = parents[i - 1]
            drop[i] = drop[p] + abs(2 * r[i - 1] * sub[i]) + abs(2 * x[i - 1] * sub[i])
            worst = max(worst, drop[i])
        if worst < 0.05:
            break
        inj *= 0.6
    nodes = [NodeSpec(0, True, 0.93, 1.07, -10.0, 10.0)]
    for i in range(1, n):
        qm = max(0.05, 0.4 * abs(inj[i - 1])) + rng.uniform(0.01, 0.1)
        nodes.append(NodeSpec(i, False, 0.93, 1.07, -qm, qm))
    branches = tuple(
        BranchSpec(parents[i - 1], i, float(r[i - 1]), float(x[i - 1]), 10.0)
        for i in range(1, n)
    )
    injections = {i: float(inj[i - 1]) for i in range(1, n)}
    case = NetworkCase(1.0, tuple(nodes), branches, ())
    return case, injections


@pytest.fixture
def rng():
    return np.random.RandomState(20240611)
