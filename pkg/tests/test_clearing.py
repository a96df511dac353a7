"""Embedding, branch and bound, end-to-end clearing, market configurations."""

import itertools

import numpy as np
import pytest

from esclear.bestresp import build_best_response
from esclear.clearing import (
    ClearOptions,
    CONFIG_MODES,
    attach_embeddings,
    branch_and_bound,
    clear_local_only,
    clear_market,
    embed_pwl,
    recover_prices,
    run_config,
)
from esclear.conic import SolveStatus, assemble_socp, get_backend
from esclear.errors import NoIncumbent, ZeroUnreachable
from esclear.model import (
    BranchSpec,
    LesmSpec,
    NetworkCase,
    NodeSpec,
    ProsumerParams,
    validate_case,
)
from esclear.oracle import solve_lesm

from conftest import market, single_prosumer_market


def line_network(lesms, n_nodes, r=0.01, x=0.02, v=(0.93, 1.07), q=(-0.3, 0.3), base=1.0):
    nodes = tuple(
        NodeSpec(i, i == 0, v[0], v[1], q[0], q[1]) for i in range(n_nodes)
    )
    branches = tuple(BranchSpec(i, i + 1, r, x, 10.0) for i in range(n_nodes - 1))
    return NetworkCase(base, nodes, branches, tuple(lesms))


def mirrored_toy(d=0.3, c=2.0, b=0.02, p_max=0.6, a=0.1):
    """slack - surplus market - deficit market with mirrored prosumers."""
    surplus = market([(c, b, -d, p_max)] * 2, a=a, node_id=1)
    deficit = market([(c, b, +d, p_max)] * 2, a=a, node_id=2)
    return line_network([surplus, deficit], 3)


def enumerate_optimum(case, backend):
    """Exhaustive segment-combination optimum (the B&B soundness oracle)."""
    from esclear.model import to_per_unit

    vcase = to_per_unit(validate_case(case))
    responses = [build_best_response(m) for m in vcase.lesms]
    embeddings = [embed_pwl(br) for br in responses]
    injections = {e.node_id: e.p_range for e in embeddings}
    best = None
    for combo in itertools.product(*(range(len(e.segments)) for e in embeddings)):
        socp = assemble_socp(vcase, injections)
        mmodel = attach_embeddings(socp, embeddings)
        pins = []
        for emb, s in zip(embeddings, combo):
            ys = mmodel.y_vars[emb.node_id]
            pins.extend(ys[:s])
            pins.extend(ys[s + 1 :])
        sol = backend.solve(mmodel.frozen.pinned(pins))
        if sol.status is SolveStatus.OPTIMAL and (best is None or sol.objective < best):
            best = sol.objective
    return best


@pytest.fixture(scope="module")
def backend():
    return get_backend("clarabel")


class TestEmbedPwl:
    def test_three_piece_vertices(self):
        # Price window wide enough that X spans [-0.5, 0.5] before truncation.
        br = build_best_response(single_prosumer_market(), domain=(-0.95, 1.2))
        emb = embed_pwl(br, domain=(-0.5, 0.5))
        assert len(emb.segments) == 3
        vertices = [(emb.segments[0].x_lo, emb.segments[0].p_lo)] + [
            (s.x_hi, s.p_hi) for s in emb.segments
        ]
        expected = [(-0.5, 0.05), (0.05, 0.05), (0.2, 0.2), (0.5, 0.2)]
        assert np.allclose(vertices, expected, atol=1e-9)

    def test_relaxed_hull_is_vertex_hull(self):
        # Relaxed (X, P) points are exactly convex combinations of the
        # graph vertices: segment midpoints lifted anywhere inside the
        # hull must be expressible; points outside must not.
        from scipy.optimize import linprog

        br = build_best_response(single_prosumer_market(), domain=(-0.95, 1.2))
        emb = embed_pwl(br, domain=(-0.5, 0.5))
        verts = []
        for s in emb.segments:
            verts.append((s.x_lo, s.p_lo))
            verts.append((s.x_hi, s.p_hi))

        def in_relaxation(pt):
            # weights >= 0, sum = 1, combination hits pt
            A_eq = [[v[0] for v in verts], [v[1] for v in verts], [1.0] * len(verts)]
            res = linprog(
                c=[0.0] * len(verts),
                A_eq=A_eq,
                b_eq=[pt[0], pt[1], 1.0],
                bounds=[(0, None)] * len(verts),
                method="highs",
            )
            return res.status == 0

        assert in_relaxation((0.0, 0.1))      # above the graph, inside hull
        assert in_relaxation((0.125, 0.125))  # on the middle segment
        assert not in_relaxation((0.4, 0.05))  # below the hull floor line
        assert not in_relaxation((-0.4, 0.19))  # above the upper chain

    def test_empty_truncation_rejected(self):
        from esclear.errors import EmptyDomain

        br = build_best_response(single_prosumer_market())
        with pytest.raises(EmptyDomain):
            embed_pwl(br, domain=(10.0, 11.0))

    def test_single_segment_degenerates(self, backend):
        # One affine piece: the root relaxation is already integral.
        # alpha = 0.015, beta = 0.09: the window (0.02, 0.05) sits inside
        # the interior self-balancing piece.
        lesm = market([(2.0, 0.02, 0.0, 5.0)], a=0.1)
        br = build_best_response(lesm)
        emb = embed_pwl(br, domain=(0.02, 0.05))
        assert len(emb.segments) == 1


class TestBranchAndBound:
    def test_all_affine_solved_at_root(self, backend):
        case = mirrored_toy()
        vcase = validate_case(case)
        responses = [build_best_response(m) for m in vcase.lesms]
        # Truncate each response to one sloped piece around X = 0.
        embeddings = [embed_pwl(br, domain=(-0.05, 0.05)) for br in responses]
        embeddings = [
            e for e in embeddings
        ]
        injections = {e.node_id: e.p_range for e in embeddings}
        socp = assemble_socp(vcase, injections)
        mmodel = attach_embeddings(socp, embeddings)
        if all(len(e.segments) == 1 for e in embeddings):
            out = branch_and_bound(mmodel)
            assert out.gap_rel <= 1e-6
            assert out.status == "optimal"

    def test_matches_exhaustive_enumeration(self, backend):
        case = mirrored_toy()
        true_opt = enumerate_optimum(case, backend)
        result = clear_market(case)
        assert result.gap_rel <= 1e-6
        assert result.objective == pytest.approx(true_opt, rel=1e-6, abs=1e-9)
        assert result.bnb_nodes <= 50

    def test_infeasible_band_no_incumbent(self):
        lesm = market([(2.0, 0.02, 0.5, 0.0)], a=0.1, node_id=1)  # P pinned at -0.5
        case = line_network([lesm], 2, v=(0.999999, 1.000001))
        with pytest.raises(NoIncumbent):
            clear_market(case)

    def test_unbalanced_sharing_ranges_no_incumbent(self):
        # Two capacity-short markets: both X ranges sit strictly below
        # zero, so the sharing balance row is unsatisfiable.
        mk = lambda nid: market([(1.0, 0.02, 0.4, 0.0)] * 2, a=0.2, node_id=nid)
        case = line_network([mk(1), mk(2)], 3)
        with pytest.raises(NoIncumbent):
            clear_market(case)


class TestClearMarket:
    def test_mirrored_symmetry(self):
        result = clear_market(mirrored_toy())
        xs = {m.node_id: m.x for m in result.markets}
        assert xs[1] + xs[2] == pytest.approx(0.0, abs=1e-6)
        assert abs(result.sum_x) <= 1e-6

    def test_verification_passes(self):
        result = clear_market(mirrored_toy())
        for m in result.markets:
            assert m.verification.passed, m
        assert result.tightness.passed

    def test_segment_honesty(self):
        result = clear_market(mirrored_toy())
        vcase = validate_case(mirrored_toy())
        for m in result.markets:
            lesm = next(l for l in vcase.lesms if l.node_id == m.node_id)
            br = build_best_response(lesm)
            g = br.p_of_x
            assert g(min(max(m.x, g.lo), g.hi)) == pytest.approx(m.p, abs=1e-8)

    def test_voltage_within_bounds(self):
        result = clear_market(mirrored_toy())
        for nid, v in result.node_v.items():
            assert 0.93**2 - 1e-8 <= v <= 1.07**2 + 1e-8

    def test_prices_consistent(self):
        result = clear_market(mirrored_toy())
        vcase = validate_case(mirrored_toy())
        for m in result.markets:
            lesm = next(l for l in vcase.lesms if l.node_id == m.node_id)
            assert m.w == pytest.approx(m.w0 - lesm.a * m.x, abs=1e-12)
            sol = solve_lesm(lesm, m.w0)
            assert sol.X == pytest.approx(m.x, abs=1e-6 * (1 + abs(m.x)))
            assert sol.P == pytest.approx(m.p, abs=1e-6 * (1 + abs(m.p)))

    def test_deterministic_result(self):
        a = clear_market(mirrored_toy()).to_dict()
        b = clear_market(mirrored_toy()).to_dict()
        a.pop("timings")
        b.pop("timings")
        assert a == b

    def test_workers_same_objective(self):
        base = clear_market(mirrored_toy())
        par = clear_market(mirrored_toy(), ClearOptions(workers=2))
        assert par.objective == pytest.approx(base.objective, rel=1e-9)

    def test_no_markets_pure_network(self):
        case = line_network([], 3)
        result = clear_market(case)
        assert result.markets == []
        assert result.objective == pytest.approx(0.0, abs=1e-9)
        assert result.tightness.passed

    def test_nvc_no_worse_than_gs(self):
        case = mirrored_toy(d=0.5, p_max=1.0)
        gs = clear_market(case)
        nvc = clear_market(case, ClearOptions(disable_voltage=True))
        assert nvc.objective <= gs.objective + 1e-9


class TestRecoverPrices:
    def test_single_prosumer(self):
        br = build_best_response(single_prosumer_market())
        w0, w = recover_prices(br, 1.0, 0.1)
        assert (w0, w) == pytest.approx((0.3, 0.2), abs=1e-12)

    def test_zero_in_initial_segment(self):
        br = build_best_response(single_prosumer_market())
        w0, w = recover_prices(br, 1.0, 0.0)
        assert (w0, w) == pytest.approx((0.05, 0.05), abs=1e-12)


class TestClearLocalOnly:
    def test_single_prosumer_floor(self):
        w0, sol = clear_local_only(single_prosumer_market())
        assert w0 == pytest.approx(0.05, abs=1e-12)
        assert sol.X == pytest.approx(0.0, abs=1e-9)

    def test_zero_unreachable(self):
        # p_max = 0, d > 0: X locks in at -d before reaching zero.
        lesm = market([(1.0, 0.02, 5.0, 0.0)], a=1.0)
        with pytest.raises(ZeroUnreachable):
            clear_local_only(lesm)

    def test_symmetric_pair_nets_zero(self):
        lesm = market([(1.0, 0.02, 0.4, 2.0), (1.0, 0.02, -0.4, 2.0)], a=0.5)
        w0, sol = clear_local_only(lesm)
        check = solve_lesm(lesm, w0)
        assert check.X == pytest.approx(0.0, abs=1e-9)
        assert sol.X == pytest.approx(0.0, abs=1e-9)


class TestRunConfig:
    def test_null_market_all_zero(self):
        lesm = market([(1.0, 0.01, 0.0, 0.0)] * 2, a=0.5, node_id=1)
        case = line_network([lesm], 2)
        for mode in CONFIG_MODES:
            rep = run_config(case, mode)
            assert rep.total_cost == pytest.approx(0.0, abs=1e-9), mode

    def test_total_is_sum_of_rows(self):
        rep = run_config(mirrored_toy(), "ns")
        assert rep.check_total()

    def test_sharing_orderings(self):
        case = mirrored_toy()
        costs = {mode: run_config(case, mode).total_cost for mode in CONFIG_MODES}
        # Individual rationality: any sharing equilibrium beats opting out.
        assert costs["ls"] <= costs["ns"] + 1e-9
        assert costs["gs"] <= costs["ns"] + 1e-9
        # Voltage does not bind here; the canonical tie-break makes the two
        # global solves agree exactly.
        assert costs["gs-nvc"] <= costs["gs"] + 1e-9
