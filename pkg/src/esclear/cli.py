"""Command-line interface: validate, gen, bestresp, clear, compare, bench.

Exit codes: 0 success, 1 domain error (bad data, infeasible, unreachable
target), 2 usage error (argparse).  All emitted numbers use 12 significant
digits; result.json is byte-stable across runs except its timings block.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time
from pathlib import Path

from .bestresp import Mode, build_best_response
from .caseio import load_case, save_case
from .clearing import CONFIG_MODES, ClearOptions, clear_market, run_config
from .errors import DomainError
from .model import to_per_unit
from .scenarios import ScenarioTemplate, generate_case


def _fmt(x: float) -> str:
    return f"{x:.12g}"


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) if isinstance(v, float) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _clear_options(args) -> ClearOptions:
    return ClearOptions(
        gap_tol=args.gap,
        node_limit=args.node_limit,
        workers=args.workers,
        disable_voltage=getattr(args, "no_voltage", False),
        strict=getattr(args, "strict", False),
    )


def cmd_validate(args) -> int:
    vcase = load_case(args.case)
    n_markets = len(vcase.lesms)
    n_prosumers = sum(m.n for m in vcase.lesms)
    print(
        f"ok: {len(vcase.nodes)} nodes, {len(vcase.branches)} branches, "
        f"{n_markets} markets, {n_prosumers} prosumers"
    )
    return 0


def cmd_gen(args) -> int:
    if args.template != "three-region":
        raise DomainError(f"unknown template {args.template!r}")
    template = ScenarioTemplate(
        nodes=args.nodes,
        prosumers=args.prosumers,
        seed=args.seed,
        topology=args.topology,
    )
    case = generate_case(template)
    save_case(case, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_bestresp(args) -> int:
    vcase = load_case(args.case)
    pu = to_per_unit(vcase)
    lesm = pu.lesm_at(args.lesm)
    if lesm is None:
        raise DomainError(f"no market on node {args.lesm}")
    br = build_best_response(lesm)
    f = br.x_of_w0 if args.function == "x" else br.p_of_x
    rows = []
    for j in range(f.num_segments):
        lo, hi = f.segment_interval(j)
        modes = ""
        if args.function == "x":
            modes = "|".join(Mode(m).name for m in br.states[j])
        rows.append([j, lo, hi, f.slopes[j], f.intercepts[j], modes])
    _write_csv(
        Path(args.out),
        ["segment_index", "t_lo", "t_hi", "slope", "intercept", "modes"],
        rows,
    )
    print(f"wrote {args.out} ({f.num_segments} segments)")
    return 0


def _write_clear_outputs(result, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = result.to_dict()
    (out_dir / "result.json").write_text(json.dumps(doc, indent=2) + "\n")
    _write_csv(
        out_dir / "voltages.csv",
        ["node", "v_pu_magnitude"],
        [[n["node"], n["v_pu_magnitude"]] for n in doc["nodes"]],
    )
    _write_csv(
        out_dir / "prices.csv",
        ["node", "w0", "w", "X", "P"],
        [[m["node"], m["w0"], m["w"], m["x_kw"], m["p_kw"]] for m in doc["markets"]],
    )


def cmd_clear(args) -> int:
    vcase = load_case(args.case)
    result = clear_market(vcase, _clear_options(args))
    _write_clear_outputs(result, Path(args.out))
    status = "ok" if all(m.verification.passed for m in result.markets) else "warnings"
    print(
        f"{status}: objective {_fmt(result.objective)} p.u., "
        f"gap {_fmt(result.gap_rel)}, {result.bnb_nodes} nodes"
    )
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def cmd_compare(args) -> int:
    vcase = load_case(args.case)
    modes = [m.strip().lower() for m in args.modes.split(",") if m.strip()]
    for m in modes:
        if m not in CONFIG_MODES:
            raise DomainError(f"unknown mode {m!r}; choose from {CONFIG_MODES}")
    opts = _clear_options(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = [run_config(vcase, m, opts) for m in modes]
    _write_csv(
        out_dir / "costs.csv",
        ["config", "total_cost_usd", "avg_cost_usd_per_kwh"],
        [[r.mode, r.total_cost, r.avg_cost_per_kwh] for r in reports],
    )
    _write_csv(
        out_dir / "prosumer_costs.csv",
        ["config", "node", "prosumer", "cost_usd", "x_kw", "p_kw"],
        [
            [r.mode, row["node"], row["prosumer"], row["cost"], row["x_kw"], row["p_kw"]]
            for r in reports
            for row in r.per_prosumer
        ],
    )
    for r in reports:
        print(f"{r.mode}: total {_fmt(r.total_cost)} $, avg {_fmt(r.avg_cost_per_kwh)} $/kWh")
    return 0


def cmd_bench(args) -> int:
    vcase = load_case(args.case)
    opts = _clear_options(args)
    phases = ("best_response_s", "misocp_s", "verification_s")
    samples: dict[str, list[float]] = {p: [] for p in phases}
    totals = []
    for _ in range(args.repeat):
        t0 = time.perf_counter()
        result = clear_market(vcase, opts)
        totals.append(time.perf_counter() - t0)
        for p in phases:
            samples[p].append(result.timings[p])
    report = {
        "case": str(args.case),
        "repeat": args.repeat,
        "workers": opts.workers,
        "median_s": {p: statistics.median(samples[p]) for p in phases},
        "median_total_s": statistics.median(totals),
    }
    print(json.dumps(report, indent=2))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="esclear",
        description="Two-layer energy-sharing market clearing on radial feeders",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="parse and validate a case file")
    p.add_argument("--case", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("gen", help="generate a scenario case file")
    p.add_argument("--template", default="three-region")
    p.add_argument("--nodes", type=int, default=15)
    p.add_argument("--prosumers", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--topology", choices=("path", "tree"), default="path")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("bestresp", help="dump a market's best-response polyline")
    p.add_argument("--case", required=True)
    p.add_argument("--lesm", type=int, required=True, help="host node id")
    p.add_argument("--function", choices=("x", "p"), default="x")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bestresp)

    def add_solve_flags(p):
        p.add_argument("--gap", type=float, default=1e-6)
        p.add_argument("--node-limit", type=int, default=5000)
        p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("clear", help="clear the market end to end")
    p.add_argument("--case", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-voltage", action="store_true")
    p.add_argument("--strict", action="store_true")
    add_solve_flags(p)
    p.set_defaults(func=cmd_clear)

    p = sub.add_parser("compare", help="compare market configurations")
    p.add_argument("--case", required=True)
    p.add_argument("--modes", default="ns,ls,gs,gs-nvc")
    p.add_argument("--out", required=True)
    add_solve_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("bench", help="repeat clearing and report phase medians")
    p.add_argument("--case", required=True)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--out", default=None)
    add_solve_flags(p)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DomainError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
