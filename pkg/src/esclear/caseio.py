"""Case file serialization: versioned JSON with a closed schema.

Field names are normative; unknown keys are rejected so typos fail loudly
rather than silently defaulting.  Loading validates the case, so a file
that parses always yields a usable :class:`ValidatedCase`.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import CaseError, ParseError, UnsupportedVersion
from .model import (
    BranchSpec,
    LesmSpec,
    NetworkCase,
    NodeSpec,
    ProsumerParams,
    ValidatedCase,
    validate_case,
)

FORMAT_VERSION = 1

_NODE_KEYS = {"id", "is_slack", "v_min_pu", "v_max_pu", "q_min_pu", "q_max_pu"}
_BRANCH_KEYS = {"from", "to", "r_pu", "x_pu", "l_max_pu"}
_LESM_KEYS = {"node", "a", "w_plus", "w_minus", "prosumers"}
_PROSUMER_KEYS = {"c", "b", "d_kw", "p_max_kw"}
_TOP_KEYS = {"format_version", "base_power_kw", "nodes", "branches", "lesms"}


def _require_keys(obj: dict, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ParseError(f"{where}: unknown keys {sorted(unknown)}")
    missing = allowed - set(obj)
    if missing:
        raise ParseError(f"{where}: missing keys {sorted(missing)}")


def _num(obj: dict, key: str, where: str) -> float:
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ParseError(f"{where}.{key}: expected a number, got {v!r}")
    return float(v)


def case_to_dict(case: NetworkCase) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "base_power_kw": case.base_power,
        "nodes": [
            {
                "id": n.id,
                "is_slack": n.is_slack,
                "v_min_pu": n.v_min,
                "v_max_pu": n.v_max,
                "q_min_pu": n.q_min,
                "q_max_pu": n.q_max,
            }
            for n in case.nodes
        ],
        "branches": [
            {
                "from": b.from_node,
                "to": b.to_node,
                "r_pu": b.r,
                "x_pu": b.x,
                "l_max_pu": b.l_max,
            }
            for b in case.branches
        ],
        "lesms": [
            {
                "node": m.node_id,
                "a": m.a,
                "w_plus": m.w_plus,
                "w_minus": m.w_minus,
                "prosumers": [
                    {"c": p.c, "b": p.b, "d_kw": p.d, "p_max_kw": p.p_max}
                    for p in m.prosumers
                ],
            }
            for m in case.lesms
        ],
    }


def case_from_dict(doc: dict) -> NetworkCase:
    if not isinstance(doc, dict):
        raise ParseError("top level must be an object")
    if "format_version" not in doc:
        raise UnsupportedVersion("missing format_version")
    if doc["format_version"] != FORMAT_VERSION:
        raise UnsupportedVersion(f"format_version {doc['format_version']!r} not supported")
    _require_keys(doc, _TOP_KEYS, "top level")

    nodes = []
    for i, n in enumerate(doc["nodes"]):
        where = f"nodes[{i}]"
        _require_keys(n, _NODE_KEYS, where)
        if not isinstance(n["is_slack"], bool):
            raise ParseError(f"{where}.is_slack: expected a boolean")
        if not isinstance(n["id"], int) or isinstance(n["id"], bool) or n["id"] < 0:
            raise ParseError(f"{where}.id: expected a nonnegative integer")
        nodes.append(
            NodeSpec(
                id=n["id"],
                is_slack=n["is_slack"],
                v_min=_num(n, "v_min_pu", where),
                v_max=_num(n, "v_max_pu", where),
                q_min=_num(n, "q_min_pu", where),
                q_max=_num(n, "q_max_pu", where),
            )
        )

    branches = []
    for i, b in enumerate(doc["branches"]):
        where = f"branches[{i}]"
        _require_keys(b, _BRANCH_KEYS, where)
        branches.append(
            BranchSpec(
                from_node=int(b["from"]),
                to_node=int(b["to"]),
                r=_num(b, "r_pu", where),
                x=_num(b, "x_pu", where),
                l_max=_num(b, "l_max_pu", where),
            )
        )

    lesms = []
    for i, m in enumerate(doc["lesms"]):
        where = f"lesms[{i}]"
        _require_keys(m, _LESM_KEYS, where)
        prosumers = []
        for k, p in enumerate(m["prosumers"]):
            pwhere = f"{where}.prosumers[{k}]"
            _require_keys(p, _PROSUMER_KEYS, pwhere)
            prosumers.append(
                ProsumerParams(
                    c=_num(p, "c", pwhere),
                    b=_num(p, "b", pwhere),
                    d=_num(p, "d_kw", pwhere),
                    p_max=_num(p, "p_max_kw", pwhere),
                )
            )
        lesms.append(
            LesmSpec(
                node_id=int(m["node"]),
                a=_num(m, "a", where),
                w_plus=_num(m, "w_plus", where),
                w_minus=_num(m, "w_minus", where),
                prosumers=tuple(prosumers),
            )
        )

    return NetworkCase(
        base_power=_num(doc, "base_power_kw", "top level"),
        nodes=tuple(nodes),
        branches=tuple(branches),
        lesms=tuple(lesms),
    )


def save_case(case: NetworkCase | ValidatedCase, path: str | Path) -> None:
    if isinstance(case, ValidatedCase):
        case = case.case
    Path(path).write_text(json.dumps(case_to_dict(case), indent=2) + "\n")


def load_case(path: str | Path) -> ValidatedCase:
    """Parse and validate; invariant violations surface as ParseError with
    the offending field named."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise ParseError(f"{path}: line {err.lineno}: {err.msg}") from err
    case = case_from_dict(doc)
    try:
        return validate_case(case)
    except CaseError as err:
        raise ParseError(f"{path}: {err}") from err
