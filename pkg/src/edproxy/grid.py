"""Grid case model: MATPOWER parsing, PTDF computation, normalization.

Only the sections needed for DC economic dispatch are read from a case file
(baseMVA, bus, branch, gen, gencost); everything else is ignored.  All
quantities are stored per-unit on the system MVA base.

Branch orientation convention: flow is positive from ``from_bus`` to
``to_bus``.  A positive injection at bus i (withdrawn at the slack) therefore
produces a positive PTDF entry on branches oriented away from i toward the
slack.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, asdict

import numpy as np

logger = logging.getLogger(__name__)


class CaseFormatError(ValueError):
    """Raised when a case file cannot be parsed (carries a line number)."""


class CaseValidationError(ValueError):
    """Raised when parsed case data is internally inconsistent."""


@dataclass
class Bus:
    id: int
    demand_pu: float


@dataclass
class Branch:
    from_bus: int
    to_bus: int
    reactance_pu: float
    flow_min_pu: float
    flow_max_pu: float
    in_service: bool = True


@dataclass
class Generator:
    bus: int
    p_min_pu: float
    p_max_pu: float
    r_max_pu: float
    cost_linear: float
    cost_const: float = 0.0
    cost_quad: float = 0.0


@dataclass
class SystemCase:
    """Parsed grid case in per-unit, plus the PTDF matrix once computed."""

    base_mva: float
    buses: list[Bus]
    branches: list[Branch]
    generators: list[Generator]
    slack_bus: int
    ptdf: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    # -- derived views -------------------------------------------------

    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    def demand_vector(self) -> np.ndarray:
        return np.array([b.demand_pu for b in self.buses], dtype=np.float64)

    def gen_bus_positions(self) -> np.ndarray:
        idx = self.bus_index()
        return np.array([idx[g.bus] for g in self.generators], dtype=np.int64)

    def p_max(self) -> np.ndarray:
        return np.array([g.p_max_pu for g in self.generators], dtype=np.float64)

    def r_max(self) -> np.ndarray:
        return np.array([g.r_max_pu for g in self.generators], dtype=np.float64)

    def cost_linear(self) -> np.ndarray:
        return np.array([g.cost_linear for g in self.generators], dtype=np.float64)

    def flow_limits(self) -> tuple[np.ndarray, np.ndarray]:
        fmin = np.array([br.flow_min_pu for br in self.branches], dtype=np.float64)
        fmax = np.array([br.flow_max_pu for br in self.branches], dtype=np.float64)
        return fmin, fmax


# ---------------------------------------------------------------------------
# MATPOWER text parsing
# ---------------------------------------------------------------------------

_MATRIX_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[")
_SCALAR_RE = re.compile(r"mpc\.(\w+)\s*=\s*([0-9eE+.\-]+)\s*;")

# column positions in the MATPOWER spec (0-based)
_BUS_I, _BUS_TYPE, _BUS_PD = 0, 1, 2
_BR_F, _BR_T, _BR_X, _BR_RATE_A, _BR_STATUS = 0, 1, 3, 5, 10
_GEN_BUS, _GEN_STATUS, _GEN_PMAX, _GEN_PMIN = 0, 7, 8, 9

_REF_BUS_TYPE = 3


def _strip_comment(line: str) -> str:
    pos = line.find("%")
    return line if pos < 0 else line[:pos]


def _parse_matrices(text: str) -> tuple[dict[str, list[list[float]]], dict[str, float]]:
    """Extract numeric mpc.* matrices and scalars; ignore everything else."""
    matrices: dict[str, list[list[float]]] = {}
    scalars: dict[str, float] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        raw = _strip_comment(lines[i])
        m = _SCALAR_RE.search(raw)
        if m:
            scalars[m.group(1)] = float(m.group(2))
            i += 1
            continue
        m = _MATRIX_RE.search(raw)
        if m is None:
            i += 1
            continue
        name = m.group(1)
        rows: list[list[float]] = []
        buf = raw[m.end():]
        start_line = i
        closed = False
        while i < len(lines):
            end = buf.find("]")
            chunk, done = (buf[:end], True) if end >= 0 else (buf, False)
            for stmt in chunk.split(";"):
                stmt = stmt.strip()
                if not stmt:
                    continue
                try:
                    rows.append([float(tok) for tok in stmt.replace(",", " ").split()])
                except ValueError as exc:
                    raise CaseFormatError(
                        f"line {i + 1}: malformed numeric field in mpc.{name}: {exc}"
                    ) from None
            if done:
                closed = True
                break
            i += 1
            if i < len(lines):
                buf = _strip_comment(lines[i])
        if not closed:
            raise CaseFormatError(f"line {start_line + 1}: unterminated matrix mpc.{name}")
        matrices[name] = rows
        i += 1
    return matrices, scalars


def parse_case(text: str) -> SystemCase:
    """Parse MATPOWER-format case text into a per-unit :class:`SystemCase`.

    Out-of-service branches and generators (status 0) are dropped.  Quadratic
    and constant cost terms are kept on the generator records but the LP
    objective downstream uses only the linear coefficient.
    """
    matrices, scalars = _parse_matrices(text)
    for required in ("bus", "branch", "gen"):
        if required not in matrices:
            raise CaseFormatError(f"case file has no mpc.{required} section")
    if "baseMVA" not in scalars:
        raise CaseFormatError("case file has no mpc.baseMVA")
    base = scalars["baseMVA"]
    if base <= 0:
        raise CaseValidationError(f"baseMVA must be positive, got {base}")

    buses = [Bus(id=int(row[_BUS_I]), demand_pu=row[_BUS_PD] / base) for row in matrices["bus"]]
    bus_ids = {b.id for b in buses}
    if len(bus_ids) != len(buses):
        raise CaseValidationError("duplicate bus ids in mpc.bus")

    slack = None
    for row in matrices["bus"]:
        if int(row[_BUS_TYPE]) == _REF_BUS_TYPE:
            slack = int(row[_BUS_I])
            break
    if slack is None:
        raise CaseValidationError("no reference-type (type 3) bus in mpc.bus")

    branches = []
    for k, row in enumerate(matrices["branch"]):
        status = int(row[_BR_STATUS]) if len(row) > _BR_STATUS else 1
        if status == 0:
            continue
        f, t = int(row[_BR_F]), int(row[_BR_T])
        if f not in bus_ids or t not in bus_ids:
            raise CaseValidationError(f"branch {k + 1} references unknown bus {f if f not in bus_ids else t}")
        x = row[_BR_X]
        if x == 0.0:
            raise CaseValidationError(f"branch {k + 1} ({f}-{t}) is in service with zero reactance")
        rate = row[_BR_RATE_A] / base if row[_BR_RATE_A] > 0 else np.inf
        branches.append(Branch(from_bus=f, to_bus=t, reactance_pu=x,
                               flow_min_pu=-rate, flow_max_pu=rate))

    gencost = matrices.get("gencost", [])
    generators = []
    for k, row in enumerate(matrices["gen"]):
        status = int(row[_GEN_STATUS]) if len(row) > _GEN_STATUS else 1
        if status == 0:
            continue
        bus = int(row[_GEN_BUS])
        if bus not in bus_ids:
            raise CaseValidationError(f"generator {k + 1} references unknown bus {bus}")
        c_lin, c_const, c_quad = 0.0, 0.0, 0.0
        if k < len(gencost):
            crow = gencost[k]
            model, ncost = int(crow[0]), int(crow[3])
            if model != 2:
                raise CaseValidationError(
                    f"gencost row {k + 1}: only polynomial cost model 2 is supported"
                )
            coeffs = crow[4:4 + ncost]  # highest order first
            if ncost >= 1:
                c_const = coeffs[-1]
            if ncost >= 2:
                c_lin = coeffs[-2]
            if ncost >= 3:
                c_quad = coeffs[-3]
                if c_quad != 0.0:
                    logger.info("generator %d: discarding quadratic cost term %g", k + 1, c_quad)
        p_min, p_max = row[_GEN_PMIN] / base, row[_GEN_PMAX] / base
        if p_min > p_max:
            raise CaseValidationError(f"generator {k + 1}: p_min {p_min} > p_max {p_max}")
        generators.append(Generator(bus=bus, p_min_pu=p_min, p_max_pu=p_max,
                                    r_max_pu=max(p_max, 0.0), cost_linear=c_lin,
                                    cost_const=c_const, cost_quad=c_quad))

    return SystemCase(base_mva=base, buses=buses, branches=branches,
                      generators=generators, slack_bus=slack)


# ---------------------------------------------------------------------------
# PTDF
# ---------------------------------------------------------------------------


def compute_ptdf(case: SystemCase, slack: int | None = None) -> np.ndarray:
    """Compute the dense PTDF matrix (|E| x |N|) from the DC susceptance model.

    Entry [e, i] is the sensitivity of the flow on branch e to a unit
    injection at bus i withdrawn at the slack; the slack column is zero.
    """
    if slack is None:
        slack = case.slack_bus
    idx = case.bus_index()
    if slack not in idx:
        raise CaseValidationError(f"slack bus {slack} not in case")
    n = len(case.buses)
    branches = [br for br in case.branches if br.in_service]
    m = len(branches)

    # connectivity check on the in-service graph
    adj: list[list[int]] = [[] for _ in range(n)]
    for br in branches:
        f, t = idx[br.from_bus], idx[br.to_bus]
        adj[f].append(t)
        adj[t].append(f)
    seen = np.zeros(n, dtype=bool)
    stack = [idx[slack]]
    seen[idx[slack]] = True
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                stack.append(v)
    if not seen.all():
        isolated = case.buses[int(np.flatnonzero(~seen)[0])].id
        raise CaseValidationError(f"network is disconnected: bus {isolated} unreachable from slack")

    b = np.array([1.0 / br.reactance_pu for br in branches])
    inc = np.zeros((m, n))
    for e, br in enumerate(branches):
        inc[e, idx[br.from_bus]] = 1.0
        inc[e, idx[br.to_bus]] = -1.0
    b_bus = inc.T @ (b[:, None] * inc)
    keep = [i for i in range(n) if i != idx[slack]]
    b_red = b_bus[np.ix_(keep, keep)]
    try:
        inv_red = np.linalg.inv(b_red)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"reduced susceptance matrix is singular: {exc}") from exc
    phi = np.zeros((m, n))
    phi[:, keep] = (b[:, None] * inc[:, keep]) @ inv_red
    return phi


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def normalize_case(case: SystemCase) -> tuple[SystemCase, np.ndarray]:
    """Shift generator minimums to zero and return the per-generator offsets.

    The shift p' = p - p_min is absorbed into nodal demand so the transformed
    case has the same optimal dispatch up to the recorded offset.  Reserve
    capacities are capped at the shifted maximum output, and the constant /
    quadratic cost terms are dropped from the LP objective (the linear-cost
    value of the offset is recorded in metadata).
    """
    offsets = np.array([g.p_min_pu for g in case.generators])
    demand = {b.id: b.demand_pu for b in case.buses}
    gens = []
    dropped_const = 0.0
    for g, off in zip(case.generators, offsets):
        if g.p_min_pu > g.p_max_pu:
            raise CaseValidationError(f"generator at bus {g.bus}: p_min > p_max")
        demand[g.bus] -= off
        new_pmax = g.p_max_pu - off
        dropped_const += g.cost_const + g.cost_linear * off + g.cost_quad * off * off
        gens.append(Generator(bus=g.bus, p_min_pu=0.0, p_max_pu=new_pmax,
                              r_max_pu=min(g.r_max_pu, new_pmax),
                              cost_linear=g.cost_linear, cost_const=0.0, cost_quad=0.0))
    buses = [Bus(id=b.id, demand_pu=demand[b.id]) for b in case.buses]
    meta = dict(case.metadata)
    meta["objective_offset"] = dropped_const
    meta["normalized"] = True
    return SystemCase(base_mva=case.base_mva, buses=buses, branches=list(case.branches),
                      generators=gens, slack_bus=case.slack_bus, ptdf=case.ptdf,
                      metadata=meta), offsets


# ---------------------------------------------------------------------------
# Canonical JSON snapshot
# ---------------------------------------------------------------------------


def case_to_snapshot(case: SystemCase) -> str:
    doc = {
        "base_mva": case.base_mva,
        "buses": [asdict(b) for b in case.buses],
        "branches": [_branch_dict(br) for br in case.branches],
        "generators": [asdict(g) for g in case.generators],
        "slack_bus": case.slack_bus,
        "metadata": case.metadata,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _branch_dict(br: Branch) -> dict:
    d = asdict(br)
    # JSON has no inf literal; rated limits use null for "unlimited"
    if not np.isfinite(d["flow_max_pu"]):
        d["flow_max_pu"] = None
        d["flow_min_pu"] = None
    return d


def case_from_snapshot(text: str) -> SystemCase:
    doc = json.loads(text)
    branches = []
    for d in doc["branches"]:
        fmax = d["flow_max_pu"] if d["flow_max_pu"] is not None else np.inf
        fmin = d["flow_min_pu"] if d["flow_min_pu"] is not None else -np.inf
        branches.append(Branch(from_bus=d["from_bus"], to_bus=d["to_bus"],
                               reactance_pu=d["reactance_pu"], flow_min_pu=fmin,
                               flow_max_pu=fmax, in_service=d["in_service"]))
    return SystemCase(
        base_mva=doc["base_mva"],
        buses=[Bus(**b) for b in doc["buses"]],
        branches=branches,
        generators=[Generator(**g) for g in doc["generators"]],
        slack_bus=doc["slack_bus"],
        metadata=doc.get("metadata", {}),
    )


def load_case(path: str, slack: int | None = None) -> SystemCase:
    """Load a case from a MATPOWER .m file or a JSON snapshot, with PTDF."""
    with open(path) as fh:
        text = fh.read()
    if path.endswith(".json") or text.lstrip().startswith("{"):
        case = case_from_snapshot(text)
    else:
        case = parse_case(text)
    if slack is not None:
        case.slack_bus = slack
    case.ptdf = compute_ptdf(case)
    return case
