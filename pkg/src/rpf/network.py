"""Network model: case parsing, admittance assembly, and the cycle basis.

The grid is an undirected multigraph of buses and branches. Branches carry a
pi-model admittance split into the four terminal blocks (y_ff, y_ft, y_tf,
y_tt). Independent loops are represented by a fundamental cycle basis built
from a BFS spanning tree; each cycle gets a susceptance-like scale so that
loop angle sums enter the residual with current-like units.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import deque
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import (
    CaseSyntaxError,
    DegenerateCycle,
    MissingSection,
    ValidationError,
)

# Voltage-droop gains applied to generators, in table-row order, when no
# injector config supplies them. Sized for a 3-machine case; later rows fall
# back to the last entry.
DEFAULT_K_V = (130.0, 21.0, 13.0)


# ---------------------------------------------------------------------------
# data model


@dataclass(frozen=True)
class Bus:
    index: int
    name: str
    base_kv: float = 0.0
    v_min: float = 0.0
    v_max: float = float("inf")


@dataclass(frozen=True)
class Branch:
    """Pi-model branch. Admittance blocks follow the usual convention:
    terminal current drawn from bus f into the branch is y_ff*Vf + y_ft*Vt
    (complex, absolute frame), and symmetrically at t."""

    index: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_c: float = 0.0
    tap: float = 1.0
    rate: float = 0.0
    y_ff: complex = 0j
    y_ft: complex = 0j
    y_tf: complex = 0j
    y_tt: complex = 0j


@dataclass(frozen=True)
class Shunt:
    bus: int
    g: float
    b: float


@dataclass(frozen=True)
class Load:
    """Constant-power load; p/q are the case default setpoints in pu."""

    bus: int
    p: float
    q: float


@dataclass(frozen=True)
class Generator:
    """Generator with voltage droop: injects p_m active power and reacts to
    the local magnitude deviation from v_ref with gain k_v."""

    bus: int
    p_m: float
    v_ref: float
    k_v: float
    p_rated: float = 1.0
    cost: tuple[float, float, float] | None = None


@dataclass(frozen=True)
class Cycle:
    """One fundamental cycle: member branch ids in walk order with traversal
    signs (+1 when walked from_bus -> to_bus). y_scale = Im(1/sum z)."""

    index: int
    branches: tuple[int, ...]
    signs: tuple[int, ...]
    y_scale: float


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    loads: tuple[Load, ...]
    generators: tuple[Generator, ...]
    shunts: tuple[Shunt, ...]
    cycles: tuple[Cycle, ...]
    base_mva: float
    name: str = "network"

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def n_cycle(self) -> int:
        return len(self.cycles)


@dataclass
class NetworkSpec:
    """Raw parsed case tables (MATPOWER column layout, original units)."""

    base_mva: float
    bus: np.ndarray
    branch: np.ndarray
    gen: np.ndarray
    gencost: np.ndarray
    version: str | None = None
    warnings: tuple[str, ...] = field(default_factory=tuple)


# ---------------------------------------------------------------------------
# case file parsing


def _strip_comments(text: str) -> list[str]:
    # % starts a comment unless inside a single-quoted string
    out = []
    for line in text.splitlines():
        buf = []
        in_str = False
        for ch in line:
            if ch == "'":
                in_str = not in_str
                buf.append(ch)
            elif ch == "%" and not in_str:
                break
            else:
                buf.append(ch)
        out.append("".join(buf))
    return out


def _parse_matrix(parts: list[tuple[int, str]], name: str) -> np.ndarray:
    rows = []
    width = None
    for line_no, text in parts:
        for seg in text.split(";"):
            toks = seg.replace(",", " ").split()
            if not toks:
                continue
            row = []
            for tok in toks:
                try:
                    row.append(float(tok))
                except ValueError:
                    col = text.find(tok) + 1
                    raise CaseSyntaxError(
                        f"non-numeric token {tok!r} in 'mpc.{name}'", line_no, col
                    ) from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise CaseSyntaxError(
                    f"row with {len(row)} entries in 'mpc.{name}', expected {width}",
                    line_no,
                )
            rows.append(row)
    if not rows:
        return np.zeros((0, 0))
    return np.array(rows, dtype=float)


_ASSIGN_RE = re.compile(r"^\s*mpc\.([A-Za-z_]\w*)\s*=\s*(.*)$")
_KNOWN_SECTIONS = ("bus", "gen", "branch", "gencost")


def parse_matpower_case(text: str) -> NetworkSpec:
    """Parse the documented subset of the MATPOWER case format.

    Recognized: mpc.baseMVA, mpc.version, and the bus/gen/branch/gencost
    matrices. Other assignments are skipped and recorded as warnings.
    Raises CaseSyntaxError (with line/col) on malformed input and
    MissingSection if bus, branch, or baseMVA is absent.
    """
    lines = _strip_comments(text)
    matrices: dict[str, np.ndarray] = {}
    base_mva = None
    version = None
    warnings: list[str] = []

    i = 0
    while i < len(lines):
        m = _ASSIGN_RE.match(lines[i])
        if m is None:
            i += 1
            continue
        name, rest = m.group(1), m.group(2).strip()
        if rest.startswith("["):
            start = i
            parts: list[tuple[int, str]] = []
            cur = rest[1:]
            closed = False
            while True:
                if "]" in cur:
                    parts.append((i + 1, cur[: cur.index("]")]))
                    closed = True
                    break
                parts.append((i + 1, cur))
                i += 1
                if i >= len(lines):
                    break
                cur = lines[i]
            if not closed:
                raise CaseSyntaxError(f"unterminated matrix 'mpc.{name}'", start + 1)
            if name in _KNOWN_SECTIONS:
                matrices[name] = _parse_matrix(parts, name)
            else:
                warnings.append(f"ignored unknown section 'mpc.{name}'")
        elif name == "baseMVA":
            try:
                base_mva = float(rest.rstrip(";").strip())
            except ValueError:
                raise CaseSyntaxError("non-numeric baseMVA", i + 1) from None
        elif name == "version":
            version = rest.rstrip(";").strip().strip("'\"")
        else:
            warnings.append(f"ignored scalar 'mpc.{name}'")
        i += 1

    if base_mva is None:
        raise MissingSection("case has no 'mpc.baseMVA'")
    for required in ("bus", "branch"):
        if required not in matrices or matrices[required].size == 0:
            raise MissingSection(f"case has no 'mpc.{required}' table")

    return NetworkSpec(
        base_mva=base_mva,
        bus=matrices["bus"],
        branch=matrices["branch"],
        gen=matrices.get("gen", np.zeros((0, 0))),
        gencost=matrices.get("gencost", np.zeros((0, 0))),
        version=version,
        warnings=tuple(warnings),
    )


def _fmt(x: float) -> str:
    f = float(x)
    if f == int(f) and abs(f) < 1e15:
        return str(int(f))
    return repr(f)


def matpower_text(spec: NetworkSpec, name: str = "case") -> str:
    """Serialize a NetworkSpec back to case-file text (round-trips through
    parse_matpower_case)."""
    lines = [f"function mpc = {name}", ""]
    if spec.version is not None:
        lines.append(f"mpc.version = '{spec.version}';")
    lines.append(f"mpc.baseMVA = {_fmt(spec.base_mva)};")
    for sect in _KNOWN_SECTIONS:
        arr = getattr(spec, sect)
        if arr.size == 0:
            continue
        lines.append(f"mpc.{sect} = [")
        for row in arr:
            lines.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
        lines.append("];")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# spanning tree and cycle basis


def spanning_tree(n_bus: int, branches) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """BFS spanning tree rooted at bus 0, scanning neighbors in branch-id
    order. Returns (parent_bus, parent_branch, bfs_order); parents are -1 at
    the root. Raises ValidationError if the graph is disconnected."""
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n_bus)]
    for br in branches:
        adj[br.from_bus].append((br.index, br.to_bus))
        adj[br.to_bus].append((br.index, br.from_bus))
    for lst in adj:
        lst.sort()

    parent_bus = np.full(n_bus, -1, dtype=int)
    parent_branch = np.full(n_bus, -1, dtype=int)
    seen = np.zeros(n_bus, dtype=bool)
    seen[0] = True
    order = [0]
    queue = deque([0])
    while queue:
        b = queue.popleft()
        for k, other in adj[b]:
            if not seen[other]:
                seen[other] = True
                parent_bus[other] = b
                parent_branch[other] = k
                order.append(other)
                queue.append(other)
    if not seen.all():
        missing = [i for i in range(n_bus) if not seen[i]]
        raise ValidationError(f"network is disconnected; unreachable buses {missing}")
    return parent_bus, parent_branch, np.array(order)


def cycle_scaling(branches) -> float:
    """Susceptance-like scale of a loop: Im(1/sum of member series
    impedances). Raises DegenerateCycle when the impedance sum vanishes."""
    z = sum(complex(br.r, br.x) for br in branches)
    if z == 0:
        raise DegenerateCycle("cycle has zero total series impedance")
    return (1.0 / z).imag


def cycle_basis(n_bus: int, branches) -> list[Cycle]:
    """Fundamental cycles: one per non-tree branch (in branch-id order), each
    the non-tree branch plus the tree path closing it. Signs are +1 for
    branches walked from_bus -> to_bus."""
    parent_bus, parent_branch, order = spanning_tree(n_bus, branches)
    tree = {int(k) for k in parent_branch if k >= 0}
    depth = np.zeros(n_bus, dtype=int)
    for b in order[1:]:
        depth[b] = depth[parent_bus[b]] + 1

    by_id = {br.index: br for br in branches}
    cycles = []
    for br in sorted(branches, key=lambda b: b.index):
        if br.index in tree:
            continue
        walk = [(br.index, +1)]  # traverse the generating branch f -> t
        seg_up = []  # from t climbing toward the LCA
        seg_dn = []  # from f climbing toward the LCA (reversed later)
        a, b = br.to_bus, br.from_bus
        while a != b:
            if depth[a] >= depth[b]:
                k = int(parent_branch[a])
                p = int(parent_bus[a])
                seg_up.append((k, +1 if by_id[k].from_bus == a else -1))
                a = p
            else:
                k = int(parent_branch[b])
                p = int(parent_bus[b])
                seg_dn.append((k, +1 if by_id[k].from_bus == b else -1))
                b = p
        walk += seg_up + [(k, -s) for (k, s) in reversed(seg_dn)]
        ids = tuple(k for k, _ in walk)
        signs = tuple(s for _, s in walk)
        y = cycle_scaling([by_id[k] for k in ids])
        cycles.append(Cycle(index=len(cycles), branches=ids, signs=signs, y_scale=y))
    return cycles


# ---------------------------------------------------------------------------
# network assembly


def _admittance_blocks(r, x, b_c, tap):
    if r == 0.0 and x == 0.0:
        raise ValidationError("branch with zero series impedance")
    y_s = 1.0 / complex(r, x)
    y_sh = complex(0.0, b_c / 2.0)
    y_ff = (y_s + y_sh) / (tap * tap)
    y_ft = -y_s / tap
    y_tf = -y_s / tap
    y_tt = y_s + y_sh
    return y_ff, y_ft, y_tf, y_tt


def make_branch(index, from_bus, to_bus, r, x, b_c=0.0, tap=1.0, rate=0.0) -> Branch:
    if from_bus == to_bus:
        raise ValidationError(f"branch {index} connects bus {from_bus} to itself")
    if tap <= 0.0:
        raise ValidationError(f"branch {index} has non-positive tap {tap}")
    y_ff, y_ft, y_tf, y_tt = _admittance_blocks(r, x, b_c, tap)
    return Branch(
        index=index,
        from_bus=from_bus,
        to_bus=to_bus,
        r=r,
        x=x,
        b_c=b_c,
        tap=tap,
        rate=rate,
        y_ff=y_ff,
        y_ft=y_ft,
        y_tf=y_tf,
        y_tt=y_tt,
    )


def _finish_network(buses, branches, loads, generators, shunts, base_mva, name):
    n_bus = len(buses)
    for br in branches:
        for end in (br.from_bus, br.to_bus):
            if not (0 <= end < n_bus):
                raise ValidationError(f"branch {br.index} references unknown bus {end}")
    for comp in list(loads) + list(generators) + list(shunts):
        if not (0 <= comp.bus < n_bus):
            raise ValidationError(f"injector references unknown bus {comp.bus}")
    for g in generators:
        if g.k_v <= 0.0:
            raise ValidationError(f"generator at bus {g.bus} has non-positive k_v")

    cycles = cycle_basis(n_bus, branches)
    expected = len(branches) - n_bus + 1
    if len(cycles) != expected:
        raise ValidationError(
            f"cycle count {len(cycles)} != |B| - |N| + 1 = {expected}"
        )
    return Network(
        buses=tuple(buses),
        branches=tuple(branches),
        loads=tuple(sorted(loads, key=lambda c: c.bus)),
        generators=tuple(sorted(generators, key=lambda c: c.bus)),
        shunts=tuple(sorted(shunts, key=lambda c: c.bus)),
        cycles=tuple(cycles),
        base_mva=base_mva,
        name=name,
    )


def build_network(spec: NetworkSpec, injector_params: dict | None = None,
                  name: str = "network") -> Network:
    """Build a validated per-unit Network from parsed case tables.

    injector_params maps external bus id -> {"k_v": ..., "p_rated": ...} for
    generators (see load_injector_config). Without it, k_v falls back to
    DEFAULT_K_V by generator row order and p_rated to Pmax/baseMVA.
    """
    base = spec.base_mva
    if base <= 0:
        raise ValidationError(f"baseMVA must be positive, got {base}")
    if spec.bus.shape[1] < 13:
        raise ValidationError("bus table needs 13 columns")
    if spec.branch.shape[1] < 11:
        raise ValidationError("branch table needs at least 11 columns")

    ext_ids = [int(v) for v in spec.bus[:, 0]]
    if len(set(ext_ids)) != len(ext_ids):
        raise ValidationError("duplicate bus ids in case")
    id_map = {ext: i for i, ext in enumerate(ext_ids)}

    buses = [
        Bus(
            index=i,
            name=f"bus{ext_ids[i]}",
            base_kv=float(spec.bus[i, 9]),
            v_min=float(spec.bus[i, 12]),
            v_max=float(spec.bus[i, 11]),
        )
        for i in range(len(ext_ids))
    ]

    loads = []
    shunts = []
    for i in range(len(ext_ids)):
        pd, qd = spec.bus[i, 2] / base, spec.bus[i, 3] / base
        if pd != 0.0 or qd != 0.0:
            loads.append(Load(bus=i, p=pd, q=qd))
        gs, bs = spec.bus[i, 4] / base, spec.bus[i, 5] / base
        if gs != 0.0 or bs != 0.0:
            shunts.append(Shunt(bus=i, g=gs, b=bs))

    branches = []
    for row in spec.branch:
        if row.shape[0] > 10 and row[10] == 0.0:
            continue  # out of service
        if row.shape[0] > 9 and row[9] != 0.0:
            raise ValidationError("phase-shifting transformers are not supported")
        f, t = int(row[0]), int(row[1])
        if f not in id_map or t not in id_map:
            raise ValidationError(f"branch references unknown bus {f if f not in id_map else t}")
        tap = float(row[8]) if row.shape[0] > 8 and row[8] != 0.0 else 1.0
        branches.append(
            make_branch(
                index=len(branches),
                from_bus=id_map[f],
                to_bus=id_map[t],
                r=float(row[2]),
                x=float(row[3]),
                b_c=float(row[4]),
                tap=tap,
                rate=float(row[5]) / base if row.shape[0] > 5 else 0.0,
            )
        )

    generators = []
    gen_rows = [row for row in spec.gen if row.shape[0] < 8 or row[7] > 0]
    for j, row in enumerate(gen_rows):
        ext = int(row[0])
        if ext not in id_map:
            raise ValidationError(f"generator references unknown bus {ext}")
        params = (injector_params or {}).get(ext, {})
        k_v = float(params.get("k_v", DEFAULT_K_V[min(j, len(DEFAULT_K_V) - 1)]))
        pmax = float(row[8]) / base if row.shape[0] > 8 else 0.0
        p_rated = float(params.get("p_rated", pmax if pmax > 0 else 1.0))
        cost = None
        if spec.gencost.size and j < spec.gencost.shape[0]:
            crow = spec.gencost[j]
            if crow[0] == 2.0 and int(crow[3]) == 3:
                cost = (float(crow[4]), float(crow[5]), float(crow[6]))
        generators.append(
            Generator(
                bus=id_map[ext],
                p_m=float(row[1]) / base,
                v_ref=float(row[5]),
                k_v=k_v,
                p_rated=p_rated,
                cost=cost,
            )
        )

    return _finish_network(buses, branches, loads, generators, shunts, base, name)


# ---------------------------------------------------------------------------
# JSON form (already per-unit)


def network_from_json(obj: dict, name: str | None = None) -> Network:
    """Build a Network from the JSON schema: arrays buses, branches, loads,
    generators (optionally shunts) and scalar base_mva; all values per-unit."""
    for key in ("buses", "branches", "base_mva"):
        if key not in obj:
            raise MissingSection(f"network json has no '{key}'")
    ids = [int(b["id"]) for b in obj["buses"]]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate bus ids in network json")
    lookup = {ext: i for i, ext in enumerate(ids)}

    class _IdMap(dict):
        def __missing__(self, key):
            raise ValidationError(f"reference to unknown bus id {key}")

    id_map = _IdMap(lookup)
    buses = [
        Bus(
            index=i,
            name=str(b.get("name", f"bus{ids[i]}")),
            base_kv=float(b.get("base_kv", 0.0)),
            v_min=float(b.get("v_min", 0.0)),
            v_max=float(b.get("v_max", float("inf"))),
        )
        for i, b in enumerate(obj["buses"])
    ]
    branches = [
        make_branch(
            index=k,
            from_bus=id_map[int(row["from"])],
            to_bus=id_map[int(row["to"])],
            r=float(row["r"]),
            x=float(row["x"]),
            b_c=float(row.get("b", 0.0)),
            tap=float(row.get("tap", 1.0)),
            rate=float(row.get("rate", 0.0)),
        )
        for k, row in enumerate(obj["branches"])
    ]
    loads = [
        Load(bus=id_map[int(l["bus"])], p=float(l["p"]), q=float(l["q"]))
        for l in obj.get("loads", [])
    ]
    generators = [
        Generator(
            bus=id_map[int(g["bus"])],
            p_m=float(g.get("p_m", 0.0)),
            v_ref=float(g.get("v_ref", 1.0)),
            k_v=float(g["k_v"]),
            p_rated=float(g.get("p_rated", 1.0)),
            cost=tuple(g["cost"]) if g.get("cost") is not None else None,
        )
        for g in obj.get("generators", [])
    ]
    shunts = [
        Shunt(bus=id_map[int(s["bus"])], g=float(s.get("g", 0.0)), b=float(s.get("b", 0.0)))
        for s in obj.get("shunts", [])
    ]
    return _finish_network(
        buses, branches, loads, generators, shunts,
        float(obj["base_mva"]), name or str(obj.get("name", "network")),
    )


def network_to_json(network: Network) -> dict:
    return {
        "name": network.name,
        "base_mva": network.base_mva,
        "buses": [
            {
                "id": b.index + 1,
                "name": b.name,
                "base_kv": b.base_kv,
                "v_min": b.v_min,
                "v_max": b.v_max if np.isfinite(b.v_max) else None,
            }
            for b in network.buses
        ],
        "branches": [
            {
                "from": br.from_bus + 1,
                "to": br.to_bus + 1,
                "r": br.r,
                "x": br.x,
                "b": br.b_c,
                "tap": br.tap,
                "rate": br.rate,
            }
            for br in network.branches
        ],
        "loads": [{"bus": l.bus + 1, "p": l.p, "q": l.q} for l in network.loads],
        "generators": [
            {
                "bus": g.bus + 1,
                "p_m": g.p_m,
                "v_ref": g.v_ref,
                "k_v": g.k_v,
                "p_rated": g.p_rated,
                "cost": list(g.cost) if g.cost else None,
            }
            for g in network.generators
        ],
        "shunts": [{"bus": s.bus + 1, "g": s.g, "b": s.b} for s in network.shunts],
    }


def network_fingerprint(network: Network) -> str:
    """sha256 over the canonical structural serialization (name excluded)."""
    obj = network_to_json(network)
    obj.pop("name", None)
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# loading helpers


def load_injector_config(path) -> dict:
    """Read the generator parameter sidecar: a JSON list of objects
    {"bus": <external id>, "k_v": ..., "p_rated": ...}."""
    with open(path) as fh:
        entries = json.load(fh)
    out = {}
    for e in entries:
        out[int(e["bus"])] = {k: float(v) for k, v in e.items() if k != "bus"}
    return out


def load_network(path, injector_params: dict | None = None,
                 name: str | None = None) -> Network:
    """Load a network from a .m case file or a .json network description."""
    path = str(path)
    with open(path) as fh:
        text = fh.read()
    if path.endswith(".json"):
        return network_from_json(json.loads(text), name=name)
    spec = parse_matpower_case(text)
    stem = path.rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return build_network(spec, injector_params, name=name or stem)


def case9_text() -> str:
    return resources.files("rpf.cases").joinpath("case9.m").read_text()


def case9(injector_params: dict | None = None) -> Network:
    """The bundled 9-bus, 3-generator, 9-branch ring network."""
    spec = parse_matpower_case(case9_text())
    return build_network(spec, injector_params, name="case9")
