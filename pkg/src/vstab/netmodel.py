"""Static network model: buses, branches, machines, loads and compensators.

Files carry engineering units (MW, Mvar, kV); branch impedances are already
per-unit on the system base, as in the usual case-file convention.  Everything
handed to the solvers is per-unit on ``Network.mva_base``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import scipy.sparse as sp

SLACK, PV, PQ = "Slack", "PV", "PQ"
STATIC, DYNAMIC = "Static", "Dynamic"


class NetworkError(ValueError):
    """Raised for invalid network data (schema, ids, topology)."""


@dataclass(frozen=True)
class AVRParams:
    ka: float
    ta: float
    efd_min: float = -5.0
    efd_max: float = 5.0


@dataclass(frozen=True)
class GovernorParams:
    r: float
    tg: float
    pmax: float  # MW


@dataclass(frozen=True)
class DynamicModelParams:
    """Machine parameters on the machine's own MVA base.

    ``model`` is ``"two_axis"`` (flux decay on both axes) or ``"classical"``
    (constant EMF behind transient reactance; ``xq_p`` is forced to ``xd_p``).
    """

    h: float
    d: float = 0.0
    xd: float = 1.8
    xq: float = 1.7
    xd_p: float = 0.3
    xq_p: float = 0.55
    td0_p: float = 6.0
    tq0_p: float = 0.5
    ra: float = 0.0
    model: str = "two_axis"
    avr: AVRParams | None = None
    governor: GovernorParams | None = None

    def __post_init__(self):
        if self.model not in ("two_axis", "classical"):
            raise NetworkError(f"unknown machine model {self.model!r}")
        if self.h <= 0:
            raise NetworkError("inertia h must be positive")
        if self.model == "two_axis":
            if not (self.xd >= self.xd_p > 0) or not (self.xq >= self.xq_p > 0):
                raise NetworkError("require xd >= xd' > 0 and xq >= xq' > 0")
            if self.td0_p <= 0 or self.tq0_p <= 0:
                raise NetworkError("time constants must be positive")
        elif self.xd_p <= 0:
            raise NetworkError("xd' must be positive")
        if self.avr is not None and self.avr.ta <= 0:
            raise NetworkError("AVR time constant must be positive")
        if self.governor is not None and (self.governor.tg <= 0 or self.governor.r <= 0):
            raise NetworkError("governor droop and time constant must be positive")


@dataclass(frozen=True)
class Bus:
    id: int
    name: str = ""
    base_kv: float = 345.0
    kind: str = PQ
    v_setpoint: float | None = None
    g_shunt: float = 0.0  # MW at 1 pu
    b_shunt: float = 0.0  # Mvar at 1 pu


@dataclass(frozen=True)
class Branch:
    id: str
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_shunt: float = 0.0
    tap: float = 1.0
    rating: float = 0.0
    in_service: bool = True

    @property
    def label(self) -> str:
        return f"{self.from_bus}-{self.to_bus}"


@dataclass(frozen=True)
class Load:
    id: str
    bus: int
    p: float
    q: float


@dataclass(frozen=True)
class Machine:
    id: str
    bus: int
    p: float
    v_setpoint: float
    q_min: float = -9999.0
    q_max: float = 9999.0
    mva_base: float = 100.0
    in_service: bool = True
    dynamic_params: DynamicModelParams | None = None


@dataclass(frozen=True)
class Compensator:
    bus: int
    q_rating: float
    kind: str = STATIC
    response_time: float | None = None
    # Only Dynamic devices with an explicit setpoint regulate in power flow.
    v_setpoint: float | None = None

    def __post_init__(self):
        if self.q_rating < 0:
            raise NetworkError("compensator q_rating must be >= 0")
        if self.kind not in (STATIC, DYNAMIC):
            raise NetworkError(f"unknown compensator kind {self.kind!r}")
        if self.kind == DYNAMIC and self.response_time is not None and self.response_time <= 0:
            raise NetworkError("response_time must be positive")


@dataclass(frozen=True)
class Network:
    mva_base: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    loads: tuple[Load, ...] = ()
    machines: tuple[Machine, ...] = ()
    compensators: tuple[Compensator, ...] = ()
    f_hz: float = 60.0
    name: str = ""

    def __post_init__(self):
        validate(self)

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def slack_bus(self) -> Bus:
        return next(b for b in self.buses if b.kind == SLACK)

    def machine(self, key: str | int) -> Machine:
        """Look up a machine by id, or by bus id when exactly one machine sits there."""
        for m in self.machines:
            if m.id == str(key):
                return m
        at_bus = [m for m in self.machines if str(m.bus) == str(key)]
        if len(at_bus) == 1:
            return at_bus[0]
        raise NetworkError(f"unknown machine {key!r}")

    def branch(self, key: str | int) -> Branch:
        """Look up a branch by id or by ``"from-to"`` label (either orientation)."""
        for br in self.branches:
            if br.id == str(key):
                return br
        text = str(key)
        if "-" in text:
            a, b = (int(s) for s in text.split("-", 1))
            hits = [br for br in self.branches if {br.from_bus, br.to_bus} == {a, b}]
            if hits:
                return hits[0]
        raise NetworkError(f"unknown branch {key!r}")

    def lines(self) -> list[Branch]:
        """Branches joining buses of equal nominal voltage without off-nominal tap."""
        kv = {b.id: b.base_kv for b in self.buses}
        return [br for br in self.branches if br.tap == 1.0 and kv[br.from_bus] == kv[br.to_bus]]

    def replace(self, **changes) -> "Network":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return network_to_dict(self)

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


def validate(net: Network) -> None:
    if net.mva_base <= 0:
        raise NetworkError("mva_base must be positive")
    ids = [b.id for b in net.buses]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise NetworkError(f"duplicate bus id(s): {dup}")
    known = set(ids)
    slacks = [b for b in net.buses if b.kind == SLACK]
    if not slacks:
        raise NetworkError("no slack bus")
    if len(slacks) > 1:
        raise NetworkError("multiple slack buses: " + ", ".join(str(b.id) for b in slacks))
    for b in net.buses:
        if b.kind not in (SLACK, PV, PQ):
            raise NetworkError(f"bus {b.id}: unknown kind {b.kind!r}")
        if b.base_kv <= 0:
            raise NetworkError(f"bus {b.id}: base_kv must be positive")
    for kind, items in (("branch", net.branches), ("load", net.loads), ("machine", net.machines)):
        seen = [it.id for it in items]
        if len(set(seen)) != len(seen):
            raise NetworkError(f"duplicate {kind} id")
    for br in net.branches:
        if br.from_bus not in known or br.to_bus not in known:
            raise NetworkError(f"branch {br.id}: unknown bus")
        if br.from_bus == br.to_bus:
            raise NetworkError(f"branch {br.id}: from == to")
        if br.r == 0 and br.x == 0:
            raise NetworkError(f"branch {br.id}: zero impedance")
        if br.tap <= 0:
            raise NetworkError(f"branch {br.id}: tap must be positive")
    for ld in net.loads:
        if ld.bus not in known:
            raise NetworkError(f"load {ld.id}: unknown bus {ld.bus}")
    for m in net.machines:
        if m.bus not in known:
            raise NetworkError(f"machine {m.id}: unknown bus {m.bus}")
        if m.q_min > m.q_max:
            raise NetworkError(f"machine {m.id}: q_min > q_max")
    for c in net.compensators:
        if c.bus not in known:
            raise NetworkError(f"compensator at unknown bus {c.bus}")
    for b in net.buses:
        if b.kind in (SLACK, PV) and b.v_setpoint is None:
            if not any(m.bus == b.id and m.in_service for m in net.machines):
                raise NetworkError(f"bus {b.id}: {b.kind} bus needs a v_setpoint or a machine")
    _check_connected(net)


def _check_connected(net: Network) -> None:
    adj: dict[int, set[int]] = {b.id: set() for b in net.buses}
    for br in net.branches:
        if br.in_service:
            adj[br.from_bus].add(br.to_bus)
            adj[br.to_bus].add(br.from_bus)
    start = net.buses[0].id
    seen = {start}
    todo = deque([start])
    while todo:
        for nb in adj[todo.popleft()]:
            if nb not in seen:
                seen.add(nb)
                todo.append(nb)
    if len(seen) != len(adj):
        islanded = sorted(set(adj) - seen)
        raise NetworkError(f"disconnected network; unreachable buses {islanded}")


# --------------------------------------------------------------------- I/O

_TOP_KEYS = {"mva_base", "buses", "branches", "loads", "machines", "compensators", "f_hz", "name"}


def _req(obj: dict, key: str, where: str):
    if key not in obj:
        raise NetworkError(f"{where}: missing field '{key}'")
    return obj[key]


def _num(obj: dict, key: str, where: str, default=None) -> float:
    if key not in obj or obj[key] is None:
        if default is None:
            raise NetworkError(f"{where}: missing field '{key}'")
        return default
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise NetworkError(f"{where}: field '{key}' must be a number, got {val!r}")
    return float(val)


def _dynamic_from_dict(d: dict | None, where: str) -> DynamicModelParams | None:
    if d is None:
        return None
    avr = d.get("avr")
    gov = d.get("governor")
    fields = {k: v for k, v in d.items() if k not in ("avr", "governor")}
    try:
        return DynamicModelParams(
            **fields,
            avr=AVRParams(**avr) if avr else None,
            governor=GovernorParams(**gov) if gov else None,
        )
    except TypeError as exc:
        raise NetworkError(f"{where}.dynamic: {exc}") from None


def network_from_dict(data: dict[str, Any]) -> Network:
    if not isinstance(data, dict):
        raise NetworkError("network document must be a JSON object")
    extra = set(data) - _TOP_KEYS
    if extra:
        raise NetworkError(f"unknown top-level key(s): {sorted(extra)}")
    buses = []
    for i, b in enumerate(_req(data, "buses", "network")):
        w = f"buses[{i}]"
        bid = _req(b, "id", w)
        if isinstance(bid, bool) or not isinstance(bid, int):
            raise NetworkError(f"{w}: field 'id' must be an integer")
        buses.append(Bus(
            id=bid, name=str(b.get("name", "")), base_kv=_num(b, "base_kv", w),
            kind=str(_req(b, "kind", w)),
            v_setpoint=None if b.get("v_setpoint") is None else _num(b, "v_setpoint", w),
            g_shunt=_num(b, "g_shunt", w, 0.0), b_shunt=_num(b, "b_shunt", w, 0.0),
        ))
    branches = []
    for i, br in enumerate(_req(data, "branches", "network")):
        w = f"branches[{i}]"
        branches.append(Branch(
            id=str(br.get("id", i)), from_bus=int(_req(br, "from", w)), to_bus=int(_req(br, "to", w)),
            r=_num(br, "r", w), x=_num(br, "x", w), b_shunt=_num(br, "b_shunt", w, 0.0),
            tap=_num(br, "tap", w, 1.0), rating=_num(br, "rating", w, 0.0),
            in_service=bool(br.get("in_service", True)),
        ))
    loads = []
    for i, ld in enumerate(data.get("loads", [])):
        w = f"loads[{i}]"
        loads.append(Load(id=str(ld.get("id", f"L{i}")), bus=int(_req(ld, "bus", w)),
                          p=_num(ld, "p", w), q=_num(ld, "q", w)))
    machines = []
    for i, m in enumerate(data.get("machines", [])):
        w = f"machines[{i}]"
        machines.append(Machine(
            id=str(m.get("id", f"G{i}")), bus=int(_req(m, "bus", w)), p=_num(m, "p", w),
            v_setpoint=_num(m, "v_setpoint", w), q_min=_num(m, "q_min", w, -9999.0),
            q_max=_num(m, "q_max", w, 9999.0), mva_base=_num(m, "mva_base", w, 100.0),
            in_service=bool(m.get("in_service", True)),
            dynamic_params=_dynamic_from_dict(m.get("dynamic_params"), w),
        ))
    comps = []
    for i, c in enumerate(data.get("compensators", [])):
        w = f"compensators[{i}]"
        comps.append(Compensator(
            bus=int(_req(c, "bus", w)), q_rating=_num(c, "q_rating", w),
            kind=str(c.get("kind", STATIC)),
            response_time=None if c.get("response_time") is None else _num(c, "response_time", w),
            v_setpoint=None if c.get("v_setpoint") is None else _num(c, "v_setpoint", w),
        ))
    return Network(
        mva_base=_num(data, "mva_base", "network"), buses=tuple(buses), branches=tuple(branches),
        loads=tuple(loads), machines=tuple(machines), compensators=tuple(comps),
        f_hz=_num(data, "f_hz", "network", 60.0), name=str(data.get("name", "")),
    )


def network_to_dict(net: Network) -> dict[str, Any]:
    def dyn(p: DynamicModelParams | None):
        if p is None:
            return None
        d = dataclasses.asdict(p)
        if d["avr"] is None:
            del d["avr"]
        if d["governor"] is None:
            del d["governor"]
        return d

    return {
        "name": net.name,
        "mva_base": net.mva_base,
        "f_hz": net.f_hz,
        "buses": [
            {"id": b.id, "name": b.name, "base_kv": b.base_kv, "kind": b.kind,
             "v_setpoint": b.v_setpoint, "g_shunt": b.g_shunt, "b_shunt": b.b_shunt}
            for b in net.buses
        ],
        "branches": [
            {"id": br.id, "from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x,
             "b_shunt": br.b_shunt, "tap": br.tap, "rating": br.rating, "in_service": br.in_service}
            for br in net.branches
        ],
        "loads": [{"id": ld.id, "bus": ld.bus, "p": ld.p, "q": ld.q} for ld in net.loads],
        "machines": [
            {"id": m.id, "bus": m.bus, "p": m.p, "v_setpoint": m.v_setpoint, "q_min": m.q_min,
             "q_max": m.q_max, "mva_base": m.mva_base, "in_service": m.in_service,
             "dynamic_params": dyn(m.dynamic_params)}
            for m in net.machines
        ],
        "compensators": [
            {"bus": c.bus, "q_rating": c.q_rating, "kind": c.kind,
             "response_time": c.response_time, "v_setpoint": c.v_setpoint}
            for c in net.compensators
        ],
    }


def load_network(path: str | Path) -> Network:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"network file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise NetworkError(f"{path}: invalid JSON ({exc})") from None
    return network_from_dict(data)


def save_network(net: Network, path: str | Path) -> None:
    Path(path).write_text(json.dumps(net.to_dict(), indent=1) + "\n", encoding="utf-8")


def bundled_path(name: str) -> Path:
    return Path(__file__).parent / "data" / name


# ------------------------------------------------------------- per-unit

def to_pu(value_mw: float | np.ndarray, mva_base: float):
    return np.asarray(value_mw, dtype=float) / mva_base


def from_pu(value_pu: float | np.ndarray, mva_base: float):
    return np.asarray(value_pu, dtype=float) * mva_base


# ------------------------------------------------------------- admittance

def build_admittance(net: Network, extra_shunt: np.ndarray | None = None) -> sp.csr_matrix:
    """Bus admittance matrix in per-unit.

    Taps sit on the from side (ratio ``tap`` : 1).  ``extra_shunt`` adds a
    per-bus complex admittance (pu), e.g. constant-impedance loads.
    """
    n = net.n_bus
    idx = net.bus_index()
    rows, cols, vals = [], [], []
    for br in net.branches:
        if not br.in_service:
            continue
        f, t = idx[br.from_bus], idx[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        bc = 0.5j * br.b_shunt
        a = br.tap
        rows += [f, t, f, t]
        cols += [f, t, t, f]
        vals += [(ys + bc) / (a * a), ys + bc, -ys / a, -ys / a]
    ysh = np.array([complex(b.g_shunt, b.b_shunt) for b in net.buses]) / net.mva_base
    if extra_shunt is not None:
        ysh = ysh + extra_shunt
    rows += list(range(n))
    cols += list(range(n))
    vals += list(ysh)
    return sp.csr_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(n, n))


# ------------------------------------------------------------- mutation

def apply_compensation(net: Network, device: Compensator) -> Network:
    """Return a new network with ``device`` installed.

    A device of the same kind already at that bus has its rating increased
    instead of a second device being added.
    """
    if device.bus not in set(net.bus_ids):
        raise NetworkError(f"unknown bus {device.bus}")
    comps = list(net.compensators)
    for i, c in enumerate(comps):
        if c.bus == device.bus and c.kind == device.kind:
            comps[i] = dataclasses.replace(c, q_rating=c.q_rating + device.q_rating)
            break
    else:
        comps.append(device)
    return net.replace(compensators=tuple(comps))


def without_elements(net: Network, machines: Iterable[str] = (), branches: Iterable[str] = ()) -> Network:
    """Copy of ``net`` with the given machines/branches taken out of service."""
    ms, bs = set(machines), set(branches)
    new_machines = tuple(dataclasses.replace(m, in_service=False) if m.id in ms else m for m in net.machines)
    regulated = {m.bus for m in new_machines if m.in_service}
    buses = []
    for b in net.buses:
        if b.kind == PV and b.id not in regulated and b.v_setpoint is None:
            b = dataclasses.replace(b, kind=PQ)
        elif b.kind == SLACK and b.id not in regulated and b.v_setpoint is None:
            raise NetworkError(f"cannot trip the only machine at slack bus {b.id}")
        buses.append(b)
    return net.replace(
        buses=tuple(buses),
        machines=new_machines,
        branches=tuple(dataclasses.replace(b, in_service=False) if b.id in bs else b for b in net.branches),
    )


def compensation_vector(net: Network, kind: str | None = None) -> dict[int, float]:
    """Installed Mvar per bus (all buses present, zeros included)."""
    out = {b.id: 0.0 for b in net.buses}
    for c in net.compensators:
        if kind is None or c.kind == kind:
            out[c.bus] += c.q_rating
    return out


def _two_bus_dict(x: float = 0.1, p: float = 0.0, q: float = 0.0, r: float = 0.0) -> dict:
    """Minimal slack + PQ network in file form (used by tests and docs)."""
    return {
        "mva_base": 100.0,
        "buses": [
            {"id": 1, "name": "slack", "base_kv": 345.0, "kind": SLACK, "v_setpoint": 1.0},
            {"id": 2, "name": "load", "base_kv": 345.0, "kind": PQ},
        ],
        "branches": [{"id": "1-2", "from": 1, "to": 2, "r": r, "x": x}],
        "loads": [{"id": "L2", "bus": 2, "p": p * 100.0, "q": q * 100.0}],
        "machines": [],
        "compensators": [],
    }

