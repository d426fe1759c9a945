"""Quasi-dynamic simulation: one steady-state power flow per hour of a profile set."""

from __future__ import annotations

import csv
import hashlib
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .netmodel import Network, NetworkError
from .powerflow import PowerFlowOptions, PreparedCase

PROFILE_HEADER = ["hour", "element_type", "element_id", "p_mw", "q_mvar", "v_setpoint_pu"]

# Hours are solved in fixed blocks: the first hour of a block starts flat and
# later hours warm-start from their predecessor.  Block boundaries do not
# depend on the worker count, so any --jobs value gives identical bits.
BLOCK_HOURS = 24


class ProfileError(ValueError):
    pass


class QDSError(RuntimeError):
    pass


@dataclass
class ProfileSet:
    """Hourly injections in engineering units; arrays are [element x hour]."""

    load_ids: list[str]
    load_p: np.ndarray
    load_q: np.ndarray
    machine_ids: list[str]
    machine_p: np.ndarray
    machine_v: np.ndarray

    def __post_init__(self):
        h = self.horizon
        for name in ("load_p", "load_q", "machine_p", "machine_v"):
            arr = getattr(self, name)
            if arr.ndim != 2 or arr.shape[1] != h:
                raise ProfileError(f"{name} must have {h} hour columns")
        if self.load_p.shape[0] != len(self.load_ids) or self.machine_p.shape[0] != len(self.machine_ids):
            raise ProfileError("profile rows do not match element ids")

    @property
    def horizon(self) -> int:
        return int(self.load_p.shape[1])

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update("|".join(self.load_ids).encode())
        h.update("|".join(self.machine_ids).encode())
        for arr in (self.load_p, self.load_q, self.machine_p, self.machine_v):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def hours(self, start: int, stop: int) -> "ProfileSet":
        return ProfileSet(self.load_ids, self.load_p[:, start:stop], self.load_q[:, start:stop],
                          self.machine_ids, self.machine_p[:, start:stop], self.machine_v[:, start:stop])


def constant_profiles(net: Network, horizon: int) -> ProfileSet:
    """Every hour equal to the network's own injections."""
    ld = [x for x in net.loads]
    ms = [m for m in net.machines if m.in_service]
    ones = np.ones((1, horizon))
    return ProfileSet(
        [x.id for x in ld], np.array([[x.p] for x in ld]).reshape(-1, 1) * ones,
        np.array([[x.q] for x in ld]).reshape(-1, 1) * ones,
        [m.id for m in ms], np.array([[m.p] for m in ms]).reshape(-1, 1) * ones,
        np.array([[m.v_setpoint] for m in ms]).reshape(-1, 1) * ones,
    )


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


def save_profiles(profiles: ProfileSet, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROFILE_HEADER)
        for h in range(profiles.horizon):
            for i, lid in enumerate(profiles.load_ids):
                w.writerow([h, "load", lid, _fmt(profiles.load_p[i, h]), _fmt(profiles.load_q[i, h]), ""])
            for i, mid in enumerate(profiles.machine_ids):
                w.writerow([h, "machine", mid, _fmt(profiles.machine_p[i, h]), "", _fmt(profiles.machine_v[i, h])])


def load_profiles(path: str | Path, net: Network) -> ProfileSet:
    """Read a long-format profile CSV and check it covers every element and hour."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"profile file not found: {path}")
    loads = [ld.id for ld in net.loads]
    machines = [m.id for m in net.machines if m.in_service]
    lpos = {k: i for i, k in enumerate(loads)}
    mpos = {k: i for i, k in enumerate(machines)}
    all_machines = {m.id for m in net.machines}
    rows: list[tuple[int, str, str, str, str, str]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != PROFILE_HEADER:
            raise ProfileError(f"{path}: header must be {','.join(PROFILE_HEADER)}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 6:
                raise ProfileError(f"{path}:{lineno}: expected 6 fields")
            try:
                hour = int(rec[0])
            except ValueError:
                raise ProfileError(f"{path}:{lineno}: bad hour {rec[0]!r}") from None
            rows.append((hour, rec[1].strip(), rec[2].strip(), rec[3], rec[4], rec[5]))
    if not rows:
        raise ProfileError(f"{path}: no data rows")
    if min(r[0] for r in rows) < 0:
        raise ProfileError(f"{path}: negative hour")
    horizon = max(r[0] for r in rows) + 1
    lp = np.full((len(loads), horizon), np.nan)
    lq = np.full((len(loads), horizon), np.nan)
    mp = np.full((len(machines), horizon), np.nan)
    mv = np.full((len(machines), horizon), np.nan)

    def num(text, what, hour, eid, default=None):
        if text.strip() == "":
            if default is None:
                raise ProfileError(f"{what} {eid} hour {hour}: missing value")
            return default
        try:
            return float(text)
        except ValueError:
            raise ProfileError(f"{what} {eid} hour {hour}: bad number {text!r}") from None

    base_v = {m.id: m.v_setpoint for m in net.machines}
    for hour, kind, eid, p, q, v in rows:
        if kind == "load":
            if eid not in lpos:
                raise ProfileError(f"unknown load id {eid!r}")
            lp[lpos[eid], hour] = num(p, "load", hour, eid)
            lq[lpos[eid], hour] = num(q, "load", hour, eid)
        elif kind == "machine":
            if eid not in all_machines:
                raise ProfileError(f"unknown machine id {eid!r}")
            if eid not in mpos:
                continue
            mp[mpos[eid], hour] = num(p, "machine", hour, eid)
            mv[mpos[eid], hour] = num(v, "machine", hour, eid, base_v[eid])
        else:
            raise ProfileError(f"unknown element_type {kind!r}")
    for ids, arr, what in ((loads, lp, "load"), (machines, mp, "machine")):
        bad = np.argwhere(np.isnan(arr))
        if bad.size:
            i, h = bad[0]
            raise ProfileError(f"missing hour {h} for {what} {ids[i]}")
    return ProfileSet(loads, lp, lq, machines, mp, mv)


# ------------------------------------------------------------------ sweep

@dataclass
class VoltageSeries:
    bus_ids: list[int]
    v: np.ndarray  # [bus x hour], pu
    converged: np.ndarray  # [hour] bool
    iterations: np.ndarray = None
    meta: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return int(self.v.shape[1])

    def column(self, hour: int) -> np.ndarray:
        return self.v[:, hour]

    def row(self, bus_id: int) -> np.ndarray:
        return self.v[self.bus_ids.index(bus_id)]


def _aligned(case: PreparedCase, prof: ProfileSet):
    """Reorder profile rows to the prepared case's element order."""
    lpos = {k: i for i, k in enumerate(prof.load_ids)}
    mpos = {k: i for i, k in enumerate(prof.machine_ids)}
    try:
        li = [lpos[k] for k in case.load_ids]
        mi = [mpos[k] for k in case.mach_ids]
    except KeyError as exc:
        raise ProfileError(f"profile lacks element {exc.args[0]!r}") from None
    b = case.base
    return prof.load_p[li] / b, prof.load_q[li] / b, prof.machine_p[mi] / b, prof.machine_v[mi]


def _solve_hours(case: PreparedCase, arrays, options: PowerFlowOptions, start: int, stop: int):
    lp, lq, mp, mv = arrays
    n = stop - start
    v = np.empty((case.n, n))
    ok = np.zeros(n, dtype=bool)
    its = np.zeros(n, dtype=int)
    zero = np.zeros(case.n, dtype=complex)
    prev = None
    warm = PowerFlowOptions(tol=options.tol, max_iter=options.max_iter, enforce_q_limits=options.enforce_q_limits,
                            flat_start=False, max_q_passes=options.max_q_passes)
    for j in range(n):
        h = start + j
        sfix = case.fixed_injection(lp[:, h], lq[:, h], mp[:, h], zero)
        vset = case.setpoints(mv[:, h])
        first = (h % BLOCK_HOURS == 0) or prev is None
        sol = case.solve(sfix, vset, options if first else warm, v0=None if first else prev)
        v[:, j] = sol.v_mag
        ok[j] = sol.converged
        its[j] = sol.iterations
        prev = sol.voltage if sol.converged else None
    return v, ok, its


def _worker(args):
    case, arrays, options, start, stop = args
    return _solve_hours(case, arrays, options, start, stop)


def default_jobs() -> int:
    env = os.environ.get("VSTAB_JOBS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"VSTAB_JOBS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def run_qds(net: Network, profiles: ProfileSet, options: PowerFlowOptions | None = None,
            jobs: int | None = None) -> VoltageSeries:
    """Solve every hour of ``profiles`` on ``net``.

    Non-converged hours keep the last iterate and are flagged in
    ``converged``.  Results are bitwise independent of ``jobs``.
    """
    options = options or PowerFlowOptions()
    jobs = default_jobs() if jobs is None else max(1, int(jobs))
    case = PreparedCase(net)
    arrays = _aligned(case, profiles)
    H = profiles.horizon
    # chunk = whole blocks, so block starts fall on chunk starts
    n_blocks = -(-H // BLOCK_HOURS)
    per = max(1, -(-n_blocks // (jobs * 4))) if jobs > 1 else n_blocks
    bounds = [(b * BLOCK_HOURS, min(H, (b + per) * BLOCK_HOURS)) for b in range(0, n_blocks, per)]
    if jobs == 1 or len(bounds) == 1:
        parts = [_solve_hours(case, arrays, options, a, b) for a, b in bounds]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_worker, [(case, arrays, options, a, b) for a, b in bounds]))
    v = np.concatenate([p[0] for p in parts], axis=1)
    ok = np.concatenate([p[1] for p in parts])
    its = np.concatenate([p[2] for p in parts])
    if not ok.any():
        raise QDSError(f"power flow failed in all {H} hours")
    meta = {"network_hash": net.digest(), "profile_hash": profiles.digest(), "horizon": H,
            "converged_hours": int(ok.sum())}
    return VoltageSeries(list(case.bus_ids), v, ok, its, meta)


def hour_injections(profiles: ProfileSet, hour: int):
    """Power-flow overrides for one hour of a profile set."""
    from .powerflow import Injections

    if not 0 <= hour < profiles.horizon:
        raise ProfileError(f"hour {hour} outside 0..{profiles.horizon - 1}")
    return Injections(
        load_p={k: float(profiles.load_p[i, hour]) for i, k in enumerate(profiles.load_ids)},
        load_q={k: float(profiles.load_q[i, hour]) for i, k in enumerate(profiles.load_ids)},
        machine_p={k: float(profiles.machine_p[i, hour]) for i, k in enumerate(profiles.machine_ids)},
        machine_v={k: float(profiles.machine_v[i, hour]) for i, k in enumerate(profiles.machine_ids)},
    )


def network_at_hour(net: Network, profiles: ProfileSet, hour: int) -> Network:
    """Copy of ``net`` whose loads and machines carry the hour's values."""
    import dataclasses

    inj = hour_injections(profiles, hour)
    loads = tuple(dataclasses.replace(ld, p=inj.load_p.get(ld.id, ld.p), q=inj.load_q.get(ld.id, ld.q))
                  for ld in net.loads)
    machines = tuple(dataclasses.replace(m, p=inj.machine_p.get(m.id, m.p), v_setpoint=inj.machine_v.get(m.id, m.v_setpoint))
                     for m in net.machines)
    return net.replace(loads=loads, machines=machines)


def write_series_csv(series: VoltageSeries, path: str | Path) -> None:
    """Rows = hours, columns = bus ids (plus a converged flag)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hour"] + [str(b) for b in series.bus_ids] + ["converged"])
        for h in range(series.horizon):
            w.writerow([h] + [_fmt(x) for x in series.v[:, h]] + [int(series.converged[h])])


def read_series_csv(path: str | Path) -> VoltageSeries:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[0] != "hour" or header[-1] != "converged":
            raise NetworkError(f"{path}: not a QDS voltage file")
        rows = [r for r in reader if r]
    bus_ids = [int(b) for b in header[1:-1]]
    data = np.array([[float(x) for x in r[1:-1]] for r in rows]).T
    ok = np.array([r[-1] == "1" for r in rows])
    return VoltageSeries(bus_ids, data.reshape(len(bus_ids), len(rows)), ok)
