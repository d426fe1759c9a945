"""Band-violation statistics for annual sweeps and the trajectory violation integral."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np


@dataclass(frozen=True)
class ViolationBand:
    v_min: float = 0.95
    v_max: float = 1.05

    def __post_init__(self):
        if not 0 < self.v_min < self.v_max:
            raise ValueError("require 0 < v_min < v_max")


@dataclass
class BusViolationStats:
    """Per-bus violation summary.

    With hourly data ``f_n`` (violating samples) and ``t_v`` (violating time in
    hours) coincide; ``t_v`` differs for sub-hourly steps.  ``f_under`` and
    ``f_over`` split ``f_n`` by side; ``f_failed`` counts non-converged hours,
    which are counted as violations everywhere.
    """

    bus: int
    f_n: int
    dv_max: float
    t_v: float
    rank: int = 0
    f_under: int = 0
    f_over: int = 0
    f_failed: int = 0
    worst_hour: int = -1

    @property
    def side(self) -> str:
        return "under" if self.f_under >= self.f_over else "over"


RANK_KEYS = ("f_n", "dv_max", "t_v")


def assess_violations(series, band: ViolationBand = ViolationBand(), order: Sequence[str] = RANK_KEYS,
                      step_hours: float = 1.0) -> list[BusViolationStats]:
    """Rank buses that leave ``band`` in at least one hour.

    Sorting is descending on ``order`` (a permutation of f_n, dv_max, t_v),
    then ascending bus id, so ranks are a total order.
    """
    if sorted(order) != sorted(RANK_KEYS):
        raise ValueError(f"order must be a permutation of {RANK_KEYS}")
    v = np.asarray(series.v, dtype=float)
    ok = np.asarray(series.converged, dtype=bool)
    under = np.where(ok[None, :], np.maximum(band.v_min - v, 0.0), 0.0)
    over = np.where(ok[None, :], np.maximum(v - band.v_max, 0.0), 0.0)
    depth = np.maximum(under, over)
    failed = ~ok
    out = []
    for i, bus in enumerate(series.bus_ids):
        bad = (depth[i] > 0) | failed
        n = int(bad.sum())
        if n == 0:
            continue
        out.append(BusViolationStats(
            bus=int(bus), f_n=n, dv_max=float(depth[i].max()), t_v=n * step_hours,
            f_under=int((under[i] > 0).sum()), f_over=int((over[i] > 0).sum()),
            f_failed=int(failed.sum()), worst_hour=int(np.argmax(depth[i])) if depth[i].max() > 0 else int(np.argmax(failed)),
        ))
    out.sort(key=lambda s: tuple(-getattr(s, k) for k in order) + (s.bus,))
    for r, s in enumerate(out, start=1):
        s.rank = r
    return out


def count_violations(series, band: ViolationBand = ViolationBand()) -> int:
    """Number of (bus, hour) samples outside the band, failed hours counting every bus."""
    v = np.asarray(series.v)
    ok = np.asarray(series.converged, dtype=bool)
    bad = ((v < band.v_min) | (v > band.v_max)) & ok[None, :]
    return int(bad.sum() + (~ok).sum() * v.shape[0])


def critical_hours(series, k: int = 1) -> list[int]:
    """Hours of the ``k`` lowest system-minimum voltages, lowest first.

    Ties resolve to the earlier hour; non-converged hours are skipped.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    vmin = np.asarray(series.v).min(axis=0)
    hours = np.flatnonzero(np.asarray(series.converged, dtype=bool))
    order = np.lexsort((hours, vmin[hours]))
    return [int(h) for h in hours[order[:k]]]


def write_violations_csv(stats: list[BusViolationStats], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bus_id", "f_n", "dv_max_pu", "t_v_hours", "rank"])
        for s in stats:
            w.writerow([s.bus, s.f_n, format(s.dv_max, ".10g"), format(s.t_v, ".10g"), s.rank])


# --------------------------------------------------------------------- TVI

@dataclass(frozen=True)
class TVIEnvelope:
    """Exponentially recovering band around ``v_st``.

    ``t_end`` is the length of the scored window measured from the
    disturbance.  ``v_st`` may be a scalar or one value per bus.
    """

    beta: float = 0.015
    v_st: float | np.ndarray = 1.0
    t_end: float = 10.0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.t_end <= 0:
            raise ValueError("t_end must be positive")
        if np.any(np.asarray(self.v_st) <= 0):
            raise ValueError("v_st must be positive")


def _shape(t, env: TVIEnvelope):
    tau = np.asarray(t, dtype=float) / env.t_end
    if env.beta == 0:
        return np.ones_like(tau)
    # (tau e^tau)^b / e^b written as exp(b (ln tau + tau - 1)); 0 at tau = 0
    with np.errstate(divide="ignore"):
        return np.where(tau > 0, np.exp(env.beta * (np.log(np.where(tau > 0, tau, 1.0)) + tau - 1.0)), 0.0)


def tvi_lower_boundary(t, env: TVIEnvelope):
    """T_low(t) = ((t/t_end) e^(t/t_end))^beta / e^beta * v_st, with 0^0 = 1."""
    s = _shape(t, env)
    out = np.multiply.outer(np.asarray(env.v_st, dtype=float), s) if np.ndim(env.v_st) else s * float(env.v_st)
    return out if np.ndim(out) else float(out)


def tvi_upper_boundary(t, env: TVIEnvelope):
    """T_upp(t) = 2 v_st - T_low(t); reduces to 2 - T_low at v_st = 1."""
    low = tvi_lower_boundary(t, env)
    vst = np.asarray(env.v_st, dtype=float)
    out = (2.0 * vst[:, None] - low) if vst.ndim else 2.0 * float(vst) - low
    return out if np.ndim(out) else float(out)


class _Trace(Protocol):
    t: np.ndarray
    v_mag: np.ndarray
    bus_ids: list[int]


@dataclass
class TVIResult:
    bus_ids: list[int]
    tvi: np.ndarray  # pu*s
    dv_max: np.ndarray  # pu
    violated: np.ndarray

    @property
    def any_violation(self) -> bool:
        return bool(self.violated.any())

    def worst_bus(self) -> int:
        """Bus with the deepest violation (lowest id on ties)."""
        return int(self.bus_ids[int(np.argmax(self.dv_max))])

    def as_rows(self):
        return [(b, float(x), float(d), bool(f)) for b, x, d, f in zip(self.bus_ids, self.tvi, self.dv_max, self.violated)]


def compute_tvi(traj: _Trace, env: TVIEnvelope, t_start: float = 0.0,
                exclude: tuple[float, float] | None = None) -> TVIResult:
    """Trajectory violation integral per bus.

    Time is re-based so the envelope starts at ``t_start`` (the disturbance)
    and the window ends at ``t_start + env.t_end``.  The deficit is
    ``T_low - v`` below the lower boundary and ``v - T_upp`` above the upper
    one; it is integrated with the trapezoidal rule over the trace samples.
    Segments overlapping ``exclude`` (the fault-on interval) are skipped.
    """
    t = np.asarray(traj.t, dtype=float)
    v = np.atleast_2d(np.asarray(traj.v_mag, dtype=float))
    if t.size == 0 or v.size == 0:
        raise ValueError("empty trajectory")
    keep = (t >= t_start - 1e-12) & (t <= t_start + env.t_end + 1e-12)
    t, v = t[keep], v[:, keep]
    if t.size == 0:
        raise ValueError("trajectory has no samples inside the scoring window")
    tau = np.clip(t - t_start, 0.0, env.t_end)
    vst = np.asarray(env.v_st, dtype=float)
    if vst.ndim and vst.shape[0] != v.shape[0]:
        raise ValueError("per-bus v_st does not match the number of buses")
    low = tvi_lower_boundary(tau, env)
    low = np.broadcast_to(low, v.shape)
    upp = (2.0 * vst[:, None] if vst.ndim else 2.0 * float(vst)) - low
    deficit = np.maximum(low - v, 0.0) + np.maximum(v - upp, 0.0)
    seg = np.ones(t.size - 1, dtype=bool)
    pt = np.ones(t.size, dtype=bool)
    if exclude is not None:
        a, b = exclude
        seg = (t[1:] <= a) | (t[:-1] >= b)
        pt = (t <= a) | (t >= b)
    dt = np.diff(t)
    area = 0.5 * (deficit[:, 1:] + deficit[:, :-1]) * dt
    tvi = np.where(seg[None, :], area, 0.0).sum(axis=1)
    dv = np.where(pt[None, :], deficit, 0.0).max(axis=1)
    return TVIResult(list(traj.bus_ids), tvi, dv, tvi > 0)


def write_tvi_csv(res: TVIResult, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bus_id", "tvi_pu_s", "dv_max_pu", "violated"])
        for b, x, d, f in res.as_rows():
            w.writerow([b, format(x, ".10g"), format(d, ".10g"), int(f)])


def write_envelope_csv(env: TVIEnvelope, path: str | Path, n: int = 501, t0: float = 0.0) -> None:
    """Envelope samples; ``t0`` shifts the time column to the disturbance start."""
    t = np.linspace(0.0, env.t_end, n)
    vst = float(np.mean(env.v_st))
    e = TVIEnvelope(env.beta, vst, env.t_end)
    lo, hi = tvi_lower_boundary(t, e), tvi_upper_boundary(t, e)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "T_low", "T_upp"])
        for a, b, c in zip(t, lo, hi):
            w.writerow([format(a + t0, ".10g"), format(b, ".10g"), format(c, ".10g")])
