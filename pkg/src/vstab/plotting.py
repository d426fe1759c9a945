"""PNG rendering of the CSV plot data written by the planner and the CLI."""

from __future__ import annotations

import re
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _read(path: Path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if not fh.readline().strip():
            return header, np.empty((0, len(header)))
    data = np.genfromtxt(path, delimiter=",", skip_header=1, ndmin=2)
    return header, data


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)
    return path


def plot_qds(csv_path: Path, band=(0.95, 1.05)) -> Path:
    header, d = _read(csv_path)
    fig, ax = plt.subplots(figsize=(9, 4))
    ax.plot(d[:, 0], d[:, 1:-1], lw=0.4)
    for y in band:
        ax.axhline(y, color="k", ls="--", lw=0.8)
    ax.set_xlabel("hour")
    ax.set_ylabel("voltage (pu)")
    ax.set_title("Annual bus voltages")
    return _save(fig, csv_path.with_suffix(".png"))


def plot_violations(csv_path: Path) -> Path | None:
    header, d = _read(csv_path)
    if d.size == 0:
        return None
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.5))
    labels = [str(int(b)) for b in d[:, 0]]
    for ax, col, name in zip(axes, (1, 2, 3), ("f_n", "dV max (pu)", "t_v (h)")):
        ax.bar(labels, d[:, col])
        ax.set_xlabel("bus")
        ax.set_title(name)
    return _save(fig, csv_path.with_suffix(".png"))


def plot_qv(csv_path: Path, v_target: float | None = None) -> Path:
    header, d = _read(csv_path)
    ok = d[:, 2] == 1
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(d[ok, 0], d[ok, 1], "-o", ms=2)
    ax.axhline(0.0, color="k", lw=0.6)
    if v_target is not None:
        ax.axvline(v_target, color="r", ls="--", lw=0.8)
    ax.set_xlabel("voltage (pu)")
    ax.set_ylabel("Q (Mvar)")
    ax.set_title(csv_path.stem.replace("_", " "))
    return _save(fig, csv_path.with_suffix(".png"))


def plot_trajectory(csv_path: Path, envelope_path: Path | None = None) -> Path:
    header, d = _read(csv_path)
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(d[:, 0], d[:, 1:], lw=0.6)
    if envelope_path is not None and envelope_path.exists():
        _, e = _read(envelope_path)
        ax.plot(e[:, 0], e[:, 1], "k--", lw=0.8)
        ax.plot(e[:, 0], e[:, 2], "k--", lw=0.8)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("voltage (pu)")
    ax.set_ylim(max(0.0, np.nanmin(d[:, 1:]) - 0.05), np.nanmax(d[:, 1:]) + 0.05)
    ax.set_title(csv_path.stem)
    return _save(fig, csv_path.with_suffix(".png"))


def render_tree(root: str | Path, band=(0.95, 1.05), v_target: float | None = None) -> list[Path]:
    """Render a PNG next to every recognised CSV under ``root``."""
    out = []
    for p in sorted(Path(root).rglob("*.csv")):
        name = p.name
        if name == "qds_voltages.csv":
            out.append(plot_qds(p, band))
        elif name == "violations.csv":
            out.append(plot_violations(p))
        elif name.startswith("qv_curve_"):
            out.append(plot_qv(p, v_target if p.parent.parent.name == "step1" else None))
        elif re.match(r"rms_.*\.csv$", name):
            out.append(plot_trajectory(p, p.with_name("envelope_" + name[4:])))
    return [p for p in out if p is not None]
