"""Synthetic annual load and generation profiles.

Loads follow a seasonal and a diurnal sinusoid with AR(1) noise.  A Gaussian
"stress window" adds extra load at a few buses so that the annual sweep has
undervoltage hours to work on.  Non-slack machines follow total load so the
slack does not absorb the whole swing.  Hour 0 equals the base case exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netmodel import Network
from .qds import ProfileSet


@dataclass(frozen=True)
class SynthConfig:
    seasonal: float = 0.03
    diurnal: float = 0.04
    noise: float = 0.01
    ar: float = 0.9
    stress: float = 0.4
    stress_center: int = 4632
    stress_width: float = 400.0  # hours, Gaussian sigma
    stress_buses: tuple[int, ...] = (4, 7, 8)


def load_shape(horizon: int, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    h = np.arange(horizon, dtype=float)
    seasonal = 1.0 + cfg.seasonal * np.sin(2 * np.pi * h / 8760.0)
    diurnal = 1.0 - cfg.diurnal * np.sin(2 * np.pi * h / 24.0)
    eps = rng.standard_normal(horizon) * cfg.noise * np.sqrt(1 - cfg.ar**2)
    noise = np.zeros(horizon)
    for k in range(1, horizon):
        noise[k] = cfg.ar * noise[k - 1] + eps[k]
    return seasonal * diurnal * (1.0 + noise)


def stress_window(horizon: int, cfg: SynthConfig) -> np.ndarray:
    """Gaussian bump truncated at four sigma (exactly zero outside)."""
    h = np.arange(horizon, dtype=float)
    z = (h - cfg.stress_center) / cfg.stress_width
    return np.where(np.abs(z) <= 4.0, np.exp(-0.5 * z * z), 0.0)


def synth_profiles(net: Network, seed: int = 42, horizon: int = 8760,
                   cfg: SynthConfig = SynthConfig()) -> ProfileSet:
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rng = np.random.default_rng(seed)
    shape = load_shape(horizon, cfg, rng)
    bump = cfg.stress * stress_window(horizon, cfg)
    stressed = set(cfg.stress_buses)
    lp, lq = [], []
    for ld in net.loads:
        f = shape * (1.0 + bump) if ld.bus in stressed else shape
        lp.append(ld.p * f)
        lq.append(ld.q * f)
    lp, lq = np.array(lp).reshape(len(net.loads), horizon), np.array(lq).reshape(len(net.loads), horizon)
    # same reduction path for numerator and denominator, so hour 0 gives exactly 1
    total0 = np.array([[ld.p] for ld in net.loads]).reshape(-1, 1).sum(axis=0)
    ratio = lp.sum(axis=0) / total0 if net.loads and total0[0] else np.ones(horizon)
    slack = net.slack_bus.id
    ms = [m for m in net.machines if m.in_service]
    mp = np.array([m.p * (np.ones(horizon) if m.bus == slack else ratio) for m in ms]).reshape(len(ms), horizon)
    mv = np.array([m.v_setpoint * np.ones(horizon) for m in ms]).reshape(len(ms), horizon)
    return ProfileSet([ld.id for ld in net.loads], lp, lq, [m.id for m in ms], mp, mv)
