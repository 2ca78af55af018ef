"""Transmission-outcome models.

Either a fixed Bernoulli success probability or a distance-dependent
Rayleigh-fading model where a packet survives iff the received SNR clears
the threshold: P(success) = exp(-gamma_lin * (N0/Ptx) * d^eta).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

FIXED = "fixed"
RAYLEIGH = "rayleigh"


@dataclass(frozen=True)
class ChannelModel:
    kind: str = FIXED
    s_fixed: float = 0.95
    eta: float = 3.0
    gamma_db: float = 16.0
    n0_dbm: float = -99.0
    ptx_dbm: float = -18.0
    n_channels: int = 20
    tx_rate: float = 10.0       # messages/second; slot = planner period

    def __post_init__(self):
        if self.kind not in (FIXED, RAYLEIGH):
            raise ValueError(f"unknown channel kind {self.kind!r}")
        if not 0.0 <= self.s_fixed <= 1.0:
            raise ValueError("s_fixed must be a probability")
        if self.eta <= 0:
            raise ValueError("eta must be positive")


def success_probability(m: ChannelModel, d: float) -> float:
    if m.kind == FIXED:
        return m.s_fixed
    if d <= 0:
        raise ValueError("rayleigh model needs d > 0")
    gamma_lin = 10.0 ** (m.gamma_db / 10.0)
    noise_over_tx = 10.0 ** ((m.n0_dbm - m.ptx_dbm) / 10.0)
    return math.exp(-gamma_lin * noise_over_tx * d ** m.eta)


def transmit(m: ChannelModel, V: dict, distances: dict, rng) -> dict:
    """Draw per-vehicle delivery outcomes for the scheduled set.

    Over-subscription (more scheduled than sub-channels) is a scheduler
    contract violation and is rejected.
    """
    scheduled = [i for i, v in sorted(V.items()) if v]
    if len(scheduled) > m.n_channels:
        raise ValueError(f"{len(scheduled)} scheduled > {m.n_channels} sub-channels")
    S = {i: 0 for i in V}
    for i in scheduled:
        p = success_probability(m, float(distances[i]))
        S[i] = int(rng.random() < p)
    return S
