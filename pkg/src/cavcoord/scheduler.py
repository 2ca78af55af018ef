"""Context-aware status-update scheduling.

Virtual queues enforce the long-run per-vehicle transmission budget; the
update index combines queue length, risk weight, estimation gap and the
IM-tracked covariance.  The n vehicles with the smallest indices win the
sub-channels; round-robin and AoI selections are the baselines.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CONTEXT = "context"
AOI = "aoi"
ROUND_ROBIN = "round_robin"
SCHEDULER_KINDS = (CONTEXT, AOI, ROUND_ROBIN)


@dataclass
class ScheduleState:
    queues: dict            # vehicle id -> virtual queue length Y >= 0
    aoi: dict               # vehicle id -> slots since last successful update
    rr_cursor: int = 0
    queue_weight: float = 1.0   # theta
    rho: float = 0.95
    n_channels: int = 1

    @staticmethod
    def fresh(ids, rho=0.95, n_channels=1, queue_weight=1.0) -> "ScheduleState":
        return ScheduleState(queues={i: 0.0 for i in ids}, aoi={i: 0 for i in ids},
                             rr_cursor=0, queue_weight=queue_weight, rho=rho,
                             n_channels=n_channels)

    def add_vehicle(self, vid) -> None:
        self.queues.setdefault(vid, 0.0)
        self.aoi.setdefault(vid, 0)

    def drop_vehicle(self, vid) -> None:
        self.queues.pop(vid, None)
        self.aoi.pop(vid, None)


@dataclass
class ContextEntry:
    xhat: np.ndarray        # filtered mean at the vehicle
    xbar: np.ndarray        # IM-propagated mean
    sigma_hat: np.ndarray   # IM-propagated covariance of the estimate
    W: np.ndarray           # risk weight (PSD)
    s: float                # transmission success probability


def update_index(c: ContextEntry, Y: float, theta: float, s: float) -> float:
    """lambda = 2 theta Y + s tr[W (xhat xhat' - xbar xbar') - W Sigma-hat]."""
    xh, xb = np.asarray(c.xhat, float), np.asarray(c.xbar, float)
    W = np.asarray(c.W, float)
    gain = float(xh @ W @ xh - xb @ W @ xb - np.trace(W @ c.sigma_hat))
    return 2.0 * theta * Y + s * gain


def _top_n_smallest(scores: dict, n: int) -> dict:
    order = sorted(scores, key=lambda i: (scores[i], i))
    chosen = set(order[:min(n, len(order))])
    return {i: (1 if i in chosen else 0) for i in scores}


def select_context_aware(state: ScheduleState, inputs: dict, n: int) -> dict:
    """Schedule the n most urgent vehicles (smallest update indices), ties
    broken by lower vehicle id."""
    lam = {i: update_index(c, state.queues[i], state.queue_weight, c.s)
           for i, c in inputs.items()}
    return _top_n_smallest(lam, n)


def compute_indices(state: ScheduleState, inputs: dict) -> dict:
    return {i: update_index(c, state.queues[i], state.queue_weight, c.s)
            for i, c in inputs.items()}


def select_round_robin(state: ScheduleState, n: int) -> dict:
    """Next n ids cyclically from the cursor; the cursor advances by n."""
    ids = sorted(state.queues)
    if not ids:
        return {}
    N = len(ids)
    cur = state.rr_cursor % N
    chosen = {ids[(cur + k) % N] for k in range(min(n, N))}
    state.rr_cursor = (cur + n) % N
    return {i: (1 if i in chosen else 0) for i in ids}


def select_aoi(state: ScheduleState, n: int) -> dict:
    """Top n by age metric Delta (Delta + 1), ties by lower id."""
    score = {i: -float(d * (d + 1)) for i, d in state.aoi.items()}
    return _top_n_smallest(score, n)


def step_queues(state: ScheduleState, V: dict, S: dict | None = None) -> ScheduleState:
    """Y <- [Y - rho + V]+ ; AoI increments, resets on delivery V*S = 1."""
    if S is None:
        S = V
    for i in state.queues:
        state.queues[i] = max(0.0, state.queues[i] - state.rho + V.get(i, 0))
        if V.get(i, 0) and S.get(i, 0):
            state.aoi[i] = 0
        else:
            state.aoi[i] += 1
    return state


def drift_plus_penalty_bound(state: ScheduleState, inputs: dict, V: dict) -> float:
    """Diagnostic evaluation of the drift-plus-penalty upper bound: the
    V-dependent part is sum_i lambda_i V_i; the remainder does not depend
    on the decision."""
    theta = state.queue_weight
    total = 0.0
    for i, c in inputs.items():
        lam = update_index(c, state.queues[i], theta, c.s)
        total += lam * V.get(i, 0)
        xb = np.asarray(c.xbar, float)
        W = np.asarray(c.W, float)
        sigma_tilde = getattr(c, "sigma_tilde", None)
        rem = float(np.trace(W @ c.sigma_hat) + xb @ W @ xb)
        if sigma_tilde is not None:
            rem += float(np.trace(W @ sigma_tilde))
        total += rem - 2.0 * theta * state.rho * state.queues[i] + theta
    return total
