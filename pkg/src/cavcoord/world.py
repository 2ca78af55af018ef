"""Intersection geometry, traffic generation, reference paths and metrics.

Four roads meet at the origin; right-hand traffic with ``lanes_per_road``
approach lanes per road.  Reference paths are straight-arc-straight
curves, arc-length parameterized and tangent-continuous at the joins.
Approach a in {0,1,2,3} enters heading a * pi/2 (0 = eastbound); headings
along a path are kept continuous (not wrapped).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import VehicleState

LEFT = "left"
STRAIGHT = "straight"
RIGHT = "right"
INTENTS = (LEFT, STRAIGHT, RIGHT)


@dataclass(frozen=True)
class IntersectionGeometry:
    ccz_size: float = 100.0
    ca_size: float = 20.0
    lane_width: float = 5.0
    left_radius: float = 15.0
    right_radius: float = 5.0
    lanes_per_road: int = 2

    def __post_init__(self):
        if self.ca_size >= self.ccz_size:
            raise ValueError("conflict area must be smaller than the control zone")

    @property
    def half(self) -> float:
        return self.ccz_size / 2.0

    def in_ca(self, p) -> bool:
        return abs(p[0]) <= self.ca_size / 2.0 and abs(p[1]) <= self.ca_size / 2.0

    def in_ccz(self, p) -> bool:
        return abs(p[0]) <= self.half and abs(p[1]) <= self.half


class _Line:
    def __init__(self, p0, heading, length):
        self.p0 = np.asarray(p0, float)
        self.heading = float(heading)
        self.length = float(length)
        self._dir = np.array([math.cos(heading), math.sin(heading)])

    def state_at(self, s):
        p = self.p0 + s * self._dir
        return float(p[0]), float(p[1]), self.heading

    def rotated(self, psi):
        return _Line(_rot(self.p0, psi), self.heading + psi, self.length)


class _Arc:
    def __init__(self, center, radius, ang0, sweep):
        self.center = np.asarray(center, float)
        self.radius = float(radius)
        self.ang0 = float(ang0)
        self.sweep = float(sweep)
        self.length = abs(sweep) * radius

    def state_at(self, s):
        ang = self.ang0 + self.sweep * (s / self.length)
        p = self.center + self.radius * np.array([math.cos(ang), math.sin(ang)])
        heading = ang + (math.pi / 2 if self.sweep > 0 else -math.pi / 2)
        return float(p[0]), float(p[1]), heading

    def rotated(self, psi):
        return _Arc(_rot(self.center, psi), self.radius, self.ang0 + psi, self.sweep)


def _rot(p, psi):
    c, s = math.cos(psi), math.sin(psi)
    return (c * p[0] - s * p[1], s * p[0] + c * p[1])


class ReferencePath:
    """Arc-length parameterized curve; sampling clamps at both ends."""

    def __init__(self, segments):
        self.segments = segments
        self.length = float(sum(seg.length for seg in segments))

    def state_at(self, s: float) -> tuple[float, float, float]:
        s = min(max(s, 0.0), self.length)
        for seg in self.segments[:-1]:
            if s <= seg.length:
                return seg.state_at(s)
            s -= seg.length
        last = self.segments[-1]
        return last.state_at(min(s, last.length))


def build_path(geom: IntersectionGeometry, approach: int, intent: str,
               lane: int) -> ReferencePath:
    """Canonical eastbound path rotated into the approach frame.

    Left turns start from the inner lane (0), right turns from the outer
    lane; straight-through vehicles keep their spawn lane.
    """
    half, lw = geom.half, geom.lane_width
    inner, outer = lw / 2.0, lw * 1.5
    psi = approach * math.pi / 2.0
    if intent == STRAIGHT:
        y = -(lw / 2.0 + lane * lw)
        segs = [_Line((-half, y), 0.0, 2 * half)]
    elif intent == LEFT:
        R = geom.left_radius
        cx, cy = inner - R, -inner + R
        segs = [
            _Line((-half, -inner), 0.0, half + cx),
            _Arc((cx, cy), R, -math.pi / 2, math.pi / 2),
            _Line((inner, cy), math.pi / 2, half - cy),
        ]
    elif intent == RIGHT:
        R = geom.right_radius
        cx = cy = -(outer + R)
        segs = [
            _Line((-half, -outer), 0.0, half + cx),
            _Arc((cx, cy), R, math.pi / 2, -math.pi / 2),
            _Line((-outer, cy), -math.pi / 2, half + cy),
        ]
    else:
        raise ValueError(f"unknown intent {intent!r}")
    return ReferencePath([seg.rotated(psi) for seg in segs])


@dataclass
class VehicleRecord:
    id: int
    approach: int
    intent: str
    lane: int
    entry_slot: int
    path: ReferencePath
    length: float = 4.0
    width: float = 2.0
    true_state: Optional[VehicleState] = None
    active: bool = False
    entered: bool = False
    exit_slot: Optional[int] = None

    def entry_state(self, v_ref: float) -> VehicleState:
        x, y, th = self.path.state_at(0.0)
        return VehicleState(x, y, th, v_ref)


def reference_states(rec: VehicleRecord, from_slot: int, M: int, v_ref: float,
                     tau: float = 0.1) -> np.ndarray:
    """M+1 reference states sampled along the path at the passing speed,
    time-anchored to the vehicle's entry slot; clamps at the path end."""
    out = np.empty((M + 1, 4))
    s0 = (from_slot - rec.entry_slot) * v_ref * tau
    for k in range(M + 1):
        x, y, th = rec.path.state_at(s0 + k * v_ref * tau)
        out[k] = (x, y, th, v_ref)
    return out


def lane_intent_probs(mix: tuple[float, float, float], lanes_per_road: int):
    """Per-lane conditional intent distributions preserving the global mix.

    mix = (p_left, p_straight, p_right).  With two lanes per road, turns are
    tied to their lane (left -> inner, right -> outer) and straight-through
    fills the remainder of each lane's share.
    """
    pl, ps, pr = mix
    if abs(pl + ps + pr - 1.0) > 1e-9:
        raise ValueError("intent mix must sum to 1")
    if lanes_per_road == 1:
        return [{LEFT: pl, STRAIGHT: ps, RIGHT: pr}]
    if lanes_per_road == 2:
        if pl > 0.5 + 1e-12 or pr > 0.5 + 1e-12:
            raise ValueError("turn shares above 0.5 are unreachable with tied lanes")
        return [
            {LEFT: 2 * pl, STRAIGHT: 1.0 - 2 * pl, RIGHT: 0.0},
            {LEFT: 0.0, STRAIGHT: 1.0 - 2 * pr, RIGHT: 2 * pr},
        ]
    raise ValueError("only 1 or 2 lanes per road are modeled")


def spawn_traffic(geom: IntersectionGeometry, rate: float,
                  mix: tuple[float, float, float], horizon_slots: int, rng,
                  tau: float = 0.1, v_ref: float = 20.0,
                  num_vehicles: Optional[int] = None,
                  min_headway: float = 8.0) -> list[VehicleRecord]:
    """Per-lane Poisson arrivals; same-lane spawn gaps keep at least
    min_headway meters at the reference speed.  With num_vehicles set, the
    first N arrivals (by time) are kept (fixed-N batch mode)."""
    if rate < 0:
        raise ValueError("rate must be nonnegative")
    duration = horizon_slots * tau
    probs = lane_intent_probs(mix, geom.lanes_per_road)
    arrivals = []  # (time, approach, lane, intent)
    min_gap = min_headway / max(v_ref, 1e-9)
    for approach in range(4):
        for lane in range(geom.lanes_per_road):
            t = 0.0
            last = -math.inf
            while rate > 0:
                t += rng.exponential(1.0 / rate)
                if t > duration:
                    break
                t_eff = max(t, last + min_gap)
                if t_eff > duration:
                    break
                last = t_eff
                intent = _draw_intent(probs[lane], rng)
                arrivals.append((t_eff, approach, lane, intent))
    arrivals.sort(key=lambda a: a[0])
    if num_vehicles is not None:
        arrivals = arrivals[:num_vehicles]
    records = []
    for vid, (t, approach, lane, intent) in enumerate(arrivals):
        records.append(VehicleRecord(
            id=vid, approach=approach, intent=intent, lane=lane,
            entry_slot=int(math.ceil(t / tau)),
            path=build_path(geom, approach, intent, lane)))
    return records


def _draw_intent(probs: dict, rng) -> str:
    u = rng.random()
    acc = 0.0
    for intent in INTENTS:
        acc += probs.get(intent, 0.0)
        if u < acc:
            return intent
    return INTENTS[-1]


def check_collisions(records: list[VehicleRecord], d_min: float):
    """Pairs of active vehicles whose barycenters are within d_min."""
    out = []
    act = [r for r in records if r.active and r.true_state is not None]
    for a in range(len(act)):
        for b in range(a + 1, len(act)):
            ri, rj = act[a], act[b]
            d = math.hypot(ri.true_state.x - rj.true_state.x,
                           ri.true_state.y - rj.true_state.y)
            if d <= d_min:
                out.append((ri.id, rj.id, d))
    return out


def rectangle_overlap(ri: VehicleRecord, rj: VehicleRecord) -> bool:
    """Oriented-rectangle intersection (separating-axis test); diagnostic
    metric only, does not drive the acceptance numbers."""
    def corners(r):
        s = r.true_state
        c, sn = math.cos(s.theta), math.sin(s.theta)
        fwd = np.array([c, sn])
        left = np.array([-sn, c])
        center = np.array([s.x, s.y])
        out = []
        for dx in (-r.length / 2, r.length / 2):
            for dy in (-r.width / 2, r.width / 2):
                out.append(center + dx * fwd + dy * left)
        return np.array(out)

    ca, cb = corners(ri), corners(rj)
    for rect in (ri, rj):
        th = rect.true_state.theta
        for ax in (np.array([math.cos(th), math.sin(th)]),
                   np.array([-math.sin(th), math.cos(th)])):
            pa, pb = ca @ ax, cb @ ax
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


class CollisionTracker:
    """Turns per-slot contact pairs into contact episodes (one event per
    onset, carrying the minimum distance over the episode)."""

    def __init__(self):
        self._open: dict[tuple[int, int], list] = {}
        self.events: list[tuple[int, tuple[int, int], float]] = []

    def observe(self, slot: int, contacts):
        seen = set()
        for (i, j, d) in contacts:
            key = (min(i, j), max(i, j))
            seen.add(key)
            if key in self._open:
                ep = self._open[key]
                ep[2] = min(ep[2], d)
            else:
                self._open[key] = [slot, key, d]
        for key in list(self._open):
            if key not in seen:
                self.events.append(tuple(self._open.pop(key)))

    def finish(self):
        for key in list(self._open):
            self.events.append(tuple(self._open.pop(key)))
        self.events.sort(key=lambda e: (e[0], e[1]))
        return self.events


@dataclass
class RunMetrics:
    collision_events: list = field(default_factory=list)
    total_passing_time: float = 0.0
    per_vehicle_times: dict = field(default_factory=dict)
    objective_samples: list = field(default_factory=list)
    update_counts: dict = field(default_factory=dict)
    slots: int = 0
    timed_out: bool = False

    @property
    def collided(self) -> bool:
        return len(self.collision_events) > 0

    @property
    def objective_mean(self) -> float:
        return float(np.mean(self.objective_samples)) if self.objective_samples else 0.0
