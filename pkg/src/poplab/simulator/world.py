"""Microscopic traffic world: vehicles on arc-length paths under IDM.

Background vehicles follow their own paths and interact with each
other in two ways:

  * longitudinal car-following against the nearest vehicle ahead whose
    position projects onto the follower's path (this covers same-lane
    leaders and merged/shared downstream geometry alike);
  * crossing-conflict yielding: at pre-computed centerline crossings,
    the vehicle that would arrive later (by ETA, ties by id) treats the
    conflict point as a virtual stop line while the earlier vehicle is
    within the interaction window.

The AV is *invisible* to background traffic — background agents never
follow, yield to, or brake for it. Collision avoidance is entirely the
AV planner's job, which is what makes prediction quality matter in the
closed-loop benchmark (rear-end contacts caused by blind followers are
scored separately).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ContractViolation
from ..lanes import Path
from .idm import IdmParams, idm_accel

LEADER_HORIZON = 60.0       # m, ignore leaders further ahead
LATERAL_TOLERANCE = 1.5     # m, projection distance to count as "on my path"
CONFLICT_HORIZON = 40.0     # m, look-ahead for crossing conflicts
CONFLICT_WINDOW = 3.0       # s, ETA separation below which the later yields
CONFLICT_MARGIN = 3.0       # m, virtual stop line distance before the crossing
MIN_ETA_SPEED = 0.3         # m/s, floor when converting distance to ETA


@dataclass
class Vehicle:
    vid: int
    path_id: str
    s: float
    v: float
    params: IdmParams = field(default_factory=IdmParams)
    kind: str = "idm"            # "idm" | "av"
    length: float = 4.0
    width: float = 1.8
    spawn_t: float = 0.0         # enters the world at this sim time
    active: bool = True          # False once the path end is reached

    def copy(self) -> "Vehicle":
        return replace(self)


class World:
    """Deterministic discrete-time traffic state machine."""

    def __init__(self, paths: dict, vehicles: list, dt: float = 0.1):
        if dt <= 0:
            raise ContractViolation("dt must be positive")
        self.paths = paths
        self.vehicles = list(vehicles)
        self.dt = dt
        self.t = 0.0
        av_ids = [v.vid for v in vehicles if v.kind == "av"]
        if len(av_ids) > 1:
            raise ContractViolation("at most one AV per world")
        self.av_id = av_ids[0] if av_ids else None
        ids = [v.vid for v in vehicles]
        if len(set(ids)) != len(ids):
            raise ContractViolation("vehicle ids must be unique")
        self._by_id = {v.vid: v for v in self.vehicles}
        self.conflicts = self._build_conflicts(paths)

    @staticmethod
    def _build_conflicts(paths: dict) -> dict:
        """conflicts[pid_a] = list of (s_a, pid_b, s_b) centerline crossings."""
        out = {pid: [] for pid in paths}
        pids = sorted(paths)
        for i, pa in enumerate(pids):
            for pb in pids[i + 1:]:
                for s_a, s_b in paths[pa].crossings(paths[pb]):
                    out[pa].append((s_a, pb, s_b))
                    out[pb].append((s_b, pa, s_a))
        for pid in out:
            out[pid].sort()
        return out

    # -- queries ---------------------------------------------------------

    def vehicle(self, vid: int) -> Vehicle:
        return self._by_id[vid]

    @property
    def av(self) -> Vehicle | None:
        return None if self.av_id is None else self._by_id[self.av_id]

    def present(self, veh: Vehicle) -> bool:
        return veh.active and self.t >= veh.spawn_t - 1e-9

    def pose_of(self, veh: Vehicle):
        return self.paths[veh.path_id].pose_at(veh.s)

    def state_of(self, veh: Vehicle) -> np.ndarray:
        x, y, yaw = self.pose_of(veh)
        return np.array([x, y, yaw, veh.v])

    def clone(self) -> "World":
        out = World.__new__(World)
        out.paths = self.paths          # immutable, shared
        out.conflicts = self.conflicts  # derived from paths, shared
        out.dt = self.dt
        out.t = self.t
        out.av_id = self.av_id
        out.vehicles = [v.copy() for v in self.vehicles]
        out._by_id = {v.vid: v for v in out.vehicles}
        return out

    # -- IDM interaction resolution ---------------------------------------

    def _background(self):
        return [
            v for v in self.vehicles
            if v.kind == "idm" and self.present(v)
        ]

    def _leader_gap(self, veh: Vehicle, others: list, positions: dict):
        """(gap, leader_speed) of the nearest vehicle ahead on this path."""
        path = self.paths[veh.path_id]
        best = None
        for other in others:
            if other.vid == veh.vid:
                continue
            if other.path_id == veh.path_id:
                gap = other.s - veh.s
            else:
                s_proj, lateral = path.project(positions[other.vid])
                if lateral > LATERAL_TOLERANCE:
                    continue
                gap = s_proj - veh.s
            if 0.0 < gap <= LEADER_HORIZON:
                if best is None or gap < best[0]:
                    best = (gap, other.v)
        return best

    def _conflict_gap(self, veh: Vehicle, others: list):
        """Virtual stationary leader imposed by crossing-conflict yielding."""
        best = None
        for s_cp, pid_other, s_cp_other in self.conflicts.get(veh.path_id, ()):
            d_self = s_cp - veh.s
            if not (0.0 < d_self <= CONFLICT_HORIZON):
                continue
            eta_self = d_self / max(veh.v, MIN_ETA_SPEED)
            for other in others:
                if other.vid == veh.vid or other.path_id != pid_other:
                    continue
                d_other = s_cp_other - other.s
                if d_other > CONFLICT_HORIZON or d_other < -other.length:
                    continue
                eta_other = max(d_other, 0.0) / max(other.v, MIN_ETA_SPEED)
                other_first = (eta_other, other.vid) < (eta_self, veh.vid)
                if other_first and (eta_self - eta_other) < CONFLICT_WINDOW:
                    gap = d_self - CONFLICT_MARGIN
                    if best is None or gap < best[0]:
                        best = (gap, 0.0)
        return best

    # -- integration -------------------------------------------------------

    def step(self, av_accel: float = 0.0) -> dict:
        """Advance one tick of explicit Euler; returns accel per vid.

        Background accelerations are computed from the pre-step state
        snapshot, so update order never matters.
        """
        background = self._background()
        positions = {
            v.vid: np.asarray(self.pose_of(v)[:2]) for v in background
        }
        accels: dict[int, float] = {}
        for veh in background:
            path = self.paths[veh.path_id]
            candidates = [
                c for c in (
                    self._leader_gap(veh, background, positions),
                    self._conflict_gap(veh, background),
                ) if c is not None
            ]
            limit = path.speed_limit_at(veh.s)
            params = veh.params
            if np.isfinite(limit) and limit < params.v0:
                params = params.with_v0(max(limit, 0.5))
            if candidates:
                gap, v_lead = min(candidates, key=lambda c: c[0])
                accels[veh.vid] = idm_accel(veh.v, v_lead, gap, params)
            else:
                accels[veh.vid] = idm_accel(veh.v, None, None, params)
        if self.av_id is not None and self.present(self.av):
            accels[self.av_id] = float(av_accel)

        for veh in self.vehicles:
            if not self.present(veh):
                continue
            a = accels.get(veh.vid, 0.0)
            veh.s += veh.v * self.dt
            veh.v = max(veh.v + a * self.dt, 0.0)
            if veh.s >= self.paths[veh.path_id].length:
                veh.active = False
        self.t += self.dt
        return accels
