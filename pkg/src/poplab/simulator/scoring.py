"""Scores for closed-loop traces.

dist   — route progress in meters (arc length, capped at the goal).
jerk   — mean |delta accel| / dt over the AV's applied accelerations.
rc     — reactive-caution: mean braking max(0, -a) over every
         (tick, background agent within rc_radius) pair.
ct/rct — contact events, counted once per (agent, contiguous overlap
         interval) and classified at the interval's first tick: if the
         AV was practically stationary the event is charged to neither
         column; if the agent sat in the AV's rear sector it counts as
         rct (rear contact — the follower's fault); otherwise ct.

Footprints use the same two-disc envelope as the planner, so "contact"
here is the planner's own collision definition, slightly conservative
against true rectangle overlap. Background vehicles are assumed to
carry the default 4.0 x 1.8 body.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .planner import REAR_SECTOR, SimConfig, footprint_discs

AGENT_LENGTH = 4.0
AGENT_WIDTH = 1.8


@dataclass(frozen=True)
class SimMetrics:
    dist: float
    jerk: float
    rc: float
    ct: int
    rct: int

    def values(self) -> dict:
        return {"dist": self.dist, "jerk": self.jerk, "rc": self.rc,
                "ct": self.ct, "rct": self.rct}


def _discs(state, length: float, width: float):
    x, y, yaw = state[0], state[1], state[2]
    radius, offsets = footprint_discs(length, width)
    c, s = np.cos(yaw), np.sin(yaw)
    centers = np.array([[x + off * c, y + off * s] for off in offsets])
    return centers, radius


def poses_overlap(state_a, dims_a, state_b, dims_b) -> bool:
    """Two-disc footprint intersection test for a single pose pair."""
    ca, ra = _discs(state_a, *dims_a)
    cb, rb = _discs(state_b, *dims_b)
    d = np.linalg.norm(ca[:, None, :] - cb[None, :, :], axis=-1)
    return bool(np.any(d <= ra + rb + 1e-12))


def _bearing_from_av(av_state, agent_state) -> float:
    dx = agent_state[0] - av_state[0]
    dy = agent_state[1] - av_state[1]
    ang = np.arctan2(dy, dx) - av_state[2]
    return float((ang + np.pi) % (2.0 * np.pi) - np.pi)


def contact_events(rows, config: SimConfig):
    """(vid, start_tick, kind) per contiguous overlap interval;
    kind is "ct", "rct" or "stationary"."""
    av_dims = (config.av_length, config.av_width)
    agent_dims = (AGENT_LENGTH, AGENT_WIDTH)
    events = []
    open_since: dict[str, int] = {}
    for i, row in enumerate(rows):
        av = row["av_state"]
        touching = set()
        for vid, state in row["agents"].items():
            if poses_overlap(av, av_dims, state, agent_dims):
                touching.add(vid)
                if vid not in open_since:
                    open_since[vid] = i
                    if av[3] < config.stationary_eps:
                        kind = "stationary"
                    elif abs(_bearing_from_av(av, state)) > REAR_SECTOR:
                        kind = "rct"
                    else:
                        kind = "ct"
                    events.append((vid, i, kind))
        for vid in list(open_since):
            if vid not in touching:
                del open_since[vid]
    return events


def score_scenario(trace, config: SimConfig) -> SimMetrics:
    rows = trace.rows
    if not rows:
        return SimMetrics(0.0, 0.0, 0.0, 0, 0)

    dist = max(0.0, rows[-1]["av_s"] - trace.av_start_s)

    accels = np.array([r["plan_accel"] for r in rows])
    if len(accels) >= 2:
        jerk = float(np.mean(np.abs(np.diff(accels))) / config.sim_dt)
    else:
        jerk = 0.0

    braking = []
    for row in rows:
        av = row["av_state"]
        for vid, state in row["agents"].items():
            if np.hypot(state[0] - av[0], state[1] - av[1]) \
                    <= config.rc_radius:
                a = row["accels"].get(vid)
                if a is not None:
                    braking.append(max(0.0, -a))
    rc = float(np.mean(braking)) if braking else 0.0

    ct = rct = 0
    for _, _, kind in contact_events(rows, config):
        if kind == "ct":
            ct += 1
        elif kind == "rct":
            rct += 1
    return SimMetrics(dist=dist, jerk=jerk, rc=rc, ct=ct, rct=rct)
