"""Collision-avoidance planning for the AV.

The planner samples constant-acceleration longitudinal profiles along
the fixed task route and keeps the one with the most terminal progress
that survives two screens against each neighbor's top-k predicted
trajectories:

  * a time-aligned footprint sweep (two discs per vehicle, 0.1 s grid) —
    catches same-lane and merging contact;
  * an arrival-time window at every geometric crossing between the
    route and the predicted trajectory — the window is 1.0 s plus an
    interaction-protection buffer that grows with closing speed.

Agents currently in the AV's rear sector are not planned against: the
background traffic never reacts to the AV, so a follower can always
ram a braking AV no matter what the planner does (scored separately).
If no profile survives, the AV stops along its path at -4 m/s^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError, ParameterError
from ..lanes import Path

# Appendix fit of the minimum protection window, quartic in the speed
# difference (m/s) and quadratic in the heading difference (rad).
PROTECTION_DV = (3.73e-5, 6e-6, 1.2365e-2, 3.338e-2, -1.165)
PROTECTION_DTHETA = (-0.171, 0.095, -1.2735)

CANDIDATE_ACCELS = (-4.0, -2.0, -1.0, 0.0, 1.0, 2.0)
STOP_ACCEL = -4.0
SAFETY_BUFFER = 1.0          # s, base arrival-gap separation
REAR_SECTOR = math.radians(135.0)


def _horner(coeffs, x: float) -> float:
    acc = 0.0
    for c in coeffs:
        acc = acc * x + c
    return acc


def protection_time_dv(dv: float) -> float:
    """Protection window from the speed difference (seconds)."""
    return _horner(PROTECTION_DV, float(dv))


def protection_time_dtheta(dtheta: float) -> float:
    """Protection window from the heading difference (seconds)."""
    return _horner(PROTECTION_DTHETA, float(dtheta))


def protection_time(dv: float, dtheta: float) -> float:
    """Combined buffer: the larger of the two fits, floored at zero
    (both polynomials are negative near the origin, so benign
    encounters add nothing)."""
    return max(0.0, protection_time_dv(dv), protection_time_dtheta(dtheta))


@dataclass(frozen=True)
class SimConfig:
    sim_dt: float = 0.1
    plan_interval: float = 0.5
    pred_horizon: float = 6.0      # s
    pred_dt: float = 0.5           # prediction point spacing
    pred_radius: float = 50.0      # m, neighbors considered at all
    rc_radius: float = 40.0        # m, deceleration-effort metric radius
    k_plan: int = 1                # predicted modes checked per agent
    stop_decel: float = 4.0        # magnitude, m/s^2
    av_length: float = 4.0
    av_width: float = 1.8
    stationary_eps: float = 0.1    # m/s

    def __post_init__(self):
        ratio = self.plan_interval / self.sim_dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ParameterError(
                "plan_interval must be a multiple of sim_dt")
        if self.k_plan < 1:
            raise ParameterError("k_plan must be >= 1")

    @property
    def plan_ticks(self) -> int:
        return int(round(self.plan_interval / self.sim_dt))

    @property
    def horizon_ticks(self) -> int:
        return int(round(self.pred_horizon / self.sim_dt))


# -- footprints and collision test ---------------------------------------------


def footprint_discs(length: float, width: float):
    """Two-disc approximation: radius and per-disc center offsets along
    the heading axis."""
    radius = math.hypot(length / 4.0, width / 2.0)
    return radius, (-length / 4.0, length / 4.0)


def disc_centers(states: np.ndarray, length: float, width: float):
    """states [T, >=3] (x, y, yaw, ...) -> centers [T, 2, 2], radius."""
    radius, offsets = footprint_discs(length, width)
    xy = states[:, :2]
    heading = np.stack([np.cos(states[:, 2]), np.sin(states[:, 2])], axis=1)
    centers = np.stack([xy + off * heading for off in offsets], axis=1)
    return centers, radius


def collision_check(traj_a: np.ndarray, footprint_a, traj_b: np.ndarray,
                    footprint_b, dt: float):
    """First contact time between two time-aligned [T, 3+] pose arrays,
    or None. Boundary contact counts (closed condition)."""
    n = min(len(traj_a), len(traj_b))
    if n == 0:
        return None
    ca, ra = disc_centers(np.asarray(traj_a, float)[:n], *footprint_a)
    cb, rb = disc_centers(np.asarray(traj_b, float)[:n], *footprint_b)
    # pairwise disc distances per step: [T, 2, 2]
    d = np.linalg.norm(ca[:, :, None, :] - cb[:, None, :, :], axis=-1)
    hit = np.any(d <= ra + rb + 1e-12, axis=(1, 2))
    idx = np.argmax(hit)
    if not hit[idx]:
        return None
    return float(idx * dt)


def resample_prediction(points: np.ndarray, pred_dt: float, sim_dt: float,
                        start_xy=None) -> np.ndarray:
    """Linear interpolation of waypoints onto the sim grid -> [T, 3]
    (x, y, yaw). ``start_xy`` anchors the segment before the first
    waypoint; headings come from consecutive differences."""
    pts = np.asarray(points, dtype=float)
    if start_xy is not None:
        pts = np.vstack([np.asarray(start_xy, float)[None, :2], pts])
        t_knots = np.arange(len(pts)) * pred_dt
    else:
        t_knots = (1 + np.arange(len(pts))) * pred_dt
        t_knots = t_knots - t_knots[0]
    t_grid = np.arange(0.0, t_knots[-1] + 1e-9, sim_dt)
    x = np.interp(t_grid, t_knots, pts[:, 0])
    y = np.interp(t_grid, t_knots, pts[:, 1])
    dx = np.gradient(x) if len(x) > 1 else np.zeros_like(x)
    dy = np.gradient(y) if len(y) > 1 else np.zeros_like(y)
    speed = np.hypot(dx, dy)
    yaw = np.where(speed > 1e-9, np.arctan2(dy, dx), 0.0)
    # carry the last confident heading through stationary stretches
    for i in range(1, len(yaw)):
        if speed[i] <= 1e-9:
            yaw[i] = yaw[i - 1]
    return np.stack([x, y, yaw], axis=1)


# -- profile rollout -------------------------------------------------------------


def roll_profile(route: Path, s0: float, v0: float, accel: float,
                 config: SimConfig):
    """Constant-acceleration rollout along the route.

    Returns (poses [T+1, 3], arc [T+1], speeds [T+1]); speeds clamp to
    [0, local speed limit] and arc length saturates at the route end.
    """
    n = config.horizon_ticks
    s, v = float(s0), float(v0)
    arc = [s]
    speeds = [v]
    for _ in range(n):
        s = min(s + v * config.sim_dt, route.length)
        v = v + accel * config.sim_dt
        limit = route.speed_limit_at(s)
        hi = limit if np.isfinite(limit) else np.inf
        v = float(min(max(v, 0.0), hi))
        arc.append(s)
        speeds.append(v)
    poses = np.array([route.pose_at(si) for si in arc])
    return poses, np.array(arc), np.array(speeds)


# -- the planner -----------------------------------------------------------------


@dataclass
class PlanResult:
    accel: float
    stopped: bool                 # True when the stop fallback fired
    terminal_progress: float
    checked: int = 0              # predicted trajectories screened
    rejected: dict = field(default_factory=dict)  # accel -> reason


def _bearing(from_pose, to_xy) -> float:
    dx = to_xy[0] - from_pose[0]
    dy = to_xy[1] - from_pose[1]
    return _wrap(math.atan2(dy, dx) - from_pose[2])


def _wrap(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def _first_arrival(arc: np.ndarray, s_target: float, dt: float):
    """Earliest time the rollout reaches arc length s_target, or None."""
    idx = np.nonzero(arc >= s_target - 1e-9)[0]
    if idx.size == 0:
        return None
    return float(idx[0] * dt)


def _crossing_conflict(route, av_arc, agent_track, agent_speed, av_speed,
                       config: SimConfig) -> bool:
    """Arrival-gap screen at geometric crossings of route x prediction."""
    if len(agent_track) < 2:
        return False
    xy = agent_track[:, :2]
    keep_idx = [0]
    for i in range(1, len(xy)):
        if np.hypot(*(xy[i] - xy[keep_idx[-1]])) > 1e-6:
            keep_idx.append(i)
    if len(keep_idx) < 2:
        # predicted (near-)stationary; the footprint sweep covers that
        return False
    pts = xy[keep_idx]
    track = Path(pts)
    track_cum = np.concatenate(
        [[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
    for s_route, s_track in route.crossings(track):
        t_av = _first_arrival(av_arc, s_route, config.sim_dt)
        if t_av is None:
            continue
        # first original tick whose traveled arc reaches the crossing
        j = min(int(np.searchsorted(track_cum, s_track - 1e-9)),
                len(keep_idx) - 1)
        t_agent = keep_idx[j] * config.sim_dt
        dtheta = _wrap(route.pose_at(s_route)[2]
                       - track.pose_at(s_track)[2])
        buffer = SAFETY_BUFFER + protection_time(av_speed - agent_speed,
                                                 dtheta)
        if abs(t_av - t_agent) <= buffer:
            return True
    return False


def plan(world, route: Path, route_s: float, predictions: dict,
         config: SimConfig) -> PlanResult:
    """Choose the AV's acceleration for the next plan interval.

    ``predictions`` maps vid -> (PredictionSet-like with .refined/.probs,
    current state [x, y, yaw, v]). Returns the surviving profile with
    the largest terminal arc-length progress (ties prefer the gentler,
    i.e. larger, acceleration); the -4 stop profile is the fallback
    whether or not it is collision-free.
    """
    if route.length <= 0:
        raise ConfigurationError("planning needs a non-empty route")
    av = world.av
    av_pose = world.pose_of(av)
    av_speed = av.v

    # unpack per-agent candidate tracks once (shared by all profiles)
    tracks = []
    checked = 0
    for vid, (pred, state) in sorted(predictions.items()):
        if _is_rear(av_pose, state):
            continue
        order = np.argsort(-np.asarray(pred.probs), kind="stable")
        for mode in order[:min(config.k_plan, len(order))]:
            track = resample_prediction(pred.refined[mode], config.pred_dt,
                                        config.sim_dt, start_xy=state[:2])
            tracks.append((track, float(state[3])))
            checked += 1

    av_fp = (config.av_length, config.av_width)
    agent_fp = (4.0, 1.8)
    best = None
    rejected = {}
    for accel in CANDIDATE_ACCELS:
        poses, arc, speeds = roll_profile(route, route_s, av_speed, accel,
                                          config)
        ok = True
        for track, agent_v in tracks:
            if collision_check(poses, av_fp, track, agent_fp,
                               config.sim_dt) is not None:
                ok = False
                rejected[accel] = "overlap"
                break
            if _crossing_conflict(route, arc, track, agent_v, av_speed,
                                  config):
                ok = False
                rejected[accel] = "crossing-window"
                break
        if not ok:
            continue
        progress = float(arc[-1] - route_s)
        key = (progress, accel)
        if best is None or key > best[0]:
            best = (key, accel, progress)

    if best is None:
        return PlanResult(accel=-config.stop_decel, stopped=True,
                          terminal_progress=0.0, checked=checked,
                          rejected=rejected)
    return PlanResult(accel=best[1], stopped=False,
                      terminal_progress=best[2], checked=checked,
                      rejected=rejected)


def _is_rear(av_pose, state) -> bool:
    return abs(_bearing(av_pose, state[:2])) > REAR_SECTOR
