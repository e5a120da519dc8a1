"""Synthetic scene generation.

Scenes are produced by actually simulating IDM traffic on procedurally
built road layouts (straight roads, curves, merges, four-way
intersections) and then slicing each vehicle's trace into a T_H history
plus a T_F future. Futures are therefore dynamically feasible by
construction, and route choice at junctions gives the data genuine
multi-modality.

Speed structure is deliberately informative: vehicles carry hidden
desired speeds, and turn zones / slow zones impose local limits, so a
longer observed history reveals acceleration trends and maneuver intent
that a single frame cannot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GenerationError, ParameterError
from .lanes import Path, arc, join, straight
from .scene import LANE_ATTR_DIM, AgentHistory, LanePolyline, Scene
from .simulator.idm import IdmParams
from .simulator.world import Vehicle, World

FAMILIES = ("straight", "curve", "merge", "intersection")

LANE_SAMPLE_SPACING = 5.0  # m between emitted lane polyline points
MIN_SPAWN_GAP = 14.0       # m along-path separation between spawned vehicles


@dataclass(frozen=True)
class GenConfig:
    n_scenes: int
    t_h: int = 20
    t_f: int = 30
    dt: float = 0.1
    min_agents: int = 2
    max_agents: int = 6
    families: tuple = FAMILIES
    warmup_steps: int = 10
    substeps: int = 1      # world integration ticks per emitted state
    # probability that a vehicle re-draws its target speed at a random
    # tick inside the history window ("the driver changes their mind").
    # The future then depends on a trend that only the recent history
    # reveals, so truncating observations genuinely costs accuracy.
    trend_switch_prob: float = 0.0
    trend_switch_range: tuple = (3.0, 14.0)

    def __post_init__(self):
        if self.n_scenes < 1:
            raise ParameterError("n_scenes must be >= 1")
        if self.t_h < 1 or self.t_f < 1 or self.dt <= 0:
            raise ParameterError("t_h, t_f must be >= 1 and dt > 0")
        if not (1 <= self.min_agents <= self.max_agents):
            raise ParameterError("need 1 <= min_agents <= max_agents")
        if self.substeps < 1:
            raise ParameterError("substeps must be >= 1")
        if not (0.0 <= self.trend_switch_prob <= 1.0):
            raise ParameterError("trend_switch_prob must be in [0, 1]")
        lo, hi = self.trend_switch_range
        if not (0.0 < lo < hi):
            raise ParameterError("trend_switch_range must be 0 < lo < hi")
        unknown = set(self.families) - set(FAMILIES)
        if unknown:
            raise ParameterError(f"unknown families: {sorted(unknown)}")


@dataclass
class RoadLayout:
    """A drivable route set plus the semantic geometry for lane attrs."""

    paths: dict            # route id -> Path
    junction_boxes: list   # (xmin, xmax, ymin, ymax) regions
    crosswalk_boxes: list


# -- layout families -----------------------------------------------------------


def _layout_straight(rng) -> RoadLayout:
    n_lanes = int(rng.integers(1, 3))
    length = 260.0
    paths = {}
    for i in range(n_lanes):
        y = -3.5 * i
        limit = float(rng.choice([8.0, 11.0, 14.0]))
        p = Path(np.linspace([0.0, y], [length, y], 14), np.full(14, limit))
        if rng.random() < 0.5:
            # slow zone in the middle third forces braking/accel phases
            lim = p.speed_limit.copy()
            ss = np.linspace(0, length, 14)
            lim[(ss > 100) & (ss < 160)] = 5.0
            p = Path(p.points, lim)
        paths[f"lane{i}"] = p
    return RoadLayout(paths, [], [])


def _layout_curve(rng) -> RoadLayout:
    radius = float(rng.uniform(18.0, 35.0))
    fast = float(rng.choice([10.0, 12.0, 14.0]))
    slow = float(rng.uniform(5.0, 7.0))
    approach = straight((0.0, 0.0), (100.0, 0.0), n=8)
    bend = arc((100.0, radius), radius, -math.pi / 2, 0.0, n=14)
    exit_ = straight((100.0 + radius, radius), (100.0 + radius, radius + 100.0), n=8)
    path = join([approach, bend, exit_], speed_limits=[fast, slow, fast])
    layout = {"main": path}
    if rng.random() < 0.5:
        # sibling lane, same corridor, offset outward
        approach2 = straight((0.0, -3.5), (100.0, -3.5), n=8)
        bend2 = arc((100.0, radius), radius + 3.5, -math.pi / 2, 0.0, n=14)
        exit2 = straight((100.0 + radius + 3.5, radius),
                         (100.0 + radius + 3.5, radius + 100.0), n=8)
        layout["outer"] = join([approach2, bend2, exit2],
                               speed_limits=[fast, slow, fast])
    return RoadLayout(layout, [], [])


def _layout_merge(rng) -> RoadLayout:
    fast = float(rng.choice([10.0, 12.0]))
    main = straight((0.0, 0.0), (260.0, 0.0), n=16, speed_limit=fast)
    join_x = float(rng.uniform(70.0, 110.0))
    ramp_src = np.array([join_x - 70.0, -28.0])
    approach = straight(ramp_src, (join_x, 0.0), n=8)
    downstream = straight((join_x, 0.0), (260.0, 0.0), n=10)
    ramp = join([approach, downstream], speed_limits=[0.7 * fast, fast])
    return RoadLayout({"main": main, "ramp": ramp}, [], [])


def _layout_intersection(rng) -> RoadLayout:
    arm = 110.0
    half = 10.0  # junction half-width
    fast = float(rng.choice([9.0, 11.0, 13.0]))
    turn_speed = 5.0
    paths = {}

    # through routes (west->east and south->north), lane offset 2 m
    paths["we"] = straight((-arm, -2.0), (arm, -2.0), n=16, speed_limit=fast)
    paths["sn"] = straight((2.0, -arm), (2.0, arm), n=16, speed_limit=fast)

    # right turn west->south: approach along y=-2, quarter arc, exit down x=-2...
    # (arc centers chosen so tangents match the straights)
    r_r = half - 2.0
    wr = join(
        [
            straight((-arm, -2.0), (-half, -2.0), n=8),
            arc((-half, -2.0 - r_r), r_r, math.pi / 2, 0.0, n=10),
            straight((-half + r_r, -2.0 - r_r), (-half + r_r, -arm), n=8),
        ],
        speed_limits=[fast, turn_speed, fast],
    )
    paths["w_right"] = wr

    # left turn west->north
    r_l = half + 2.0
    wl = join(
        [
            straight((-arm, -2.0), (-half, -2.0), n=8),
            arc((-half, -2.0 + r_l), r_l, -math.pi / 2, 0.0, n=12),
            straight((-half + r_l, -2.0 + r_l), (-half + r_l, arm), n=8),
        ],
        speed_limits=[fast, turn_speed, fast],
    )
    paths["w_left"] = wl

    # north->south through on x=-2 (opposing the s->n lane)
    paths["ns"] = straight((-2.0, arm), (-2.0, -arm), n=16, speed_limit=fast)

    keep = list(paths)
    rng.shuffle(keep)
    keep = sorted(keep[: int(rng.integers(3, len(paths) + 1))])
    paths = {k: paths[k] for k in keep}

    box = (-half - 1, half + 1, -half - 1, half + 1)
    cw = (-half - 4, -half - 1, -8.0, 8.0)
    return RoadLayout(paths, [box], [cw])


_BUILDERS = {
    "straight": _layout_straight,
    "curve": _layout_curve,
    "merge": _layout_merge,
    "intersection": _layout_intersection,
}


# -- lane polyline emission ------------------------------------------------


def _heading_octant(yaw: float) -> float:
    return float(int(np.floor((yaw + math.pi) / (math.pi / 4))) % 8)


def _speed_class(limit: float) -> float:
    if limit < 7.0:
        return 0.0
    if limit < 12.0:
        return 1.0
    return 2.0


def _in_boxes(point, boxes) -> bool:
    x, y = point
    return any(x0 <= x <= x1 and y0 <= y <= y1 for x0, x1, y0, y1 in boxes)


def lanes_from_layout(layout: RoadLayout) -> list:
    lanes = []
    for pid in sorted(layout.paths):
        path = layout.paths[pid]
        pts, ss = path.resample(LANE_SAMPLE_SPACING)
        attrs = np.zeros((len(pts), LANE_ATTR_DIM))
        for i, (pt, s) in enumerate(zip(pts, ss)):
            s_mid = min(s + LANE_SAMPLE_SPACING / 2, path.length)
            _, _, yaw = path.pose_at(min(s, path.length - 0.5))
            attrs[i, 0] = 1.0 if _in_boxes(pt, layout.junction_boxes) else 0.0
            attrs[i, 1] = 1.0 if _in_boxes(pt, layout.crosswalk_boxes) else 0.0
            attrs[i, 2] = _speed_class(path.speed_limit_at(s_mid))
            attrs[i, 3] = _heading_octant(yaw)
        lanes.append(LanePolyline(pts, attrs))
    return lanes


# -- vehicle placement -------------------------------------------------------


def _place_vehicles(layout: RoadLayout, n_agents: int, rng) -> list:
    """Spawn up to n_agents vehicles with safe along-corridor separation.

    Candidate slots are laid out along each path's spawn zone and taken
    in random order; a slot is rejected when its position projects too
    close to an already placed vehicle on any path (so merging and
    overlapping corridors are respected). Returns however many fit —
    the caller enforces its minimum.
    """
    slots = []
    for pid in sorted(layout.paths):
        path = layout.paths[pid]
        s = 5.0
        while s < 0.45 * path.length:
            slots.append((pid, s + float(rng.uniform(0.0, 4.0))))
            s += MIN_SPAWN_GAP + 2.0
    order = rng.permutation(len(slots))

    placed: list[Vehicle] = []
    for idx in order:
        if len(placed) == n_agents:
            break
        pid, s = slots[idx]
        path = layout.paths[pid]
        pos = path.point_at(s)
        clear = True
        for other in placed:
            opath = layout.paths[other.path_id]
            s_on_other, lat = opath.project(pos)
            if lat < 3.0 and abs(s_on_other - other.s) < MIN_SPAWN_GAP:
                clear = False
                break
            s_mine, lat2 = path.project(opath.point_at(other.s))
            if lat2 < 3.0 and abs(s_mine - s) < MIN_SPAWN_GAP:
                clear = False
                break
        if not clear:
            continue
        v0 = float(rng.uniform(6.0, 13.0))
        limit = path.speed_limit_at(s)
        v_init = min(v0, limit if np.isfinite(limit) else v0)
        v_init *= float(rng.uniform(0.6, 1.0))
        placed.append(
            Vehicle(
                vid=len(placed), path_id=pid, s=s, v=v_init,
                params=IdmParams().with_v0(v0),
            )
        )
    return placed


# -- scene assembly -----------------------------------------------------------


def generate_scene(config: GenConfig, seed: int, scene_index: int) -> Scene:
    rng = np.random.default_rng(np.random.SeedSequence([seed, scene_index]))
    family = str(rng.choice(list(config.families)))
    layout = _BUILDERS[family](rng)
    n_agents = int(rng.integers(config.min_agents, config.max_agents + 1))
    vehicles = _place_vehicles(layout, n_agents, rng)
    if len(vehicles) < config.min_agents:
        raise GenerationError(
            f"scene {scene_index}: layout holds only {len(vehicles)} agents, "
            f"config requires at least {config.min_agents}"
        )
    n_agents = len(vehicles)

    world = World(layout.paths, vehicles, dt=config.dt / config.substeps)
    horizon = config.warmup_steps + config.t_h + config.t_f

    # pre-draw trend switches (fixed rng order, applied mid-history only,
    # so every switch is visible in the tail of the observation window)
    w = config.warmup_steps
    switches = {}
    if config.trend_switch_prob > 0.0 and config.t_h >= 4:
        for i in range(n_agents):
            hit = rng.random() < config.trend_switch_prob
            tick = int(rng.integers(w + 1, w + config.t_h - 2))
            frac = rng.random()
            if hit:
                switches[i] = (tick, frac)

    states = np.zeros((n_agents, horizon, 4))
    alive = np.ones((n_agents, horizon), dtype=bool)
    for t in range(horizon):
        for veh in world.vehicles:
            if switches.get(veh.vid, (None,))[0] == t:
                lo_cfg, hi = config.trend_switch_range
                lo = min(max(lo_cfg, 0.75 * veh.v), hi - 0.5)
                veh.params = veh.params.with_v0(
                    lo + switches[veh.vid][1] * (hi - lo))
            states[veh.vid, t] = world.state_of(veh)
            alive[veh.vid, t] = veh.active
        for _ in range(config.substeps):
            world.step()

    hist_slice = slice(w, w + config.t_h)
    fut_slice = slice(w + config.t_h, horizon)
    survivors = [i for i in range(n_agents) if alive[i].all()]
    if not survivors:
        raise GenerationError(
            f"scene {scene_index}: no agent survived the full window"
        )
    focal = int(survivors[int(rng.integers(len(survivors)))])

    agents = []
    futures = []
    for i in range(n_agents):
        agents.append(
            AgentHistory(states[i, hist_slice].copy(),
                         alive[i, hist_slice].copy())
        )
        if alive[i].all():
            futures.append(states[i, fut_slice, :2].copy())
        else:
            futures.append(None)

    return Scene(
        scene_id=f"{family}-{seed}-{scene_index}",
        dt=config.dt,
        agents=agents,
        futures=futures,
        lanes=lanes_from_layout(layout),
        focal_index=focal,
        t_f=config.t_f,
    )


def generate_dataset(config: GenConfig, seed: int) -> list:
    """Deterministic scene list; each scene draws its own seeded stream."""
    return [generate_scene(config, seed, i) for i in range(config.n_scenes)]
