"""Hand-built closed-loop scenario suites.

``standard_suite()`` returns twenty scenarios in five families —
car-following, perpendicular crossings, unprotected left turns, ramp
merges, and curves/mixed traffic. Geometry is fixed; the seeded
``vehicles(seed)`` factory jitters background speeds and spacings a
little so different seeds stress slightly different timings, while
staying inside the envelope where yielding early always avoids
contact (background traffic never reacts to the AV, so the burden of
proof is entirely on the planner).

``occlusion_suite()`` is the reveal benchmark: the conflicting agent
*appears* mid-run (``spawn_t > 0``) close to the conflict point, the
way an occluded vehicle pops into view. The AV's predictor then has
only a handful of valid history steps to work from, which is exactly
the regime where partial-observation robustness shows up as fewer
contacts.

``platoon_world()`` builds an AV-free single-lane platoon used for
long-horizon stability checks of the car-following model.
"""

from __future__ import annotations

import math

import numpy as np

from ..lanes import Path, arc, join, straight
from .idm import IdmParams
from .world import Vehicle, World
from .closedloop import Scenario

SPEED_JITTER = 0.08     # relative, applied to background initial speeds
SPACING_JITTER = 3.0    # m, applied to background initial positions


def _rng(seed: int, salt: int):
    return np.random.default_rng([seed, salt])


def _jitter(rng, vehicles):
    """Perturb speeds/positions mildly; order along a path is kept."""
    out = []
    for v in vehicles:
        dv = 1.0 + rng.uniform(-SPEED_JITTER, SPEED_JITTER)
        ds = rng.uniform(-SPACING_JITTER, SPACING_JITTER)
        out.append(Vehicle(vid=v.vid, path_id=v.path_id,
                           s=max(0.0, v.s + ds), v=max(0.5, v.v * dv),
                           params=v.params, spawn_t=v.spawn_t))
    return out


def _factory(salt: int, vehicles):
    base = tuple(vehicles)

    def build(seed: int):
        return _jitter(_rng(seed, salt), [v.copy() for v in base])

    return build


def scenario_lanes(scenario: Scenario):
    # local import: datagen pulls in simulator.idm for its traffic models
    from ..datagen import RoadLayout, lanes_from_layout
    layout = RoadLayout(scenario.paths, list(scenario.junction_boxes),
                        list(scenario.crosswalk_boxes))
    return lanes_from_layout(layout)


# -- geometry helpers ---------------------------------------------------------


def _graded_lane(length=300.0, limit=11.0, slow=None):
    """Straight lane; optional (s0, s1, v) slow zone with linear tapers."""
    n = int(length // 10) + 1
    ss = np.linspace(0.0, length, n)
    lim = np.full(n, limit)
    if slow is not None:
        s0, s1, v = slow
        lim = np.interp(ss, [0, s0 - 30, s0, s1, s1 + 30, length],
                        [limit, limit, v, v, limit, limit])
    pts = np.stack([ss, np.zeros(n)], axis=1)
    return Path(pts, lim)


def _crossing_paths(cross_x=60.0, route_len=160.0, limit=10.0):
    route = straight((0.0, 0.0), (route_len, 0.0), n=12, speed_limit=limit)
    cross = straight((cross_x, -90.0), (cross_x, 110.0), n=12,
                     speed_limit=limit)
    return {"route": route, "cross": cross}


def _left_turn_paths(limit=10.0):
    arm, half = 110.0, 10.0
    r_l = half + 2.0
    turn = join(
        [
            straight((-arm, -2.0), (-half, -2.0), n=8),
            arc((-half, -2.0 + r_l), r_l, -math.pi / 2, 0.0, n=12),
            straight((-half + r_l, -2.0 + r_l), (-half + r_l, arm), n=8),
        ],
        speed_limits=[limit, 5.0, limit],
    )
    oncoming = straight((arm, 2.0), (-arm, 2.0), n=16, speed_limit=limit)
    return {"turn": turn, "oncoming": oncoming}, \
        [(-half, half, -half, half)]


def _merge_paths(join_x=90.0, limit=10.0):
    main = straight((0.0, 0.0), (300.0, 0.0), n=16, speed_limit=limit)
    ramp = join(
        [
            straight((join_x - 70.0, -28.0), (join_x, 0.0), n=8),
            straight((join_x, 0.0), (300.0, 0.0), n=10),
        ],
        speed_limits=[0.7 * limit, limit],
    )
    return {"main": main, "ramp": ramp}


def _curve_paths(radius=25.0, limit=11.0, slow=6.0):
    path = join(
        [
            straight((0.0, 0.0), (100.0, 0.0), n=8),
            arc((100.0, radius), radius, -math.pi / 2, 0.0, n=14),
            straight((100.0 + radius, radius),
                     (100.0 + radius, radius + 100.0), n=8),
        ],
        speed_limits=[limit, slow, limit],
    )
    return {"main": path}


def _v(vid, path_id, s, v, spawn_t=0.0, v0=None):
    params = IdmParams() if v0 is None else IdmParams(v0=v0)
    return Vehicle(vid=vid, path_id=path_id, s=s, v=v, params=params,
                   spawn_t=spawn_t)


# -- the suites ---------------------------------------------------------------


def standard_suite() -> list:
    out = []

    # car-following
    lane = _graded_lane()
    out.append(Scenario(
        name="follow-steady", paths={"lane": lane}, route_id="lane",
        vehicles=_factory(1, [_v(1, "lane", 35.0, 6.0, v0=6.0)]),
        av_speed=8.0, goal_s=210.0, duration=40.0,
        tags=("follow",)))
    out.append(Scenario(
        name="follow-brake",
        paths={"lane": _graded_lane(slow=(120.0, 170.0, 4.0))},
        route_id="lane",
        vehicles=_factory(2, [_v(1, "lane", 35.0, 9.0, v0=9.0)]),
        av_speed=8.0, goal_s=230.0, duration=45.0,
        tags=("follow",)))
    out.append(Scenario(
        name="follow-platoon", paths={"lane": lane}, route_id="lane",
        vehicles=_factory(3, [_v(1, "lane", 30.0, 7.0, v0=7.0),
                              _v(2, "lane", 52.0, 7.5, v0=7.5),
                              _v(3, "lane", 74.0, 8.0, v0=8.0)]),
        av_speed=8.0, goal_s=210.0, duration=40.0,
        tags=("follow",)))
    out.append(Scenario(
        name="follow-crawl", paths={"lane": lane}, route_id="lane",
        vehicles=_factory(4, [_v(1, "lane", 30.0, 2.0, v0=2.5)]),
        av_speed=8.0, goal_s=120.0, duration=30.0,
        tags=("follow",)))

    # perpendicular crossings
    out.append(Scenario(
        name="cross-single", paths=_crossing_paths(), route_id="route",
        vehicles=_factory(5, [_v(1, "cross", 30.0, 8.0)]),
        av_speed=8.0, duration=30.0,
        tags=("cross",), junction_boxes=((50.0, 70.0, -10.0, 10.0),)))
    out.append(Scenario(
        name="cross-stream", paths=_crossing_paths(), route_id="route",
        vehicles=_factory(6, [_v(1, "cross", 42.0, 8.0),
                              _v(2, "cross", 18.0, 8.0),
                              _v(3, "cross", 0.0, 7.0)]),
        av_speed=8.0, duration=35.0,
        tags=("cross",), junction_boxes=((50.0, 70.0, -10.0, 10.0),)))
    out.append(Scenario(
        name="cross-fast", paths=_crossing_paths(limit=14.0),
        route_id="route",
        vehicles=_factory(7, [_v(1, "cross", 0.0, 14.0)]),
        av_speed=9.0, duration=30.0,
        tags=("cross",), junction_boxes=((50.0, 70.0, -10.0, 10.0),)))
    two_cross = _crossing_paths()
    two_cross["cross2"] = straight((100.0, 110.0), (100.0, -90.0), n=12,
                                   speed_limit=10.0)
    out.append(Scenario(
        name="cross-double", paths=two_cross, route_id="route",
        vehicles=_factory(8, [_v(1, "cross", 28.0, 8.0),
                              _v(2, "cross2", 65.0, 8.0)]),
        av_speed=8.0, duration=35.0,
        tags=("cross",), junction_boxes=((50.0, 70.0, -10.0, 10.0),
                                         (90.0, 110.0, -10.0, 10.0))))

    # unprotected left turns
    lt_paths, lt_boxes = _left_turn_paths()
    out.append(Scenario(
        name="left-gap", paths=lt_paths, route_id="turn",
        vehicles=_factory(9, [_v(1, "oncoming", 55.0, 9.0)]),
        av_speed=8.0, goal_s=180.0, duration=40.0,
        tags=("left",), junction_boxes=tuple(lt_boxes)))
    out.append(Scenario(
        name="left-stream", paths=lt_paths, route_id="turn",
        vehicles=_factory(10, [_v(1, "oncoming", 70.0, 9.0),
                               _v(2, "oncoming", 40.0, 9.0),
                               _v(3, "oncoming", 10.0, 8.0)]),
        av_speed=8.0, goal_s=180.0, duration=45.0,
        tags=("left",), junction_boxes=tuple(lt_boxes)))
    out.append(Scenario(
        name="left-fast", paths=lt_paths, route_id="turn",
        vehicles=_factory(11, [_v(1, "oncoming", 25.0, 12.0)]),
        av_speed=8.0, goal_s=180.0, duration=40.0,
        tags=("left",), junction_boxes=tuple(lt_boxes)))
    out.append(Scenario(
        name="left-clear", paths=lt_paths, route_id="turn",
        vehicles=_factory(12, [_v(1, "oncoming", 0.0, 7.0)]),
        av_speed=8.0, goal_s=180.0, duration=40.0,
        tags=("left",), junction_boxes=tuple(lt_boxes)))

    # ramp merges
    mg = _merge_paths()
    out.append(Scenario(
        name="merge-gap", paths=mg, route_id="ramp",
        vehicles=_factory(13, [_v(1, "main", 55.0, 10.0)]),
        av_speed=7.0, goal_s=250.0, duration=40.0,
        tags=("merge",)))
    out.append(Scenario(
        name="merge-stream", paths=mg, route_id="ramp",
        vehicles=_factory(14, [_v(1, "main", 80.0, 10.0),
                               _v(2, "main", 40.0, 10.0),
                               _v(3, "main", 0.0, 9.0)]),
        av_speed=7.0, goal_s=250.0, duration=45.0,
        tags=("merge",)))
    out.append(Scenario(
        name="merge-fast", paths=_merge_paths(limit=12.0),
        route_id="ramp",
        vehicles=_factory(15, [_v(1, "main", 20.0, 12.0)]),
        av_speed=7.0, goal_s=250.0, duration=40.0,
        tags=("merge",)))
    out.append(Scenario(
        name="merge-empty", paths=mg, route_id="ramp",
        vehicles=_factory(16, []),
        av_speed=7.0, goal_s=250.0, duration=40.0,
        tags=("merge",)))

    # curves and mixed traffic
    cv = _curve_paths()
    out.append(Scenario(
        name="curve-follow", paths=cv, route_id="main",
        vehicles=_factory(17, [_v(1, "main", 40.0, 8.0, v0=8.0)]),
        av_speed=8.0, goal_s=200.0, duration=40.0,
        tags=("curve",)))
    out.append(Scenario(
        name="curve-free", paths=_curve_paths(radius=20.0, slow=5.0),
        route_id="main",
        vehicles=_factory(18, []),
        av_speed=8.0, goal_s=200.0, duration=35.0,
        tags=("curve",)))
    opp = {"lane": _graded_lane(),
           "opposite": straight((300.0, 3.5), (0.0, 3.5), n=12,
                                speed_limit=10.0)}
    out.append(Scenario(
        name="oncoming-parallel", paths=opp, route_id="lane",
        vehicles=_factory(19, [_v(1, "opposite", 20.0, 10.0),
                               _v(2, "opposite", 60.0, 10.0)]),
        av_speed=8.0, goal_s=220.0, duration=35.0,
        tags=("mixed",)))
    out.append(Scenario(
        name="queue-startup", paths={"lane": lane}, route_id="lane",
        vehicles=_factory(20, [_v(1, "lane", 60.0, 0.0),
                               _v(2, "lane", 45.0, 0.0)]),
        av_speed=8.0, goal_s=210.0, duration=40.0,
        tags=("mixed",)))
    return out


def occlusion_suite() -> list:
    """Late-reveal conflicts: the crosser spawns mid-run near the AV.

    Spawn times put the reveal 2-4 s before the paths would meet, so a
    predictor that reads the short post-reveal history correctly brakes
    in time and a predictor that cannot tends to keep rolling into the
    junction.
    """
    out = []
    box = ((50.0, 70.0, -10.0, 10.0),)
    # (name, crosser start s, crosser speed, spawn_t, av speed)
    rows = [
        ("reveal-tight", 62.0, 9.0, 4.6, 8.0),
        ("reveal-standard", 56.0, 8.0, 4.0, 8.0),
        ("reveal-fast", 50.0, 11.0, 4.4, 8.0),
        ("reveal-slowav", 58.0, 8.0, 6.2, 6.5),
        ("reveal-late", 66.0, 9.0, 5.2, 8.0),
        ("reveal-pair", 58.0, 8.0, 4.2, 8.0),
    ]
    for i, (name, s0, v0, spawn, av_v) in enumerate(rows):
        vehicles = [_v(1, "cross", s0, v0, spawn_t=spawn)]
        if name == "reveal-pair":
            vehicles.append(_v(2, "cross", s0 - 26.0, v0, spawn_t=spawn))
        out.append(Scenario(
            name=name, paths=_crossing_paths(), route_id="route",
            vehicles=_factory(100 + i, vehicles),
            av_speed=av_v, duration=30.0,
            tags=("reveal",), junction_boxes=box))
    return out


# -- platoon stability --------------------------------------------------------


def platoon_world(n: int = 8, seed: int = 0) -> World:
    """Single-lane platoon (no AV) on a very long straight."""
    rng = _rng(seed, 999)
    lane = straight((0.0, 0.0), (12000.0, 0.0), n=4, speed_limit=10.0)
    vehicles = []
    s = 0.0
    for i in range(n):
        vehicles.append(_v(i, "lane", s, float(rng.uniform(3.0, 12.0))))
        s += float(rng.uniform(10.0, 22.0))
    return World({"lane": lane}, vehicles, dt=0.1)


def platoon_min_gap(world: World, steps: int) -> float:
    """Roll `steps` ticks; return the smallest bumper-to-bumper gap seen."""
    order = sorted(world.vehicles, key=lambda v: v.s)
    min_gap = math.inf
    for _ in range(steps):
        world.step()
        for rear, front in zip(order, order[1:]):
            if not (front.active and rear.active):
                continue
            gap = front.s - rear.s - 0.5 * (front.length + rear.length)
            min_gap = min(min_gap, gap)
    return min_gap
