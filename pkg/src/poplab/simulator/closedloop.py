"""Closed-loop rollouts.

The AV drives a fixed route through IDM traffic, replanning every
``plan_interval`` from predictions of its neighbors. Neighbor histories
are read off the simulation's own tick log, and an agent's history mask
opens only from the tick it first came within the prediction radius —
so a vehicle that pops into range mid-run is seen with one or two valid
steps, exactly the partial-observation regime the predictor is supposed
to survive.

Background traffic never reacts to the AV (see world.py), which makes
the ground-truth rollout predictor exact: cloning the world and letting
it run gives the actual future of every background agent.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractViolation, ParameterError
from ..lanes import Path
from ..predictor import PredictionSet
from ..scene import AgentHistory, Scene
from .planner import SimConfig, plan
from .world import Vehicle, World

AV_VID = 999


@dataclass(frozen=True)
class RouteTask:
    route: Path
    goal_s: float

    def __post_init__(self):
        if not (0.0 < self.goal_s <= self.route.length + 1e-9):
            raise ParameterError(
                f"goal_s {self.goal_s} outside route (0, {self.route.length}]")


@dataclass
class Scenario:
    """Blueprint: geometry + a seeded background-traffic factory."""

    name: str
    paths: dict                      # pid -> Path
    route_id: str                    # the path the AV drives
    vehicles: "callable"             # seed:int -> list[Vehicle]
    av_start: float = 0.0
    av_speed: float = 8.0
    goal_s: float | None = None      # default: the route's full length
    duration: float = 20.0
    tags: tuple = ()
    junction_boxes: tuple = ()
    crosswalk_boxes: tuple = ()

    def build(self, seed: int, config: SimConfig):
        if self.route_id not in self.paths:
            raise ParameterError(f"route {self.route_id!r} not in paths")
        background = list(self.vehicles(seed))
        for v in background:
            if v.vid == AV_VID:
                raise ContractViolation(f"vid {AV_VID} is reserved")
        av = Vehicle(vid=AV_VID, path_id=self.route_id, s=self.av_start,
                     v=self.av_speed, kind="av", length=config.av_length,
                     width=config.av_width)
        world = World(self.paths, background + [av], dt=config.sim_dt)
        route = self.paths[self.route_id]
        goal = route.length if self.goal_s is None else self.goal_s
        return world, RouteTask(route, goal)


@dataclass
class ScenarioTrace:
    scenario: str
    seed: int
    av_id: int
    av_start_s: float
    goal_s: float
    rows: list = field(default_factory=list)
    completed: bool = False


def _digest(preds: dict) -> str:
    h = hashlib.sha256()
    for vid in sorted(preds):
        pred, state = preds[vid]
        h.update(str(vid).encode())
        h.update(np.ascontiguousarray(pred.refined).tobytes())
        h.update(np.ascontiguousarray(pred.probs).tobytes())
        h.update(np.ascontiguousarray(state).tobytes())
    return h.hexdigest()[:16]


def run_scenario(scenario: Scenario, predictor, config: SimConfig,
                 seed: int = 0) -> ScenarioTrace:
    """Roll one scenario to completion/timeout; returns the full trace."""
    world, task = scenario.build(seed, config)
    av = world.av
    begin = getattr(predictor, "begin_scenario", None)
    if begin is not None:
        begin(scenario)
    trace = ScenarioTrace(scenario=scenario.name, seed=seed, av_id=AV_VID,
                          av_start_s=av.s, goal_s=task.goal_s)
    n_ticks = int(round(scenario.duration / config.sim_dt))
    entry_tick: dict[int, int] = {}
    log: list[dict] = []
    accel = 0.0
    plan_id = -1
    stopped = False
    digest = ""

    for tick in range(n_ticks):
        av_state = world.state_of(av)
        present = {
            v.vid: world.state_of(v)
            for v in world.vehicles
            if v.kind == "idm" and world.present(v)
        }
        for vid, s in present.items():
            if vid not in entry_tick and np.hypot(
                    s[0] - av_state[0], s[1] - av_state[1]
            ) <= config.pred_radius:
                entry_tick[vid] = tick
        log.append(present)

        if tick % config.plan_ticks == 0:
            preds = predictor.predict_world(world, log, entry_tick, config)
            result = plan(world, task.route, av.s, preds, config)
            accel, stopped = result.accel, result.stopped
            plan_id += 1
            digest = _digest(preds)

        accels = world.step(av_accel=accel)
        # the AV's low-level controller treats the posted limit as a hard
        # actuator constraint, mirroring the planner's rollout model
        limit = task.route.speed_limit_at(av.s)
        if np.isfinite(limit):
            av.v = min(av.v, float(limit))
        trace.rows.append({
            "t": round(tick * config.sim_dt, 9),
            "av_state": [float(x) for x in av_state],
            "av_s": float(min(av.s, task.goal_s)),
            "plan_id": plan_id,
            "plan_accel": float(accel),
            "stopped": bool(stopped),
            "agents": {str(v): [float(x) for x in s]
                       for v, s in present.items()},
            "accels": {str(v): float(a) for v, a in accels.items()
                       if v != AV_VID},
            "predictions_digest": digest,
        })
        if av.s >= task.goal_s - 1e-9 or not av.active:
            break

    trace.completed = av.s >= task.goal_s - 1e-9
    return trace


# -- predictors over the live world ---------------------------------------------


def _neighbors(world: World, config: SimConfig):
    av_state = world.state_of(world.av)
    out = []
    for v in world.vehicles:
        if v.kind != "idm" or not world.present(v):
            continue
        s = world.state_of(v)
        if np.hypot(s[0] - av_state[0], s[1] - av_state[1]) \
                <= config.pred_radius:
            out.append((v.vid, s))
    return out


class OracleSim:
    """Exact futures by rolling a cloned world (background traffic is
    blind to the AV, so the clone's background evolution IS the truth)."""

    name = "oracle"

    def predict_world(self, world: World, log, entry_tick,
                      config: SimConfig) -> dict:
        neighbors = _neighbors(world, config)
        if not neighbors:
            return {}
        clone = world.clone()
        stride = int(round(config.pred_dt / config.sim_dt))
        n_points = int(round(config.pred_horizon / config.pred_dt))
        tracks: dict[int, list] = {vid: [] for vid, _ in neighbors}
        for i in range(n_points * stride):
            clone.step(av_accel=0.0)
            if (i + 1) % stride == 0:
                for vid in tracks:
                    tracks[vid].append(
                        clone.state_of(clone.vehicle(vid))[:2])
        out = {}
        for vid, state in neighbors:
            traj = np.asarray(tracks[vid])[None]  # [1, n_points, 2]
            out[vid] = (PredictionSet(
                proposals=traj.copy(), refined=traj.copy(),
                scales=np.ones_like(traj), probs=np.array([1.0]),
            ), state)
        return out


class ModelSim:
    """Wraps a trained network: one scene per focal neighbor, histories
    sampled at the prediction cadence with entry-limited masks.

    Lane features come from the scenario geometry; when constructed
    without explicit lanes they are derived (and cached) per scenario
    through the ``begin_scenario`` hook."""

    def __init__(self, model, lanes=None, name: str = "model"):
        self.model = model
        self._explicit_lanes = lanes is not None
        self.lanes = lanes if lanes is not None else []
        self.name = name
        self._lane_cache: dict[str, list] = {}

    def begin_scenario(self, scenario) -> None:
        if self._explicit_lanes:
            return
        from .scenarios import scenario_lanes
        if scenario.name not in self._lane_cache:
            self._lane_cache[scenario.name] = scenario_lanes(scenario)
        self.lanes = self._lane_cache[scenario.name]

    def predict_world(self, world: World, log, entry_tick,
                      config: SimConfig) -> dict:
        neighbors = _neighbors(world, config)
        if not neighbors:
            return {}
        t_h = self.model.config.t_h
        stride = int(round(config.pred_dt / config.sim_dt))
        now = len(log) - 1
        ticks = [now - stride * (t_h - 1 - j) for j in range(t_h)]

        def agent_history(vid: int) -> AgentHistory:
            states = np.zeros((t_h, 4))
            mask = np.zeros(t_h, dtype=bool)
            first = entry_tick.get(vid)
            for j, tk in enumerate(ticks):
                if tk < 0 or first is None or tk < first:
                    continue
                s = log[tk].get(vid)
                if s is None:
                    continue
                states[j] = s
                mask[j] = True
            return AgentHistory(states, mask)

        out = {}
        for focal_vid, state in neighbors:
            order = [focal_vid] + [v for v, _ in neighbors
                                   if v != focal_vid]
            agents = []
            for vid in order:
                h = agent_history(vid)
                if vid == focal_vid or h.mask.any():
                    agents.append(h)
            scene = Scene(
                scene_id=f"sim-{focal_vid}",
                dt=config.pred_dt,
                agents=agents,
                futures=[None] * len(agents),
                lanes=self.lanes,
                focal_index=0,
                t_f=self.model.config.t_f,
            )
            pred, _ = self.model.predict(scene)
            out[focal_vid] = (pred, state)
        return out


# -- trace persistence ------------------------------------------------------------


def write_trace(trace: ScenarioTrace, path: str) -> None:
    """JSON-lines: one header object, then one object per tick."""
    header = {"scenario": trace.scenario, "seed": trace.seed,
              "av_id": trace.av_id, "av_start_s": trace.av_start_s,
              "goal_s": trace.goal_s, "completed": trace.completed}
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as f:
            f.write(json.dumps(header, sort_keys=True,
                               separators=(",", ":")) + "\n")
            for row in trace.rows:
                f.write(json.dumps(row, sort_keys=True,
                                   separators=(",", ":")) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_trace(path: str) -> ScenarioTrace:
    with open(path, "r") as f:
        header = json.loads(f.readline())
        rows = [json.loads(line) for line in f if line.strip()]
    return ScenarioTrace(scenario=header["scenario"], seed=header["seed"],
                         av_id=header["av_id"],
                         av_start_s=header["av_start_s"],
                         goal_s=header["goal_s"], rows=rows,
                         completed=header["completed"])
