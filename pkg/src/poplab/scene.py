"""Scene data model: agent histories with validity masks, lane polylines,
rigid-frame utilities, the masking procedure, and the JSON-lines scene
file format.

Conventions used throughout the package:
  * a history is `states` [T_H, 4] with channels (x, y, yaw, v) plus a
    boolean validity `mask` [T_H]; index T_H-1 is the most recent step;
  * futures are ground-truth positions [T_F, 2];
  * yaw is normalized into (-pi, pi]; speeds are non-negative.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractViolation, ParameterError

STATE_DIM = 4  # (x, y, yaw, v)
LANE_ATTR_DIM = 4  # (is_intersection, is_crosswalk, speed_limit_class, direction_class)


def norm_angle(theta):
    """Wrap angle(s) into (-pi, pi]."""
    wrapped = np.mod(np.asarray(theta) + np.pi, 2.0 * np.pi) - np.pi
    # mod maps exact pi to -pi; push it back to +pi so the interval is half-open
    wrapped = np.where(wrapped == -np.pi, np.pi, wrapped)
    if np.ndim(theta) == 0:
        return float(wrapped)
    return wrapped


@dataclass
class AgentState:
    """One kinematic sample: position, heading, speed."""

    x: float
    y: float
    yaw: float
    v: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ContractViolation("agent position must be finite")
        if self.v < 0:
            raise ContractViolation(f"speed must be non-negative, got {self.v}")
        self.yaw = norm_angle(self.yaw)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw, self.v], dtype=np.float64)


@dataclass
class AgentHistory:
    """Observed track over the fixed history window.

    ``mask[t]`` is True where step t was actually observed. State values
    at invalid steps are carried along untouched (they may hold stale or
    arbitrary numbers); every consumer must honor the mask.
    """

    states: np.ndarray  # [T_H, 4]
    mask: np.ndarray    # [T_H] bool

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.mask = np.asarray(self.mask).astype(bool)
        if self.states.ndim != 2 or self.states.shape[1] != STATE_DIM:
            raise ContractViolation(
                f"history states must be [T_H, {STATE_DIM}], got {self.states.shape}"
            )
        if self.mask.shape != (self.states.shape[0],):
            raise ContractViolation(
                f"mask length {self.mask.shape} != T_H {self.states.shape[0]}"
            )

    @property
    def t_h(self) -> int:
        return self.states.shape[0]

    def latest_valid_index(self) -> int:
        idx = np.nonzero(self.mask)[0]
        if idx.size == 0:
            raise ContractViolation("history has no valid steps")
        return int(idx[-1])

    def latest_state(self) -> AgentState:
        row = self.states[self.latest_valid_index()]
        return AgentState(row[0], row[1], row[2], max(row[3], 0.0))

    def copy(self) -> "AgentHistory":
        return AgentHistory(self.states.copy(), self.mask.copy())


@dataclass
class LanePolyline:
    """Map element: centerline points with per-point semantic attributes.

    attrs columns: is_intersection, is_crosswalk, speed_limit_class,
    direction_class (heading octant of the local segment).
    """

    points: np.ndarray  # [N, 2]
    attrs: np.ndarray   # [N, LANE_ATTR_DIM]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.attrs = np.asarray(self.attrs, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ContractViolation(f"lane points must be [N, 2], got {self.points.shape}")
        if self.points.shape[0] < 2:
            raise ContractViolation("lane needs at least 2 points")
        if self.attrs.shape != (self.points.shape[0], LANE_ATTR_DIM):
            raise ContractViolation(
                f"lane attrs must be [N, {LANE_ATTR_DIM}], got {self.attrs.shape}"
            )
        steps = np.diff(self.points, axis=0)
        if np.any(np.hypot(steps[:, 0], steps[:, 1]) <= 1e-9):
            raise ContractViolation("consecutive lane points must be distinct")
        if not np.all(np.isfinite(self.attrs)):
            raise ContractViolation("lane attributes must be finite")

    def copy(self) -> "LanePolyline":
        return LanePolyline(self.points.copy(), self.attrs.copy())


@dataclass
class Scene:
    """One prediction instance: agents + map + which agent is focal."""

    scene_id: str
    dt: float
    agents: list  # of AgentHistory
    futures: list  # of np.ndarray [T_F, 2] (or None when unavailable)
    lanes: list   # of LanePolyline
    focal_index: int
    t_f: int

    def __post_init__(self):
        if self.dt <= 0:
            raise ContractViolation("dt must be positive")
        if not self.agents:
            raise ContractViolation("scene needs at least one agent")
        if not (0 <= self.focal_index < len(self.agents)):
            raise ContractViolation(
                f"focal_index {self.focal_index} out of range for "
                f"{len(self.agents)} agents"
            )
        t_h = self.agents[0].t_h
        for a in self.agents:
            if a.t_h != t_h:
                raise ContractViolation("all agents must share T_H")
        if len(self.futures) != len(self.agents):
            raise ContractViolation("futures must parallel agents")
        for f in self.futures:
            if f is None:
                continue
            f = np.asarray(f)
            if f.shape != (self.t_f, 2):
                raise ContractViolation(
                    f"future must be [{self.t_f}, 2], got {f.shape}"
                )
        if not self.agents[self.focal_index].mask.any():
            raise ContractViolation("focal agent needs at least one valid step")

    @property
    def t_h(self) -> int:
        return self.agents[0].t_h

    @property
    def focal(self) -> AgentHistory:
        return self.agents[self.focal_index]

    def copy(self) -> "Scene":
        return Scene(
            scene_id=self.scene_id,
            dt=self.dt,
            agents=[a.copy() for a in self.agents],
            futures=[None if f is None else np.array(f, copy=True) for f in self.futures],
            lanes=[l.copy() for l in self.lanes],
            focal_index=self.focal_index,
            t_f=self.t_f,
        )


# -- masking -----------------------------------------------------------------


@dataclass(frozen=True)
class MaskSpec:
    """How to degrade a complete history into a partial one.

    mode:
      * "truncate"       keep only the most recent ``length`` steps
      * "random_length"  draw length uniformly from {1, ..., T_H}
      * "interior_drop"  keep all steps, then drop non-final steps i.i.d.
    ``drop_p`` may be combined with either length mode to additionally
    drop surviving non-final steps with probability drop_p.
    The most recent step always stays valid.
    """

    mode: str
    length: int | None = None
    drop_p: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("truncate", "random_length", "interior_drop"):
            raise ParameterError(f"unknown mask mode {self.mode!r}")
        if self.mode == "truncate" and (self.length is None or self.length < 1):
            raise ParameterError("truncate mode needs length >= 1")
        if not (0.0 <= self.drop_p < 1.0):
            raise ParameterError(f"drop_p must lie in [0, 1), got {self.drop_p}")

    @staticmethod
    def truncate_to_length(length: int, seed: int = 0) -> "MaskSpec":
        return MaskSpec("truncate", length=length, seed=seed)

    @staticmethod
    def random_length(seed: int) -> "MaskSpec":
        return MaskSpec("random_length", seed=seed)

    @staticmethod
    def interior_drop(p: float, seed: int) -> "MaskSpec":
        return MaskSpec("interior_drop", drop_p=p, seed=seed)


def apply_mask(history: AgentHistory, spec: MaskSpec) -> AgentHistory:
    """Degrade a history's validity mask; never touches state values.

    Truncation keeps the most recent L steps (a late-appearing agent);
    interior drops remove random non-final steps. The output's valid set
    is always a subset of the input's, and the most recent input-valid
    step survives every mode.
    """
    t_h = history.t_h
    rng = np.random.default_rng(spec.seed)

    if spec.mode == "truncate":
        if spec.length > t_h:
            raise ParameterError(
                f"truncate length {spec.length} exceeds T_H {t_h}"
            )
        length = spec.length
    elif spec.mode == "random_length":
        length = int(rng.integers(1, t_h + 1))
    else:  # interior_drop
        length = t_h

    keep = np.zeros(t_h, dtype=bool)
    keep[t_h - length:] = True

    if spec.drop_p > 0.0 or spec.mode == "interior_drop":
        drops = rng.random(t_h) < spec.drop_p
        drops[-1] = False
        keep &= ~drops

    keep[-1] = True
    new_mask = history.mask & keep
    return AgentHistory(history.states.copy(), new_mask)


def valid_prefix_length(history: AgentHistory) -> int:
    """Length of the run of consecutive valid steps ending at the most
    recent step (0 if the final step itself is invalid)."""
    n = 0
    for t in range(history.t_h - 1, -1, -1):
        if not history.mask[t]:
            break
        n += 1
    return n


# -- rigid transforms --------------------------------------------------------


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def transform_points(points: np.ndarray, dx: float, dy: float, dtheta: float) -> np.ndarray:
    """Rotate points about the origin by dtheta, then translate by (dx, dy)."""
    return np.asarray(points) @ _rot(dtheta).T + np.array([dx, dy])


def transform_scene(scene: Scene, dx: float, dy: float, dtheta: float) -> Scene:
    """Apply one global rigid motion to every element of the scene."""
    out = scene.copy()
    for a in out.agents:
        a.states[:, :2] = transform_points(a.states[:, :2], dx, dy, dtheta)
        a.states[:, 2] = norm_angle(a.states[:, 2] + dtheta)
    out.futures = [
        None if f is None else transform_points(f, dx, dy, dtheta)
        for f in out.futures
    ]
    for lane in out.lanes:
        lane.points = transform_points(lane.points, dx, dy, dtheta)
    return out


def to_local_frame(scene: Scene, anchor: AgentState) -> Scene:
    """Re-express the scene so the anchor pose becomes (0, 0, yaw=0).

    Speeds are unchanged; yaws are re-normalized into (-pi, pi].
    """
    c, s = math.cos(-anchor.yaw), math.sin(-anchor.yaw)
    dx = -(c * anchor.x - s * anchor.y)
    dy = -(s * anchor.x + c * anchor.y)
    return transform_scene(scene, dx, dy, -anchor.yaw)


# -- scene file format -------------------------------------------------------


def scene_to_dict(scene: Scene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "dt": scene.dt,
        "t_h": scene.t_h,
        "t_f": scene.t_f,
        "focal_index": scene.focal_index,
        "lanes": [
            {"points": lane.points.tolist(), "attrs": lane.attrs.tolist()}
            for lane in scene.lanes
        ],
        "agents": [
            {
                "states": a.states.tolist(),
                "mask": [int(m) for m in a.mask],
                "future": None if f is None else np.asarray(f).tolist(),
            }
            for a, f in zip(scene.agents, scene.futures)
        ],
    }


def scene_from_dict(d: dict) -> Scene:
    agents = []
    futures = []
    for a in d["agents"]:
        agents.append(AgentHistory(np.array(a["states"]), np.array(a["mask"])))
        f = a.get("future")
        futures.append(None if f is None else np.array(f, dtype=np.float64))
    lanes = [
        LanePolyline(np.array(l["points"]), np.array(l["attrs"]))
        for l in d["lanes"]
    ]
    return Scene(
        scene_id=str(d["scene_id"]),
        dt=float(d["dt"]),
        agents=agents,
        futures=futures,
        lanes=lanes,
        focal_index=int(d["focal_index"]),
        t_f=int(d["t_f"]),
    )


def save_scenes(path: str, scenes: list) -> None:
    """Write scenes as JSON-lines (one scene per line, UTF-8, LF)."""
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for scene in scenes:
            fh.write(json.dumps(scene_to_dict(scene), separators=(",", ":")))
            fh.write("\n")
    os.replace(tmp, path)


def load_scenes(path: str) -> list:
    scenes = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                scenes.append(scene_from_dict(json.loads(line)))
    return scenes
