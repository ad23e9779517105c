"""Deterministic intersection environment stepped at 0.1 s.

The ego is moved by pose displacements; surrounding vehicles follow fixed
lane paths with a gap-based car-following rule.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .geometry import DEFAULT_LENGTH, DEFAULT_WIDTH, OrientedBox, Pose, normalize_angle, sat_overlap_many
from .roadnet import Scenario, TrafficFlowSpec, is_on_road, project_onto, sample_polyline

DT = 0.1
HISTORY_STEPS = 10
MAX_STEPS = 600
GOAL_RADIUS = 2.0
GOAL_HEADING_TOL = math.pi / 4
FOLLOW_STOP_GAP = 4.0
FOLLOW_SCALE = 10.0
FOLLOW_LOOKAHEAD = 30.0
FOLLOW_LATERAL = 2.0
ENTRY_CLEARANCE = 8.0
SPAWN_CLEARANCE = 10.0

COLLISION = "collision"
OFF_ROAD = "off_road"
GOAL_REACHED = "goal_reached"
TIMEOUT = "timeout"


class EpisodeTerminatedError(RuntimeError):
    pass


@dataclass(frozen=True)
class VehicleState:
    id: int
    pose: Pose
    route_assignment: int
    dims: tuple[float, float] = (DEFAULT_LENGTH, DEFAULT_WIDTH)


@dataclass
class TrafficVehicle:
    id: int
    path: tuple[int, ...]
    poly: np.ndarray = field(repr=False)
    arc: np.ndarray = field(repr=False)
    s: float
    nominal_speed: float
    speed: float = 0.0
    dims: tuple[float, float] = (DEFAULT_LENGTH, DEFAULT_WIDTH)
    _pose_key: tuple | None = field(default=None, repr=False, compare=False)
    _pose: np.ndarray | None = field(default=None, repr=False, compare=False)

    def pose_array(self) -> np.ndarray:
        # several passes per step read the pose; recompute only when s or speed moved
        key = (self.s, self.speed)
        if key != self._pose_key:
            p = sample_polyline(self.poly, self.arc, np.array([self.s]))[0]
            self._pose = np.array([p[0], p[1], p[2], self.speed])
            self._pose_key = key
        return self._pose.copy()

    @property
    def finished(self) -> bool:
        return self.s > self.arc[-1]

    def current_lane(self, network) -> int:
        """Lane of the path that contains the current arc position."""
        offset = 0.0
        for lid in self.path:
            length = network.lanes[lid].length
            if self.s <= offset + length + 1.0:
                return lid
            offset += length
        return self.path[-1]


@dataclass
class WorldState:
    scenario: Scenario
    flow_seed: int
    rng: np.random.Generator
    ego: np.ndarray  # x, y, heading, speed
    traffic: list[TrafficVehicle]
    histories: dict[int, deque]
    tracks: dict[int, dict[int, np.ndarray]]
    step_count: int = 0
    next_id: int = 1
    terminated: bool = False
    events: frozenset = frozenset()
    ego_dims: tuple[float, float] = (DEFAULT_LENGTH, DEFAULT_WIDTH)
    history_steps: int = HISTORY_STEPS
    max_steps: int = MAX_STEPS

    @property
    def ego_pose(self) -> Pose:
        return Pose(self.ego[0], self.ego[1], self.ego[2], float(self.ego[3]))

    def traffic_poses(self) -> dict[int, np.ndarray]:
        return {v.id: v.pose_array() for v in self.traffic}

    def vehicles(self) -> list[VehicleState]:
        out = [VehicleState(0, self.ego_pose, -1, self.ego_dims)]
        for v in self.traffic:
            p = v.pose_array()
            out.append(VehicleState(v.id, Pose(p[0], p[1], p[2], p[3]), v.path[0], v.dims))
        return out

    def history(self, vid: int) -> np.ndarray:
        """(history_steps, 4) array, oldest first."""
        return np.array(self.histories[vid])

    def trajectory_records(self) -> Iterable[dict]:
        for t in sorted({t for tr in self.tracks.values() for t in tr}):
            for vid in sorted(self.tracks):
                p = self.tracks[vid].get(t)
                if p is not None:
                    yield {"t": t, "id": vid, "x": float(p[0]), "y": float(p[1]),
                           "heading": float(p[2]), "speed": float(p[3])}


@dataclass(frozen=True)
class StepOutcome:
    events: frozenset
    world: WorldState


class TrafficSpawner:
    """Seeded Bernoulli spawner: three draws per entry lane per step, always consumed."""

    def __init__(self, spec: TrafficFlowSpec):
        self.spec = spec

    def draw(self, rng: np.random.Generator, n_lanes: int) -> np.ndarray:
        return rng.random((n_lanes, 3))

    def decisions(self, draws: np.ndarray) -> np.ndarray:
        return draws[:, 0] < self.spec.spawn_rate * DT


def _box_array(poses: np.ndarray, dims) -> np.ndarray:
    out = np.empty((len(poses), 5))
    out[:, :3] = poses[:, :3]
    out[:, 3] = [d[0] for d in dims]
    out[:, 4] = [d[1] for d in dims]
    return out


def follow_speed(nominal: float, gap: Optional[float]) -> float:
    """Car-following speed for a leader ``gap`` metres ahead (``None`` = free road)."""
    if gap is None:
        return nominal
    return float(min(max(nominal * (gap - FOLLOW_STOP_GAP) / FOLLOW_SCALE, 0.0), nominal))


def leader_gap(vehicle: TrafficVehicle, others: list[np.ndarray], aligned_only: list[bool]) -> Optional[float]:
    """Arc distance to the nearest obstacle on the vehicle's path ahead, within the lookahead."""
    lo = vehicle.s
    hi = vehicle.s + FOLLOW_LOOKAHEAD
    mask = (vehicle.arc >= lo - 1.0) & (vehicle.arc <= hi + 1.0)
    idx = np.flatnonzero(mask)
    if len(idx) < 2:
        idx = np.arange(max(len(vehicle.arc) - 2, 0), len(vehicle.arc))
    pts = vehicle.poly[idx]
    arc = vehicle.arc[idx]
    own = vehicle.pose_array()
    best = None
    for p, aligned in zip(others, aligned_only):
        if aligned and abs(normalize_angle(p[2] - own[2])) > math.pi / 3:
            continue
        s_o, lat = project_onto(pts, arc, p[0], p[1])
        gap = s_o - vehicle.s
        if lat < FOLLOW_LATERAL and 0.0 < gap <= FOLLOW_LOOKAHEAD:
            best = gap if best is None else min(best, gap)
    return best


def traffic_policy(vehicle: TrafficVehicle, world: WorldState) -> np.ndarray:
    """Next (x, y, heading, speed) of ``vehicle`` after one step; also updates its arc position."""
    others = [world.ego]
    aligned = [False]
    for v in world.traffic:
        if v.id != vehicle.id:
            others.append(v.pose_array())
            aligned.append(True)
    speed = follow_speed(vehicle.nominal_speed, leader_gap(vehicle, others, aligned))
    vehicle.speed = speed
    vehicle.s += speed * DT
    return vehicle.pose_array()


def _push_history(world: WorldState, vid: int, pose: np.ndarray):
    hist = world.histories.get(vid)
    if hist is None:
        first = np.array([pose[0], pose[1], pose[2], 0.0])
        hist = deque([first] * world.history_steps, maxlen=world.history_steps)
        world.histories[vid] = hist
    hist.append(pose.copy())


def _track(world: WorldState, vid: int, pose: np.ndarray):
    world.tracks.setdefault(vid, {})[world.step_count] = pose.copy()


def _spawn(world: WorldState, spawner: TrafficSpawner, draws: np.ndarray):
    net = world.scenario.network
    spec = world.scenario.traffic_spec
    entries = net.entry_lanes
    go = spawner.decisions(draws)
    for k, lid in enumerate(entries):
        if not go[k] or len(world.traffic) >= spec.max_vehicles:
            continue
        start = net.lanes[lid].points[0]
        if math.hypot(world.ego[0] - start[0], world.ego[1] - start[1]) < ENTRY_CLEARANCE:
            continue
        if any(v.path[0] == lid and v.s < ENTRY_CLEARANCE for v in world.traffic):
            continue
        paths = net.paths_from(lid)
        path = paths[min(int(draws[k, 1] * len(paths)), len(paths) - 1)]
        lo, hi = spec.speed_range
        nominal = lo + (hi - lo) * draws[k, 2]
        poly, arc = net.path_polyline(path)
        v = TrafficVehicle(world.next_id, path, poly, arc, 0.0, nominal, nominal)
        world.next_id += 1
        world.traffic.append(v)


def _advance_traffic(world: WorldState, spawner: TrafficSpawner):
    # decisions use everyone's pre-step poses, so work on copies first
    updates = []
    for v in world.traffic:
        trial = TrafficVehicle(v.id, v.path, v.poly, v.arc, v.s, v.nominal_speed, v.speed, v.dims)
        traffic_policy(trial, world)
        updates.append((trial.s, trial.speed))
    for v, (s_new, speed) in zip(world.traffic, updates):
        v.s, v.speed = s_new, speed
    world.traffic = [v for v in world.traffic if not v.finished]
    live = {v.id for v in world.traffic}
    for vid in list(world.histories):
        if vid != 0 and vid not in live:
            del world.histories[vid]
    draws = spawner.draw(world.rng, len(world.scenario.network.entry_lanes))
    _spawn(world, spawner, draws)
    for v in world.traffic:
        _push_history(world, v.id, v.pose_array())


def reset(scenario: Scenario, flow_seed: int, *, history_steps: int = HISTORY_STEPS,
          max_steps: int = MAX_STEPS, ego_dims=(DEFAULT_LENGTH, DEFAULT_WIDTH)) -> WorldState:
    """Fresh world: ego at spawn with zero speed, traffic warmed up from ``flow_seed``."""
    spawn = scenario.ego_spawn
    world = WorldState(
        scenario=scenario,
        flow_seed=flow_seed,
        rng=np.random.default_rng(flow_seed),
        ego=np.array([spawn.x, spawn.y, spawn.heading, 0.0]),
        traffic=[],
        histories={},
        tracks={},
        ego_dims=tuple(ego_dims),
        history_steps=history_steps,
        max_steps=max_steps,
    )
    spawner = TrafficSpawner(scenario.traffic_spec)
    far = np.array([1e6, 1e6, 0.0, 0.0])
    # the ego does not exist during warm-up
    world.ego = far
    for _ in range(scenario.traffic_spec.warmup_steps):
        _advance_traffic(world, spawner)
    world.ego = np.array([spawn.x, spawn.y, spawn.heading, 0.0])
    world.traffic = [
        v for v in world.traffic
        if math.hypot(*(v.pose_array()[:2] - world.ego[:2])) >= SPAWN_CLEARANCE
    ]
    live = {v.id for v in world.traffic}
    world.histories = {vid: h for vid, h in world.histories.items() if vid in live}
    _push_history(world, 0, world.ego)
    _track(world, 0, world.ego)
    for v in world.traffic:
        _track(world, v.id, v.pose_array())
    return world


def apply_delta(pose: np.ndarray, dx: float, dy: float, dh: float) -> np.ndarray:
    c, s = math.cos(pose[2]), math.sin(pose[2])
    out = np.array([
        pose[0] + c * dx - s * dy,
        pose[1] + s * dx + c * dy,
        normalize_angle(pose[2] + dh),
        math.hypot(dx, dy) / DT,
    ])
    return out


def detect_events(world: WorldState) -> frozenset:
    ev = set()
    sc = world.scenario
    ego_box = np.array([[world.ego[0], world.ego[1], world.ego[2], *world.ego_dims]])
    if world.traffic:
        poses = np.array([v.pose_array() for v in world.traffic])
        boxes = _box_array(poses, [v.dims for v in world.traffic])
        if sat_overlap_many(ego_box, boxes).any():
            ev.add(COLLISION)
    ego_pose = world.ego_pose
    if not is_on_road(sc.network, OrientedBox(Pose(ego_pose.x, ego_pose.y, ego_pose.heading), *world.ego_dims)):
        ev.add(OFF_ROAD)
    if COLLISION not in ev:
        g = sc.task_goal
        if (math.hypot(ego_pose.x - g.x, ego_pose.y - g.y) < GOAL_RADIUS
                and abs(normalize_angle(ego_pose.heading - g.heading)) < GOAL_HEADING_TOL):
            ev.add(GOAL_REACHED)
    if world.step_count >= world.max_steps:
        ev.add(TIMEOUT)
    return frozenset(ev)


def step(world: WorldState, action) -> StepOutcome:
    """Advance one 0.1 s step; ``action`` is an (dx, dy, dheading) delta in the ego frame."""
    if world.terminated:
        raise EpisodeTerminatedError("step() called on a terminated episode")
    dx, dy, dh = (action.dx, action.dy, action.dheading) if hasattr(action, "dx") else action
    spawner = TrafficSpawner(world.scenario.traffic_spec)
    new_ego = apply_delta(world.ego, dx, dy, dh)
    _advance_traffic(world, spawner)
    world.ego = new_ego
    world.step_count += 1
    _push_history(world, 0, world.ego)
    _track(world, 0, world.ego)
    for v in world.traffic:
        _track(world, v.id, v.pose_array())
    world.events = detect_events(world)
    world.terminated = bool(world.events)
    return StepOutcome(world.events, world)


def teleport_ego(world: WorldState, x: float, y: float, heading: float, speed: float) -> None:
    """Move the ego and give it a straight constant-speed history ending at the new pose (probes and tests)."""
    world.ego = np.array([x, y, heading, speed])
    hist = world.histories[0]
    hist.clear()
    for k in range(world.history_steps - 1, -1, -1):
        back = k * DT * speed
        hist.append(np.array([x - back * math.cos(heading), y - back * math.sin(heading), heading, speed]))
    world.tracks[0][world.step_count] = world.ego.copy()


def place_vehicle(world: WorldState, path: tuple[int, ...], s: float, nominal_speed: float) -> TrafficVehicle:
    """Insert a surrounding vehicle at arc position ``s`` of ``path`` (tests and probes)."""
    net = world.scenario.network
    poly, arc = net.path_polyline(path)
    v = TrafficVehicle(world.next_id, path, poly, arc, s, nominal_speed, nominal_speed)
    world.next_id += 1
    world.traffic.append(v)
    _push_history(world, v.id, v.pose_array())
    _track(world, v.id, v.pose_array())
    return v


def write_trajectory_log(world: WorldState, fh) -> int:
    """Write one JSON record per (timestep, vehicle); returns the record count."""
    n = 0
    for rec in world.trajectory_records():
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
        n += 1
    return n
