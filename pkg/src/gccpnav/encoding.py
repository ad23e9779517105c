"""Vectorised environment state and subgoal sampling.

Every array is in the ego frame of the encoding time. Slot 0 is the ego,
slots 1..N_s the closest surrounding vehicles (zero-padded, ``valid`` False).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import OrientedBox, Pose, to_ego_frame_array
from .roadnet import (
    N_ROUTES,
    N_WAYPOINTS,
    OffRoadError,
    is_on_road,
    rasterize_drivable,
    routes_toward,
)
from .sim import WorldState

N_SURROUNDING = 5
N_SUBGOALS = 12
SUBGOAL_SPACING = 5
SUBGOAL_RANGE = 20
N_SLOTS = 1 + N_SURROUNDING


@dataclass
class VectorState:
    history: np.ndarray     # (N_SLOTS, T_h, 4) x, y, heading, speed; oldest first
    routes: np.ndarray      # (N_SLOTS, N_r, N_p, 3) waypoints x, y, heading
    route_real: np.ndarray  # (N_SLOTS, N_r) waypoints that lie on the road path
    drivable: np.ndarray    # (64, 64) uint8
    valid: np.ndarray       # (N_SLOTS,) bool
    ids: np.ndarray         # (N_SLOTS,) vehicle ids, -1 for empty slots
    ego_world: np.ndarray   # (4,) ego x, y, heading, speed in the world frame

    @property
    def history_steps(self) -> int:
        return self.history.shape[1]

    def trajectory_vectors(self) -> np.ndarray:
        """(N_SLOTS, T_h, 9): [p_prev(4), p_curr(4), vehicle id]; the oldest vector repeats its pose."""
        prev = np.concatenate([self.history[:, :1], self.history[:, :-1]], axis=1)
        ids = np.broadcast_to(self.ids[:, None, None], self.history.shape[:2] + (1,)).astype(float)
        out = np.concatenate([prev, self.history, ids], axis=-1)
        out[~self.valid] = 0.0
        return out

    @property
    def ego_history(self) -> np.ndarray:
        return self.trajectory_vectors()[0]

    @property
    def surr_histories(self) -> np.ndarray:
        return self.trajectory_vectors()[1:]

    def route_vectors(self) -> np.ndarray:
        """(N_SLOTS, N_r, N_p-1, 8): [wp_k(3), wp_k+1(3), vehicle id, route id]."""
        n_slots, n_r, n_p, _ = self.routes.shape
        ids = np.broadcast_to(self.ids[:, None, None, None], (n_slots, n_r, n_p - 1, 1)).astype(float)
        rid = np.broadcast_to(np.arange(n_r)[None, :, None, None], (n_slots, n_r, n_p - 1, 1)).astype(float)
        out = np.concatenate([self.routes[:, :, :-1], self.routes[:, :, 1:], ids, rid], axis=-1)
        out[~self.valid] = 0.0
        return out

    @property
    def ego_routes(self) -> np.ndarray:
        return self.route_vectors()[0]

    @property
    def surr_routes(self) -> np.ndarray:
        return self.route_vectors()[1:]

    def compact(self) -> "VectorState":
        """Lower-precision copy for replay storage."""
        return VectorState(self.history.astype(np.float32), self.routes.astype(np.float32),
                           self.route_real.astype(np.int16), self.drivable.astype(np.uint8),
                           self.valid.copy(), self.ids.astype(np.int32), self.ego_world.copy())


@dataclass
class SubgoalSet:
    goals: np.ndarray        # (N_SUBGOALS, 3) ego frame x, y, heading
    goals_world: np.ndarray  # (N_SUBGOALS, 3)
    padded: np.ndarray       # (N_SUBGOALS,) True where the slot was filled by padding

    def __len__(self):
        return len(self.goals)


def closest_vehicles(world: WorldState, n: int = N_SURROUNDING) -> list:
    ex, ey = world.ego[0], world.ego[1]
    scored = []
    for v in world.traffic:
        p = v.pose_array()
        scored.append((math.hypot(p[0] - ex, p[1] - ey), v.id, v))
    scored.sort(key=lambda t: (t[0], t[1]))
    return [v for _, _, v in scored[:n]]


def _ego_routes(world: WorldState):
    sc = world.scenario
    return routes_toward(sc.network, world.ego_pose, sc.task_goal)


def encode_state(world: WorldState, ego_routes=None) -> VectorState:
    sc = world.scenario
    net = sc.network
    ex, ey, eh = world.ego[0], world.ego[1], world.ego[2]
    t_h = world.history_steps
    history = np.zeros((N_SLOTS, t_h, 4))
    routes = np.zeros((N_SLOTS, N_ROUTES, N_WAYPOINTS, 3))
    route_real = np.zeros((N_SLOTS, N_ROUTES), dtype=int)
    valid = np.zeros(N_SLOTS, dtype=bool)
    ids = np.full(N_SLOTS, -1, dtype=int)

    ego_routes = ego_routes if ego_routes is not None else _ego_routes(world)
    history[0] = to_ego_frame_array(ex, ey, eh, world.history(0))
    for r, route in enumerate(ego_routes):
        routes[0, r] = to_ego_frame_array(ex, ey, eh, route.waypoints)
        route_real[0, r] = route.n_real
    valid[0] = True
    ids[0] = 0

    for slot, v in enumerate(closest_vehicles(world), start=1):
        p = v.pose_array()
        pose = Pose(p[0], p[1], p[2])
        end = Pose(*v.poly[-1, :3])
        vr = routes_toward(net, pose, end, lane_hint=v.current_lane(net))
        history[slot] = to_ego_frame_array(ex, ey, eh, world.history(v.id))
        for r, route in enumerate(vr):
            routes[slot, r] = to_ego_frame_array(ex, ey, eh, route.waypoints)
            route_real[slot, r] = route.n_real
        valid[slot] = True
        ids[slot] = v.id

    drivable = rasterize_drivable(net, world.ego_pose).grid
    return VectorState(history, routes, route_real, drivable, valid, ids, world.ego.copy())


def sample_subgoals(world: WorldState, ego_routes=None) -> SubgoalSet:
    """Four subgoals per ego route at 5, 10, 15 and 20 m of arc length.

    Slots beyond a route's real extent are filled with the sampled subgoal
    closest to the task goal.
    """
    sc = world.scenario
    ego_pose = world.ego_pose
    if not is_on_road(sc.network, OrientedBox(Pose(ego_pose.x, ego_pose.y, ego_pose.heading), *world.ego_dims)):
        raise OffRoadError("cannot sample subgoals for an off-road ego")
    ego_routes = ego_routes if ego_routes is not None else _ego_routes(world)
    arcs = range(SUBGOAL_SPACING, SUBGOAL_RANGE + 1, SUBGOAL_SPACING)
    goals_world = np.zeros((N_SUBGOALS, 3))
    padded = np.zeros(N_SUBGOALS, dtype=bool)
    k = 0
    for route in ego_routes:
        for a in arcs:
            # waypoints are 1 m apart from the projection point, so index == arc length
            if a < route.n_real:
                goals_world[k] = route.waypoints[a]
            else:
                padded[k] = True
            k += 1
    sampled = np.flatnonzero(~padded)
    if len(sampled) == 0:
        # nothing on the road path within range: fall back to the extrapolated points
        k = 0
        for route in ego_routes:
            for a in arcs:
                goals_world[k] = route.waypoints[a]
                k += 1
    elif padded.any():
        g = sc.task_goal
        d = np.hypot(goals_world[sampled, 0] - g.x, goals_world[sampled, 1] - g.y)
        fill = goals_world[sampled[int(np.argmin(d))]]
        goals_world[padded] = fill
    ego = world.ego
    goals = to_ego_frame_array(ego[0], ego[1], ego[2], goals_world)
    return SubgoalSet(goals, goals_world, padded)


def goal_in_ego_frame(world: WorldState, goal_world: np.ndarray) -> np.ndarray:
    e = world.ego
    return to_ego_frame_array(e[0], e[1], e[2], np.asarray(goal_world, float)[None, :3])[0]
