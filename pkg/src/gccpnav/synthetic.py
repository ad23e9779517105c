"""Deterministic synthetic crossing scenes for predictor training and checks.

The ego drives along +x in its own frame toward a subgoal. One to three
vehicles cross its path along +y or -y. The ego's future heads straight at
the subgoal with a speed that reaches it in ``REACH_TIME`` seconds, and a
crossing vehicle yields (brakes to a stop over the horizon) when the ego's
subgoal lies beyond its lane. Both futures therefore depend on the subgoal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .encoding import N_SLOTS, VectorState
from .roadnet import N_ROUTES, N_WAYPOINTS, RASTER_RES, RASTER_SIZE
from .sim import DT, HISTORY_STEPS

HORIZON = 10
REACH_TIME = 2.0
LANE_HALF_WIDTH = 7.0


@dataclass
class CrossingSet:
    states: list[VectorState]
    goals: np.ndarray        # (n, 3) ego-frame subgoals
    truth: np.ndarray        # (n, 6, T_f, 3)
    truth_valid: np.ndarray  # (n, 6) bool

    def __len__(self):
        return len(self.states)


def _straight_route(x, y, h):
    s = np.arange(N_WAYPOINTS, dtype=float)
    return np.stack([x + s * math.cos(h), y + s * math.sin(h), np.full(N_WAYPOINTS, h)], axis=-1)


def _history(x, y, h, v):
    """Constant-velocity history ending at (x, y), oldest first."""
    k = np.arange(HISTORY_STEPS - 1, -1, -1, dtype=float) * DT * v
    return np.stack([x - k * math.cos(h), y - k * math.sin(h), np.full(HISTORY_STEPS, h),
                     np.full(HISTORY_STEPS, v)], axis=-1)


def _cross_raster(cross_x: float) -> np.ndarray:
    c = (np.arange(RASTER_SIZE) - RASTER_SIZE // 2 + 0.5) * RASTER_RES
    px, py = np.meshgrid(c, c, indexing="ij")
    return ((np.abs(py) < LANE_HALF_WIDTH) | (np.abs(px - cross_x) < LANE_HALF_WIDTH)).astype(np.uint8)


def crossing_sample(rng: np.random.Generator):
    v_ego = rng.uniform(3.0, 7.0)
    cross_x = rng.uniform(8.0, 20.0)
    goal_d = rng.choice([5.0, 10.0, 15.0, 20.0])
    goal_lat = rng.uniform(-2.0, 2.0)
    goal_h = math.atan2(goal_lat, goal_d)
    goal = np.array([goal_d, goal_lat, goal_h])

    history = np.zeros((N_SLOTS, HISTORY_STEPS, 4))
    routes = np.zeros((N_SLOTS, N_ROUTES, N_WAYPOINTS, 3))
    route_real = np.zeros((N_SLOTS, N_ROUTES), dtype=int)
    valid = np.zeros(N_SLOTS, dtype=bool)
    ids = np.full(N_SLOTS, -1, dtype=int)
    truth = np.zeros((N_SLOTS, HORIZON, 3))

    history[0] = _history(0.0, 0.0, 0.0, v_ego)
    for r in range(N_ROUTES):
        routes[0, r] = _straight_route(0.0, 0.0, 0.0)
        route_real[0, r] = N_WAYPOINTS
    valid[0] = True
    ids[0] = 0
    # ego future: straight at the subgoal, reaching it in REACH_TIME seconds
    k = np.arange(1, HORIZON + 1) * DT
    speed = math.hypot(goal_d, goal_lat) / REACH_TIME
    truth[0] = np.stack([speed * k * math.cos(goal_h), speed * k * math.sin(goal_h), np.full(HORIZON, goal_h)], -1)

    ego_passes = goal_d > cross_x
    n_other = int(rng.integers(1, 4))
    for slot in range(1, 1 + n_other):
        sign = 1.0 if rng.random() < 0.5 else -1.0
        h = sign * math.pi / 2
        lane_x = cross_x + sign * 1.75
        y0 = -sign * rng.uniform(6.0, 25.0)
        v = rng.uniform(3.0, 8.0)
        history[slot] = _history(lane_x, y0, h, v)
        for r in range(N_ROUTES):
            routes[slot, r] = _straight_route(lane_x, y0, h)
            route_real[slot, r] = N_WAYPOINTS
        valid[slot] = True
        ids[slot] = slot
        if ego_passes:
            # yield: linear deceleration to a stop at the end of the horizon
            steps = np.arange(1, HORIZON + 1)
            travelled = v * DT * (steps - steps * (steps - 1) / (2.0 * HORIZON))
        else:
            travelled = v * k
        truth[slot] = np.stack([np.full(HORIZON, lane_x), y0 + sign * travelled, np.full(HORIZON, h)], -1)

    state = VectorState(history, routes, route_real, _cross_raster(cross_x), valid, ids,
                        np.array([0.0, 0.0, 0.0, v_ego]))
    return state, goal, truth, valid.copy()


def crossing_dataset(n: int, seed: int) -> CrossingSet:
    rng = np.random.default_rng(seed)
    parts = [crossing_sample(rng) for _ in range(n)]
    states, goals, truth, tv = zip(*parts)
    return CrossingSet(list(states), np.stack(goals), np.stack(truth), np.stack(tv))
