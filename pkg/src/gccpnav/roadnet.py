"""Analytic four-way intersections: lanes, routes, drivable area and BEV raster.

Travel directions are indexed ``k = 0..3`` with heading ``pi/2 + k*pi/2``
(north, west, south, east). Every direction is the northbound layout rotated
by ``k * pi/2``; traffic drives on the right, lane 0 is the inner lane.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .geometry import OrientedBox, Pose, normalize_angle, normalize_angles

SCENARIO_IDS = ("turn_left", "go_straight", "turn_right")

N_ROUTES = 3
N_WAYPOINTS = 50
RASTER_SIZE = 64
RASTER_SPAN = 50.0
RASTER_RES = RASTER_SPAN / RASTER_SIZE  # 0.78125 m/px
LANE_CHANGE_LENGTH = 10.0
MAX_LANE_OFFSET = 5.0


class UnknownScenarioError(ValueError):
    pass


class OffRoadError(ValueError):
    """Raised when a pose is too far from every lane to be routed."""


@dataclass(frozen=True)
class IntersectionConfig:
    lane_width: float = 3.5
    lanes_per_direction: int = 2
    junction_half: float = 12.0
    map_half: float = 70.0
    spawn_distance: float = 40.0
    goal_distance: float = 30.0


@dataclass(frozen=True)
class Lane:
    id: int
    kind: str  # "in", "conn" or "out"
    direction: int
    index: int
    points: np.ndarray = field(repr=False)  # (n, 3) x, y, heading at 1 m chord spacing

    @cached_property
    def arc(self) -> np.ndarray:
        d = np.hypot(np.diff(self.points[:, 0]), np.diff(self.points[:, 1]))
        return np.concatenate([[0.0], np.cumsum(d)])

    @property
    def length(self) -> float:
        return float(self.arc[-1])


@dataclass
class Route:
    """A fixed-length route: ``waypoints`` is (N_WAYPOINTS, 3) at 1 m arc spacing.

    ``n_real`` counts waypoints that lie on the road path itself; the rest are
    straight-line extrapolation of the final heading.
    """

    waypoints: np.ndarray
    n_real: int
    lanes: tuple[int, ...]
    lane_change: bool = False


def _rot(k: int, pts: np.ndarray) -> np.ndarray:
    a = k * math.pi / 2
    c, s = round(math.cos(a)), round(math.sin(a))
    out = np.empty_like(pts)
    out[:, 0] = c * pts[:, 0] - s * pts[:, 1]
    out[:, 1] = s * pts[:, 0] + c * pts[:, 1]
    out[:, 2] = normalize_angles(pts[:, 2] + a)
    return out


def _straight(x0, y0, x1, y1) -> np.ndarray:
    length = math.hypot(x1 - x0, y1 - y0)
    n = int(math.floor(length + 1e-9)) + 1
    t = np.arange(n, dtype=float)
    h = math.atan2(y1 - y0, x1 - x0)
    return np.column_stack([x0 + t * math.cos(h), y0 + t * math.sin(h), np.full(n, h)])


def _arc(cx, cy, r, a0, a1) -> np.ndarray:
    """Points on a circle from angle a0 to a1 with exactly 1 m chords (endpoint not included)."""
    step = 2.0 * math.asin(0.5 / r)
    sign = 1.0 if a1 > a0 else -1.0
    n = int(math.floor(abs(a1 - a0) / step + 1e-9)) + 1
    ang = a0 + sign * step * np.arange(n)
    h = ang + sign * math.pi / 2
    return np.column_stack([cx + r * np.cos(ang), cy + r * np.sin(ang), normalize_angles(h)])


def _convex_contains(polys: list[np.ndarray], x: np.ndarray, y: np.ndarray) -> np.ndarray:
    inside = np.zeros(np.shape(x), dtype=bool)
    for poly in polys:
        ok = np.ones(np.shape(x), dtype=bool)
        for i in range(len(poly)):
            x1, y1 = poly[i]
            x2, y2 = poly[(i + 1) % len(poly)]
            ok &= (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1) >= -1e-9
        inside |= ok
    return inside


class RoadNetwork:
    def __init__(self, lanes: list[Lane], successors: dict[int, list[int]],
                 neighbours: dict[int, list[int]], polygons: list[np.ndarray]):
        self.lanes = {lane.id: lane for lane in lanes}
        self.successors = successors
        self.neighbours = neighbours
        self.polygons = polygons
        ids = []
        pts = []
        idx = []
        for lane in lanes:
            ids.append(np.full(len(lane.points), lane.id))
            idx.append(np.arange(len(lane.points)))
            pts.append(lane.points)
        self._pt_lane = np.concatenate(ids)
        self._pt_idx = np.concatenate(idx)
        self._pts = np.concatenate(pts)
        self._paths_from = {lid: self._enumerate(lid) for lid in self.lanes}
        self._path_cache: dict[tuple[int, ...], tuple[np.ndarray, np.ndarray]] = {}

    @property
    def entry_lanes(self) -> list[int]:
        return [lid for lid, lane in self.lanes.items() if lane.kind == "in"]

    def _enumerate(self, lane_id: int) -> list[tuple[int, ...]]:
        succ = self.successors.get(lane_id, [])
        if not succ:
            return [(lane_id,)]
        return [(lane_id,) + tail for s in succ for tail in self._enumerate(s)]

    def paths_from(self, lane_id: int) -> list[tuple[int, ...]]:
        return list(self._paths_from[lane_id])

    def path_polyline(self, lanes: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
        """Concatenated polyline of a lane sequence and its cumulative arc length."""
        hit = self._path_cache.get(lanes)
        if hit is not None:
            return hit
        pts = [self.lanes[lanes[0]].points]
        for lid in lanes[1:]:
            nxt = self.lanes[lid].points
            if np.hypot(*(pts[-1][-1, :2] - nxt[0, :2])) < 1e-9:
                nxt = nxt[1:]
            pts.append(nxt)
        poly = np.concatenate(pts)
        seg = np.hypot(np.diff(poly[:, 0]), np.diff(poly[:, 1]))
        arc = np.concatenate([[0.0], np.cumsum(seg)])
        self._path_cache[lanes] = (poly, arc)
        return poly, arc

    def contains(self, x, y) -> np.ndarray:
        return _convex_contains(self.polygons, np.asarray(x, float), np.asarray(y, float))

    def nearest_lane(self, pose: Pose, lane_hint: int | None = None) -> tuple[int, float, float]:
        """(lane id, arc position of the projection, lateral distance)."""
        if lane_hint is not None:
            s, d = project_onto(self.lanes[lane_hint].points, self.lanes[lane_hint].arc, pose.x, pose.y)
            return lane_hint, s, d
        dx = self._pts[:, 0] - pose.x
        dy = self._pts[:, 1] - pose.y
        dist = np.hypot(dx, dy)
        dh = np.abs(normalize_angles(self._pts[:, 2] - pose.heading))
        # heading-compatible points first; ties broken by lane id order via argmin stability
        score = dist + np.where(dh < math.pi / 2, 0.0, 1e3) + 0.5 * dh
        best = int(np.argmin(score))
        lane = self.lanes[int(self._pt_lane[best])]
        s, d = project_onto(lane.points, lane.arc, pose.x, pose.y)
        if d > MAX_LANE_OFFSET:
            # wrong-way or cross-junction poses: fall back to the nearest lane regardless of heading
            lane = self.lanes[int(self._pt_lane[int(np.argmin(dist))])]
            s, d = project_onto(lane.points, lane.arc, pose.x, pose.y)
        return lane.id, s, d


def project_onto(points: np.ndarray, arc: np.ndarray, x: float, y: float) -> tuple[float, float]:
    """Arc-length of the closest point on a polyline and the distance to it."""
    p0 = points[:-1, :2]
    seg = points[1:, :2] - p0
    seg_len2 = np.maximum((seg ** 2).sum(1), 1e-12)
    t = np.clip(((x - p0[:, 0]) * seg[:, 0] + (y - p0[:, 1]) * seg[:, 1]) / seg_len2, 0.0, 1.0)
    qx = p0[:, 0] + t * seg[:, 0]
    qy = p0[:, 1] + t * seg[:, 1]
    d = np.hypot(qx - x, qy - y)
    i = int(np.argmin(d))
    return float(arc[i] + t[i] * math.sqrt(seg_len2[i])), float(d[i])


def sample_polyline(poly: np.ndarray, arc: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Points at arc positions ``s``; beyond the end, extrapolate along the final heading."""
    s = np.asarray(s, float)
    seg = np.diff(poly[:, :2], axis=0)
    seg_h = np.arctan2(seg[:, 1], seg[:, 0])
    i = np.clip(np.searchsorted(arc, s, side="right") - 1, 0, len(poly) - 2)
    t = s - arc[i]
    h = seg_h[i]
    x = poly[i, 0] + t * np.cos(h)
    y = poly[i, 1] + t * np.sin(h)
    return np.column_stack([x, y, h])


def build_network(cfg: IntersectionConfig = IntersectionConfig()) -> RoadNetwork:
    w, J, E = cfg.lane_width, cfg.junction_half, cfg.map_half
    n = cfg.lanes_per_direction
    lanes: list[Lane] = []
    ids: dict[tuple[str, int, int], int] = {}

    def add(kind, k, i, local_pts):
        lid = len(lanes)
        lanes.append(Lane(lid, kind, k, i, _rot(k, local_pts)))
        ids[(kind, k, i)] = lid
        return lid

    for k in range(4):
        for i in range(n):
            x = (i + 0.5) * w
            add("in", k, i, _straight(x, -E, x, -J))
            add("out", k, i, _straight(x, J, x, E))
    successors: dict[int, list[int]] = {lane.id: [] for lane in lanes}
    conn_specs = []
    for k in range(4):
        for i in range(n):
            x = (i + 0.5) * w
            conn_specs.append((k, i, "straight", _straight(x, -J, x, J), (k, i)))
        x_in = 0.5 * w
        r_left = J + x_in
        conn_specs.append((k, 0, "left", _arc(-J, -J, r_left, 0.0, math.pi / 2), ((k + 1) % 4, 0)))
        x_out = (n - 0.5) * w
        r_right = J - x_out
        conn_specs.append((k, n - 1, "right", _arc(J, -J, r_right, math.pi, math.pi / 2), ((k + 3) % 4, n - 1)))
    for j, (k, i, _, pts, (k_out, i_out)) in enumerate(conn_specs):
        cid = len(lanes)
        lanes.append(Lane(cid, "conn", k, i, _rot(k, pts)))
        successors[cid] = [ids[("out", k_out, i_out)]]
        successors[ids[("in", k, i)]].append(cid)
    neighbours: dict[int, list[int]] = {lane.id: [] for lane in lanes}
    for kind in ("in", "out"):
        for k in range(4):
            for i in range(n):
                for di in (-1, 1):
                    if 0 <= i + di < n:
                        neighbours[ids[(kind, k, i)]].append(ids[(kind, k, i + di)])
    hw = n * w
    polygons = [
        np.array([[-hw, -E], [hw, -E], [hw, E], [-hw, E]], float),
        np.array([[-E, -hw], [E, -hw], [E, hw], [-E, hw]], float),
        np.array([[-J, -J], [J, -J], [J, J], [-J, J]], float),
    ]
    return RoadNetwork(lanes, successors, neighbours, polygons)


@dataclass(frozen=True)
class TrafficFlowSpec:
    seed: int = 0
    spawn_rate: float = 0.15
    speed_range: tuple[float, float] = (4.0, 8.0)
    max_vehicles: int = 10
    warmup_steps: int = 50

    def __post_init__(self):
        if self.speed_range[0] > self.speed_range[1]:
            raise ValueError("speed_range min must be <= max")
        if self.spawn_rate < 0:
            raise ValueError("spawn_rate must be >= 0")


@dataclass(frozen=True)
class Scenario:
    id: str
    network: RoadNetwork
    ego_spawn: Pose
    task_goal: Pose
    traffic_spec: TrafficFlowSpec
    config: IntersectionConfig


def build_scenario(scenario_id: str, cfg: IntersectionConfig | None = None,
                   traffic: TrafficFlowSpec | None = None) -> Scenario:
    if scenario_id not in SCENARIO_IDS:
        raise UnknownScenarioError(f"unknown scenario {scenario_id!r}; expected one of {SCENARIO_IDS}")
    cfg = cfg or IntersectionConfig()
    traffic = traffic or TrafficFlowSpec()
    net = build_network(cfg)
    w, J, n = cfg.lane_width, cfg.junction_half, cfg.lanes_per_direction
    lane_idx = n - 1 if scenario_id == "turn_right" else 0
    x = (lane_idx + 0.5) * w
    spawn = Pose(x, -J - cfg.spawn_distance, math.pi / 2)
    d = J + cfg.goal_distance
    if scenario_id == "go_straight":
        goal = Pose(x, d, math.pi / 2)
    elif scenario_id == "turn_left":
        goal = Pose(-d, 0.5 * w, math.pi)
    else:
        goal = Pose(d, -(n - 0.5) * w, 0.0)
    return Scenario(scenario_id, net, spawn, goal, traffic, cfg)


def _resample_route(poly, arc, s0) -> tuple[np.ndarray, int]:
    s = s0 + np.arange(N_WAYPOINTS, dtype=float)
    wps = sample_polyline(poly, arc, s)
    n_real = int(np.sum(s <= arc[-1] + 1e-9))
    return wps, n_real


def _blend_lane_change(net: RoadNetwork, cur: tuple[int, ...], adj: tuple[int, ...], s0: float, s_adj: float):
    """Polyline that eases from ``cur`` onto ``adj`` over LANE_CHANGE_LENGTH metres (smoothstep)."""
    poly_c, arc_c = net.path_polyline(cur)
    poly_a, arc_a = net.path_polyline(adj)
    k = np.arange(0.0, LANE_CHANGE_LENGTH + 0.125, 0.25)
    u = k / LANE_CHANGE_LENGTH
    wgt = (u * u * (3 - 2 * u))[:, None]
    pc = sample_polyline(poly_c, arc_c, s0 + k)[:, :2]
    pa = sample_polyline(poly_a, arc_a, s_adj + k)[:, :2]
    tail = poly_a[arc_a > s_adj + LANE_CHANGE_LENGTH + 1e-6, :2]
    pts = np.concatenate([(1 - wgt) * pc + wgt * pa, tail])
    seg = np.hypot(np.diff(pts[:, 0]), np.diff(pts[:, 1]))
    pts = pts[np.concatenate([[True], seg > 1e-9])]
    seg = np.hypot(np.diff(pts[:, 0]), np.diff(pts[:, 1]))
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    return np.column_stack([pts, np.zeros(len(pts))]), arc


def _candidates(net: RoadNetwork, lane_id: int, s0: float, pose: Pose):
    """(lane sequence, polyline, arc, start arc, lane_change) for every path from a pose."""
    out = []
    for path in net.paths_from(lane_id):
        poly, arc = net.path_polyline(path)
        out.append((path, poly, arc, s0, False))
    lane = net.lanes[lane_id]
    if lane.kind in ("in", "out") and lane.length - s0 >= LANE_CHANGE_LENGTH:
        for adj in net.neighbours[lane_id]:
            adj_lane = net.lanes[adj]
            s_adj, _ = project_onto(adj_lane.points, adj_lane.arc, pose.x, pose.y)
            for path in net.paths_from(adj):
                poly, arc = _blend_lane_change(net, (lane_id,), path, s0, s_adj)
                out.append((path, poly, arc, 0.0, True))
    return out


def routes_toward(net: RoadNetwork, pose: Pose, goal: Pose, lane_hint: int | None = None) -> list[Route]:
    """Exactly ``N_ROUTES`` routes of ``N_WAYPOINTS`` waypoints each, best first.

    Candidates are ranked by how close they pass to ``goal``, then by whether
    they need a lane change. Missing candidates are filled with the best route.
    """
    lane_id, s0, lateral = net.nearest_lane(pose, lane_hint)
    if lateral > MAX_LANE_OFFSET:
        raise OffRoadError(f"pose ({pose.x:.2f}, {pose.y:.2f}) is {lateral:.2f} m from the nearest lane")
    scored = []
    for path, poly, arc, start, lc in _candidates(net, lane_id, s0, pose):
        ahead = arc >= start - 1e-9
        dmin = float(np.min(np.hypot(poly[ahead, 0] - goal.x, poly[ahead, 1] - goal.y))) if ahead.any() \
            else float(np.hypot(poly[-1, 0] - goal.x, poly[-1, 1] - goal.y))
        wps, n_real = _resample_route(poly, arc, start)
        scored.append(((round(dmin, 1), lc, path), Route(wps, n_real, path, lc)))
    scored.sort(key=lambda item: item[0])
    routes = [r for _, r in scored[:N_ROUTES]]
    while len(routes) < N_ROUTES:
        best = routes[0]
        routes.append(Route(best.waypoints.copy(), best.n_real, best.lanes, best.lane_change))
    return routes


def is_on_road(net: RoadNetwork, box: OrientedBox) -> bool:
    c = box.corners()
    return bool(net.contains(c[:, 0], c[:, 1]).all())


@dataclass(frozen=True)
class BevRaster:
    grid: np.ndarray
    resolution: float = RASTER_RES


def raster_pixel_centers() -> tuple[np.ndarray, np.ndarray]:
    """Ego-frame centres; pixel (i, j) covers x in [(i-32)res, (i-31)res), y likewise for j."""
    c = (np.arange(RASTER_SIZE) - RASTER_SIZE // 2 + 0.5) * RASTER_RES
    return np.meshgrid(c, c, indexing="ij")


_PX, _PY = raster_pixel_centers()


def rasterize_drivable(net: RoadNetwork, ego: Pose) -> BevRaster:
    """64x64 ego-centred drivable mask; axis 0 runs along the ego heading, axis 1 to its left."""
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    wx = ego.x + c * _PX - s * _PY
    wy = ego.y + s * _PX + c * _PY
    return BevRaster(net.contains(wx, wy).astype(np.uint8))
