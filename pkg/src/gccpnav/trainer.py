"""Two-level training loop: episodes, buffers, gated phases, predictor replay and metrics.

The loop follows the schedule in :class:`~gccpnav.config.TrainSchedule`:

* every ``window`` steps the decision-maker picks a subgoal, using a zero risk
  mask until episode ``mask_start`` and the GCCP mask afterwards;
* the planner acts for up to ``window`` steps and, while the episode index is
  below ``planner_freeze``, takes a PPO update on that window's transitions;
* after each episode the decision-maker takes a PPO update on the episode's
  windows; past ``planner_freeze`` the episode's windows go to the replay
  buffer and the predictor takes ``predictor_steps`` gradient steps.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcompute as dc
from .agents import (ACTIONS, DecisionAgent, NetConfig, PlannerAgent, PpoConfig, RolloutBuffer, Transition,
                     action_table, decision_reward, planner_reward, subgoal_reached)
from .config import RunConfig, TrainSchedule
from .encoding import N_SUBGOALS, VectorState, _ego_routes, encode_state, goal_in_ego_frame, sample_subgoals
from .gccp import UNSAFE, RiskMask, compute_mask
from .geometry import normalize_angle
from .predictor import Predictor, PredictorConfig, ade_fde, featurize, future_targets
from .roadnet import Scenario, TrafficFlowSpec, build_scenario, routes_toward
from .sim import COLLISION, GOAL_REACHED, OFF_ROAD, TIMEOUT, WorldState, reset, step, teleport_ego

log = logging.getLogger(__name__)

METRIC_FIELDS = (
    "episode", "scenario", "flow_seed", "steps", "success", "collision", "off_road", "timeout",
    "decision_return", "planner_return", "windows", "subgoal_arrivals", "mask_unsafe", "mask_fallbacks",
    "planner_updates", "predictor_steps", "predictor_loss", "probe_ade", "probe_fde", "replay_size",
)


# replay

@dataclass
class ReplayEntry:
    t: int
    state: VectorState
    subgoal: np.ndarray       # (3,) ego frame at time t
    truth: np.ndarray         # (6, T_f, 3)
    truth_valid: np.ndarray   # (6,)


class ReplayBuffer:
    """FIFO ring of predictor training windows."""

    def __init__(self, capacity: int, window: int):
        self.items: deque[ReplayEntry] = deque(maxlen=capacity)
        self.window = window

    def __len__(self):
        return len(self.items)

    def add(self, entry: ReplayEntry) -> None:
        if entry.t % self.window != 0:
            raise ValueError(f"replay entries must start on a window boundary, got t={entry.t}")
        self.items.append(entry)

    def sample(self, rng: np.random.Generator, n: int) -> list[ReplayEntry]:
        idx = rng.choice(len(self.items), size=n, replace=False)
        return [self.items[i] for i in idx]

    def take(self, rng: np.random.Generator, n: int) -> list[ReplayEntry]:
        """Remove ``n`` random entries and return them (used to hold out a probe set)."""
        idx = set(rng.choice(len(self.items), size=n, replace=False).tolist())
        out = [e for i, e in enumerate(self.items) if i in idx]
        keep = [e for i, e in enumerate(self.items) if i not in idx]
        self.items.clear()
        self.items.extend(keep)
        return out


def batch_arrays(entries: list[ReplayEntry]):
    x = featurize([e.state for e in entries])
    goals = np.stack([e.subgoal for e in entries])
    truth = np.stack([e.truth for e in entries])
    valid = np.stack([e.truth_valid for e in entries])
    return x, goals, truth, valid


# observation hooks

class Observer:
    """No-op hooks; tests subclass this to check the schedule."""

    def on_mask(self, episode: int, entries: np.ndarray) -> None: ...
    def on_window_end(self, episode: int, planner_buffer_len: int, updated: bool) -> None: ...
    def on_episode_end(self, episode: int, trainer: "Trainer", result: "EpisodeResult") -> None: ...


# episode

@dataclass
class WindowRecord:
    t: int
    state: VectorState
    subgoals: np.ndarray          # (12, 3) ego frame
    subgoals_world: np.ndarray    # (12, 3)
    mask: RiskMask | None
    mask_entries: np.ndarray
    probs: np.ndarray
    choice: int
    poses: list = field(default_factory=list)   # executed world poses (x, y, heading, speed)
    actions: list = field(default_factory=list)
    reached: bool = False
    reward: float = 0.0


@dataclass
class EpisodeResult:
    scenario: str
    flow_seed: int
    steps: int
    events: frozenset
    decision_return: float
    planner_return: float
    windows: int
    subgoal_arrivals: int
    mask_unsafe: int
    mask_fallbacks: int
    planner_updates: int

    @property
    def success(self) -> bool:
        return GOAL_REACHED in self.events and COLLISION not in self.events

    @property
    def collision(self) -> bool:
        return COLLISION in self.events


def _heading_gap(a: float, b: float) -> float:
    return abs(normalize_angle(a - b))


class Trainer:
    def __init__(self, cfg: RunConfig, out_dir: str | Path | None = None, observer: Observer | None = None):
        self.cfg = cfg
        self.schedule: TrainSchedule = cfg.schedule
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.observer = observer or Observer()
        self.rng = np.random.default_rng(cfg.seed)
        t = cfg.traffic
        spec = TrafficFlowSpec(spawn_rate=t.spawn_rate, max_vehicles=t.max_vehicles,
                               speed_range=tuple(t.speed_range), warmup_steps=t.warmup_steps)
        self.scenarios: list[Scenario] = [build_scenario(s, traffic=spec) for s in cfg.scenarios]
        pn = cfg.predictor_net
        self.predictor = Predictor(PredictorConfig(dim=pn.dim, heads=pn.heads, conv_channels=tuple(pn.conv_channels),
                                                   goal_conditioning=cfg.goal_conditioning, lr=cfg.predictor_lr,
                                                   seed=cfg.seed))
        if self.predictor.config.horizon != self.schedule.window:
            raise ValueError("the decision window must equal the prediction horizon")
        net = NetConfig(cfg.policy_net.dim, cfg.policy_net.heads, tuple(cfg.policy_net.conv_channels))
        p = cfg.ppo
        common = dict(gamma=p.gamma, lam=p.lam, clip=p.clip, entropy_coef=p.entropy_coef, minibatch=p.minibatch,
                      lr_switch_step=p.lr_switch_step, normalize_advantages=p.normalize_advantages)
        self.decision = DecisionAgent(net, PpoConfig(lr=p.decision_lr, lr_late=p.decision_lr_late,
                                                     epochs=self.schedule.decision_epochs, **common),
                                      seed=cfg.seed + 1)
        actions = action_table({k: tuple(v) for k, v in cfg.actions.items()}) if cfg.actions else ACTIONS
        self.planner = PlannerAgent(net, PpoConfig(lr=p.planner_lr, lr_late=p.planner_lr_late,
                                                   epochs=self.schedule.planner_epochs, **common),
                                    seed=cfg.seed + 2, actions=actions)
        self.replay = ReplayBuffer(self.schedule.replay_capacity, self.schedule.window)
        self.probe: list[ReplayEntry] = []
        self.episode_buffer: list[tuple[int, VectorState, np.ndarray]] = []   # D_e
        self.decision_buffer = RolloutBuffer()                                  # D_d
        self.predictor_steps_total = 0

    # seeds and scheduling

    def flow_seed(self, episode: int) -> int:
        return self.cfg.seed * 1_000_003 + episode

    def scenario_for(self, episode: int) -> Scenario:
        return self.scenarios[(episode - 1) % len(self.scenarios)]

    def mask_active(self, episode: int) -> bool:
        return episode > self.schedule.mask_start and self.cfg.gccp != "disabled"

    def planner_learning(self, episode: int) -> bool:
        return episode < self.schedule.planner_freeze

    # rollout

    def risk_mask(self, state: VectorState, subgoals, active: bool) -> tuple[np.ndarray, RiskMask | None]:
        if not active:
            return np.zeros(N_SUBGOALS), None
        m = compute_mask(state, subgoals, self.predictor, self.cfg.gccp)
        return m.entries, m

    def run_episode(self, scenario: Scenario, flow_seed: int, episode: int, *, learn: bool = True,
                    greedy: bool = False, mask_active: bool | None = None,
                    on_window: Callable[[WindowRecord, WorldState], None] | None = None) -> EpisodeResult:
        """Roll out one episode; with ``learn`` the planner trains per window and buffers fill."""
        sch = self.schedule
        mask_active = self.mask_active(episode) if mask_active is None else mask_active
        world = reset(scenario, flow_seed, max_steps=self.cfg.max_steps)
        if learn:
            self.episode_buffer = []
        goal_world = np.array([scenario.task_goal.x, scenario.task_goal.y, scenario.task_goal.heading])
        routes = _ego_routes(world)
        state = encode_state(world, routes)
        d_ret = p_ret = 0.0
        windows = arrivals = unsafe = fallbacks = p_updates = 0
        while not world.terminated:
            t0 = world.step_count
            subgoals = sample_subgoals(world, routes)
            task_goal = goal_in_ego_frame(world, goal_world)
            mask_entries, mask = self.risk_mask(state, subgoals, mask_active)
            self.observer.on_mask(episode, mask_entries)
            unsafe += int(np.sum(mask_entries == UNSAFE))
            fallbacks += int(mask is not None and mask.fallback)
            probs, choice = self.decision.act(state, task_goal, subgoals.goals, mask_entries, self.rng, greedy)
            g_world = subgoals.goals_world[choice]
            g_ego = subgoals.goals[choice]
            d_subgoal = math.hypot(g_ego[0], g_ego[1])
            rec = WindowRecord(t0, state, subgoals.goals, subgoals.goals_world, mask, mask_entries, probs, choice,
                               poses=[world.ego.copy()])
            if learn:
                self.episode_buffer.append((t0, state, g_ego.copy()))
            window_state = state
            planner_buf = RolloutBuffer()
            reached = False
            for _ in range(sch.window):
                g_now = goal_in_ego_frame(world, g_world)
                a_probs, a = self.planner.act(state, g_now, self.rng, greedy)
                ego_prev = world.ego.copy()
                step(world, self.planner.actions[a])
                ego = world.ego
                arrived = (not reached) and subgoal_reached(ego, g_world)
                reached = reached or arrived
                r = planner_reward(
                    arrived, COLLISION in world.events, OFF_ROAD in world.events,
                    math.hypot(ego_prev[0] - g_world[0], ego_prev[1] - g_world[1]),
                    math.hypot(ego[0] - g_world[0], ego[1] - g_world[1]),
                    _heading_gap(ego_prev[2], g_world[2]), _heading_gap(ego[2], g_world[2]))
                p_ret += r
                rec.poses.append(ego.copy())
                rec.actions.append(a)
                if learn:
                    planner_buf.add(Transition(state, a, float(np.log(a_probs[a])), r, world.terminated, g_now))
                if world.terminated:
                    break
                routes = _ego_routes(world)
                state = encode_state(world, routes)
            windows += 1
            arrivals += int(reached)
            r_d = decision_reward(GOAL_REACHED in world.events, reached, d_subgoal)
            d_ret += r_d
            rec.reached, rec.reward = reached, r_d
            updated = False
            if learn:
                if self.planner_learning(episode):
                    if not world.terminated:
                        planner_buf.last_state = state
                        planner_buf.last_goal = goal_in_ego_frame(world, g_world)
                    self.planner.update(planner_buf)
                    updated = True
                    p_updates += 1
                self.decision_buffer.add(Transition(window_state, choice, float(np.log(probs[choice])), r_d,
                                                    world.terminated, task_goal, subgoals.goals, mask_entries))
            self.observer.on_window_end(episode, len(planner_buf), updated)
            planner_buf.clear()
            if on_window is not None:
                on_window(rec, world)
        self._last_world = world
        return EpisodeResult(scenario.id, flow_seed, world.step_count, world.events, d_ret, p_ret, windows,
                             arrivals, unsafe, fallbacks, p_updates)

    # end of episode

    def dump_episode(self, world: WorldState) -> int:
        n = 0
        for t, state, g in self.episode_buffer:
            truth, valid = future_targets(world.tracks, state.ids, state.valid, t, state.ego_world,
                                          state.history[:, -1, :3], self.schedule.window)
            if not valid.any():
                continue
            self.replay.add(ReplayEntry(t, state.compact(), g, truth, valid))
            n += 1
        self.episode_buffer = []
        return n

    def refresh_probe(self) -> None:
        sch = self.schedule
        if len(self.replay) >= sch.probe_size + sch.predictor_batch:
            self.probe = self.replay.take(self.rng, sch.probe_size)

    def probe_metrics(self) -> tuple[float, float]:
        if not self.probe:
            return math.nan, math.nan
        x, goals, truth, valid = batch_arrays(self.probe)
        with dc.no_grad():
            pred = self.predictor.forward(x, goals).data
        return ade_fde(pred[valid], truth[valid])

    def end_of_episode(self, episode: int, world: WorldState) -> dict:
        sch = self.schedule
        out = {"predictor_steps": 0, "predictor_loss": math.nan, "probe_ade": math.nan, "probe_fde": math.nan}
        if len(self.decision_buffer):
            self.decision.update(self.decision_buffer)
        self.decision_buffer.clear()
        if episode > sch.planner_freeze:
            self.dump_episode(world)
            if episode % sch.probe_refresh == 0 or not self.probe:
                self.refresh_probe()
            if len(self.replay) < sch.predictor_batch:
                log.info("episode %d: replay holds %d < %d windows; skipping predictor steps",
                         episode, len(self.replay), sch.predictor_batch)
            else:
                losses = []
                for _ in range(sch.predictor_steps):
                    x, goals, truth, valid = batch_arrays(self.replay.sample(self.rng, sch.predictor_batch))
                    losses.append(self.predictor.train_step(x, goals, truth, valid))
                self.predictor_steps_total += len(losses)
                out["predictor_steps"] = len(losses)
                out["predictor_loss"] = float(np.mean(losses))
                out["probe_ade"], out["probe_fde"] = self.probe_metrics()
        else:
            self.episode_buffer = []
        return out

    # checkpoints

    def stores(self):
        return [("predictor/", self.predictor.store), ("decision/", self.decision.store),
                ("planner/", self.planner.store)]

    def save(self, path: str | Path) -> None:
        dc.save_stores(path, self.stores())

    def load(self, path: str | Path) -> None:
        dc.load_stores(path, self.stores())

    # main loop

    def train(self, episodes: int | None = None) -> list[dict]:
        n = self.schedule.episodes if episodes is None else episodes
        rows = []
        writer = fh = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "checkpoints").mkdir(exist_ok=True)
            fh = open(self.out_dir / "metrics.csv", "w", newline="")
            writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
            writer.writeheader()
        try:
            for episode in range(1, n + 1):
                sc = self.scenario_for(episode)
                res = self.run_episode(sc, self.flow_seed(episode), episode)
                upd = self.end_of_episode(episode, self._last_world)
                row = metrics_row(episode, res, upd, len(self.replay))
                rows.append(row)
                self.observer.on_episode_end(episode, self, res)
                if writer is not None:
                    writer.writerow(format_row(row))
                    fh.flush()
                    if episode % self.schedule.checkpoint_every == 0:
                        self.save(self.out_dir / "checkpoints" / f"episode_{episode:05d}.ckpt")
            if self.out_dir is not None:
                self.save(self.out_dir / "checkpoints" / "final.ckpt")
        finally:
            if fh is not None:
                fh.close()
        return rows


def metrics_row(episode: int, res: EpisodeResult, upd: dict, replay_size: int) -> dict:
    return {
        "episode": episode, "scenario": res.scenario, "flow_seed": res.flow_seed, "steps": res.steps,
        "success": int(res.success), "collision": int(res.collision), "off_road": int(OFF_ROAD in res.events),
        "timeout": int(TIMEOUT in res.events), "decision_return": res.decision_return,
        "planner_return": res.planner_return, "windows": res.windows, "subgoal_arrivals": res.subgoal_arrivals,
        "mask_unsafe": res.mask_unsafe, "mask_fallbacks": res.mask_fallbacks,
        "planner_updates": res.planner_updates, "predictor_steps": upd["predictor_steps"],
        "predictor_loss": upd["predictor_loss"], "probe_ade": upd["probe_ade"], "probe_fde": upd["probe_fde"],
        "replay_size": replay_size,
    }


def format_row(row: dict) -> dict:
    out = {}
    for k, v in row.items():
        if isinstance(v, float):
            out[k] = "" if math.isnan(v) else repr(round(v, 10))
        else:
            out[k] = v
    return out


PROBE_SUBGOALS = (0, 4, 8)   # the 5 m subgoal on each of the three routes
PROBE_SPACING = 5
PROBE_SPEED = 5.0


def planner_arrival_rate(planner: PlannerAgent, scenario_ids=None, window: int = 10,
                         max_offset: int = 60) -> tuple[float, int]:
    """Greedy planner arrival rate on an empty map.

    The ego is placed every ``PROBE_SPACING`` m along each scenario's best
    route, cruising at ``PROBE_SPEED``. For each placement and each route's
    5 m subgoal the planner gets ``window`` steps. Returns (rate, probe count).
    """
    from .roadnet import SCENARIO_IDS
    empty = TrafficFlowSpec(spawn_rate=0.0, warmup_steps=0)
    hits = total = 0
    for sid in scenario_ids or SCENARIO_IDS:
        sc = build_scenario(sid, traffic=empty)
        route = routes_toward(sc.network, sc.ego_spawn, sc.task_goal)[0]
        for off in range(0, min(max_offset, route.n_real - 1) + 1, PROBE_SPACING):
            x, y, h = route.waypoints[off]
            for idx in PROBE_SUBGOALS:
                world = reset(sc, 0)
                teleport_ego(world, x, y, h, PROBE_SPEED)
                routes = _ego_routes(world)
                g_world = sample_subgoals(world, routes).goals_world[idx]
                total += 1
                for _ in range(window):
                    state = encode_state(world, routes)
                    _, a = planner.act(state, goal_in_ego_frame(world, g_world), None, greedy=True)
                    step(world, planner.actions[a])
                    if subgoal_reached(world.ego, g_world):
                        hits += 1
                        break
                    if world.terminated:
                        break
                    routes = _ego_routes(world)
    return hits / total, total


def rolling_success(path: str | Path, window: int = 100) -> list[float]:
    """Trailing-window success rate recomputed from a metrics file."""
    with open(path) as fh:
        wins = [int(r["success"]) for r in csv.DictReader(fh)]
    out = []
    for i in range(len(wins)):
        chunk = wins[max(0, i + 1 - window): i + 1]
        out.append(sum(chunk) / len(chunk))
    return out
