"""Decision-maker and motion-planner policies, their values, rewards and PPO."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcompute as dc
from .diffcompute import nn, ops
from .encoding import N_SUBGOALS, VectorState
from .geometry import normalize_angle
from .predictor import SceneEncoder, SceneInputs, featurize, goal_features

# reward constants
R_GOAL = 3.0
R_SUBGOAL = 0.5
R_NEAR = -0.5
EPS_SUBGOAL = 0.05
R_TIME = -0.05
R_ARRIVE = 1.0
R_COLLISION = -1.0
R_OFF_ROAD = -1.0
EPS_DIST = 0.05
EPS_HEADING = 0.5

SUBGOAL_RADIUS = 1.0
SUBGOAL_HEADING_TOL = math.pi / 6


@dataclass(frozen=True)
class ActionDelta:
    name: str
    dx: float
    dy: float
    dheading: float


ACTIONS: tuple[ActionDelta, ...] = (
    ActionDelta("slow_down", 0.2, 0.0, 0.0),
    ActionDelta("keep", 0.5, 0.0, 0.0),
    ActionDelta("slow_left", 0.5, 0.0, 0.05),
    ActionDelta("slow_right", 0.5, 0.0, -0.05),
    ActionDelta("quick_left", 0.45, 0.0, 0.15),
    ActionDelta("quick_right", 0.45, 0.0, -0.15),
)
N_ACTIONS = len(ACTIONS)


def action_table(overrides: dict | None = None) -> tuple[ActionDelta, ...]:
    """The default table with per-name (dx, dy, dheading) overrides."""
    if not overrides:
        return ACTIONS
    names = {a.name for a in ACTIONS}
    unknown = set(overrides) - names
    if unknown:
        raise ValueError(f"unknown actions in override: {sorted(unknown)}")
    return tuple(ActionDelta(a.name, *overrides[a.name]) if a.name in overrides else a for a in ACTIONS)


# rewards

def subgoal_reached(ego_xyh, subgoal_xyh) -> bool:
    d = math.hypot(ego_xyh[0] - subgoal_xyh[0], ego_xyh[1] - subgoal_xyh[1])
    return d < SUBGOAL_RADIUS and abs(normalize_angle(ego_xyh[2] - subgoal_xyh[2])) < SUBGOAL_HEADING_TOL


def decision_reward(goal_reached: bool, reached_subgoal: bool, d_subgoal: float) -> float:
    """Goal bonus + subgoal bonus + distance term, the distance taken at selection time."""
    r_goal = R_GOAL if goal_reached else 0.0
    r_sub = R_SUBGOAL if reached_subgoal else 0.0
    r_dist = R_NEAR + EPS_SUBGOAL * d_subgoal
    return r_goal + r_sub + r_dist


def planner_reward(arrived: bool, collided: bool, off_road: bool, d_prev: float, d_curr: float,
                   h_prev: float, h_curr: float) -> float:
    """Per-step planner reward; ``h_*`` are absolute normalised heading differences."""
    r = R_TIME + (R_ARRIVE if arrived else 0.0) + (R_COLLISION if collided else 0.0) + \
        (R_OFF_ROAD if off_road else 0.0)
    return r + EPS_DIST * (d_prev - d_curr) + EPS_HEADING * (h_prev - h_curr)


def masked_probabilities(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """softmax(logits + mask) along the last axis."""
    z = np.asarray(logits, float) + np.asarray(mask, float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# networks

@dataclass
class NetConfig:
    dim: int = 128
    heads: int = 4
    conv_channels: tuple[int, int, int] = (8, 16, 16)


def _ego_features(feats: dict[str, dc.Tensor]) -> dc.Tensor:
    """Concatenate the ego slot's four scene features -> (B, 4L)."""
    parts = [ops.take(feats[k], (slice(None), 0)) for k in ("history", "interaction", "route", "drivable")]
    return ops.concat(parts, axis=-1)


class DecisionPolicy:
    """Scene + task goal -> one logit per subgoal."""

    def __init__(self, store: dc.ParamStore, prefix: str, cfg: NetConfig, rng: np.random.Generator):
        L = cfg.dim
        self.encoder = SceneEncoder(store, f"{prefix}enc.", L, cfg.heads, rng, cfg.conv_channels)
        self.task_mlp = nn.MLP(store, f"{prefix}task", [4, L, L], rng, final_relu=True)
        self.goal_mlp = nn.MLP(store, f"{prefix}goal", [4, L, L], rng, final_relu=True)
        self.head = nn.MLP(store, f"{prefix}head", [6 * L, L, L, 1], rng)
        self.dim = L

    def logits(self, x: SceneInputs, task_goal: np.ndarray, subgoals: np.ndarray) -> dc.Tensor:
        b, n = subgoals.shape[0], subgoals.shape[1]
        state = ops.concat([_ego_features(self.encoder(x)), self.task_mlp(dc.Tensor(goal_features(task_goal)))], -1)
        state = ops.broadcast_to(ops.reshape(state, (b, 1, 5 * self.dim)), (b, n, 5 * self.dim))
        g = self.goal_mlp(dc.Tensor(goal_features(subgoals)))                   # (B, n, L)
        return ops.reshape(self.head(ops.concat([state, g], -1)), (b, n))


class DecisionValue:
    """Per-subgoal MLP, flatten all 12, join with the scene feature, 2-layer MLP -> scalar."""

    def __init__(self, store: dc.ParamStore, prefix: str, cfg: NetConfig, rng: np.random.Generator):
        L = cfg.dim
        self.encoder = SceneEncoder(store, f"{prefix}enc.", L, cfg.heads, rng, cfg.conv_channels)
        self.task_mlp = nn.MLP(store, f"{prefix}task", [4, L, L], rng, final_relu=True)
        self.goal_mlp = nn.MLP(store, f"{prefix}goal", [4, L, L], rng, final_relu=True)
        self.head = nn.MLP(store, f"{prefix}head", [(5 + N_SUBGOALS) * L, L, 1], rng)
        self.dim = L

    def __call__(self, x: SceneInputs, task_goal: np.ndarray, subgoals: np.ndarray) -> dc.Tensor:
        b = subgoals.shape[0]
        state = ops.concat([_ego_features(self.encoder(x)), self.task_mlp(dc.Tensor(goal_features(task_goal)))], -1)
        g = ops.reshape(self.goal_mlp(dc.Tensor(goal_features(subgoals))), (b, N_SUBGOALS * self.dim))
        return ops.reshape(self.head(ops.concat([state, g], -1)), (b,))


class PlannerPolicy:
    """Scene + subgoal -> logits over the action table (3-layer MLP head)."""

    def __init__(self, store: dc.ParamStore, prefix: str, cfg: NetConfig, rng: np.random.Generator,
                 n_out: int = N_ACTIONS):
        L = cfg.dim
        self.encoder = SceneEncoder(store, f"{prefix}enc.", L, cfg.heads, rng, cfg.conv_channels)
        self.goal_mlp = nn.MLP(store, f"{prefix}goal", [4, L, L], rng, final_relu=True)
        self.head = nn.MLP(store, f"{prefix}head", [5 * L, L, L, n_out], rng)

    def __call__(self, x: SceneInputs, subgoal: np.ndarray) -> dc.Tensor:
        g = self.goal_mlp(dc.Tensor(goal_features(subgoal)))                    # (B, L)
        return self.head(ops.concat([_ego_features(self.encoder(x)), g], -1))


class PlannerValue(PlannerPolicy):
    def __init__(self, store: dc.ParamStore, prefix: str, cfg: NetConfig, rng: np.random.Generator):
        super().__init__(store, prefix, cfg, rng, n_out=1)

    def __call__(self, x: SceneInputs, subgoal: np.ndarray) -> dc.Tensor:
        out = super().__call__(x, subgoal)
        return ops.reshape(out, (out.shape[0],))


# PPO

@dataclass
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    entropy_coef: float = 0.01
    epochs: int = 5
    minibatch: int | None = None   # None: the whole buffer in one step
    lr: float = 1e-4
    lr_late: float = 1e-5
    lr_switch_step: int = 2000
    normalize_advantages: bool = False  # zero-mean, unit-std advantages per update batch

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ValueError("gamma and lam must lie in [0, 1]")
        if self.clip <= 0:
            raise ValueError("clip must be positive")

    def lr_at(self, step: int) -> float:
        """Step schedule: ``lr`` for the first ``lr_switch_step`` gradient steps, then ``lr_late``."""
        return self.lr if step < self.lr_switch_step else self.lr_late


class EmptyBufferError(ValueError):
    pass


def gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray, last_value: float, gamma: float,
        lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates and returns for one trajectory segment.

    ``values[t]`` is V(s_t); ``last_value`` bootstraps the state after the last
    transition and is ignored when that transition is terminal.
    """
    n = len(rewards)
    adv = np.zeros(n)
    nxt_adv = 0.0
    nxt_val = last_value
    for t in range(n - 1, -1, -1):
        live = 1.0 - float(dones[t])
        delta = rewards[t] + gamma * nxt_val * live - values[t]
        nxt_adv = delta + gamma * lam * live * nxt_adv
        adv[t] = nxt_adv
        nxt_val = values[t]
    return adv, adv + np.asarray(values, float)


@dataclass
class Transition:
    state: VectorState
    action: int
    logprob: float
    reward: float
    done: bool
    goal: np.ndarray                  # planner: subgoal (3,); decision: task goal (3,)
    subgoals: np.ndarray | None = None  # decision only, (12, 3)
    mask: np.ndarray | None = None      # decision only, (12,)


@dataclass
class RolloutBuffer:
    items: list[Transition] = field(default_factory=list)
    # the state after the last transition, for bootstrapping
    last_state: VectorState | None = None
    last_goal: np.ndarray | None = None
    last_subgoals: np.ndarray | None = None

    def add(self, tr: Transition) -> None:
        self.items.append(tr)

    def clear(self) -> None:
        self.items.clear()
        self.last_state = None
        self.last_goal = None
        self.last_subgoals = None

    def __len__(self):
        return len(self.items)


def _entropy(logp: dc.Tensor) -> dc.Tensor:
    return ops.mul(ops.sum(ops.mul(ops.exp(logp), logp), axis=-1), -1.0)


class _PpoAgent:
    """Shared PPO machinery; subclasses supply the policy/value batch forwards."""

    def __init__(self, store: dc.ParamStore, ppo: PpoConfig):
        self.store = store
        self.ppo = ppo
        self.updates = 0

    # subclasses implement
    def _policy_logp(self, batch: list[Transition], x: SceneInputs) -> dc.Tensor:
        raise NotImplementedError

    def _values(self, x: SceneInputs, goals: np.ndarray, subgoals: np.ndarray | None) -> dc.Tensor:
        raise NotImplementedError

    def value_of(self, states: Sequence[VectorState], goals: np.ndarray, subgoals: np.ndarray | None = None):
        with dc.no_grad():
            return self._values(featurize(states), np.asarray(goals, float),
                                None if subgoals is None else np.asarray(subgoals, float)).data.copy()

    def advantages(self, buf: RolloutBuffer) -> tuple[np.ndarray, np.ndarray]:
        items = buf.items
        subs = None if items[0].subgoals is None else np.stack([t.subgoals for t in items])
        vals = self.value_of([t.state for t in items], np.stack([t.goal for t in items]), subs)
        last_value = 0.0
        if not items[-1].done and buf.last_state is not None:
            last_subs = None if buf.last_subgoals is None else buf.last_subgoals[None]
            last_value = float(self.value_of([buf.last_state], buf.last_goal[None], last_subs)[0])
        rewards = np.array([t.reward for t in items])
        dones = np.array([t.done for t in items])
        return gae(rewards, vals, dones, last_value, self.ppo.gamma, self.ppo.lam)

    def update(self, buf: RolloutBuffer, epochs: int | None = None) -> dict:
        """Clipped-surrogate PPO for ``epochs`` passes over the buffer.

        Each pass takes one gradient step per minibatch (one step when
        ``minibatch`` is None). Returns per-step lists of the total loss, value
        loss and mean entropy, each evaluated before that step's update.
        """
        if len(buf) == 0:
            raise EmptyBufferError("PPO update on an empty buffer")
        epochs = self.ppo.epochs if epochs is None else epochs
        items = buf.items
        adv, ret = self.advantages(buf)
        if self.ppo.normalize_advantages:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        n = len(items)
        size = self.ppo.minibatch or n
        chunks = [np.arange(i, min(i + size, n)) for i in range(0, n, size)]
        stats = {"loss": [], "value_loss": [], "entropy": []}
        for _ in range(epochs):
            for rows in chunks:
                part = [items[i] for i in rows]
                loss, v_loss, ent = self._loss(part, adv[rows], ret[rows])
                dc.backward(loss)
                self.store.adam_step(self.ppo.lr_at(self.store.step))
                stats["loss"].append(float(loss.data))
                stats["value_loss"].append(float(v_loss.data))
                stats["entropy"].append(float(ent.data))
        self.updates += 1
        return stats

    def _loss(self, items: list[Transition], adv: np.ndarray, ret: np.ndarray):
        x = featurize([t.state for t in items])
        goals = np.stack([t.goal for t in items])
        subs = None if items[0].subgoals is None else np.stack([t.subgoals for t in items])
        actions = np.array([t.action for t in items])
        old_logp = np.array([t.logprob for t in items])
        logp_all = self._policy_logp(items, x)
        logp = ops.take(logp_all, (np.arange(len(items)), actions))
        ratio = ops.exp(ops.sub(logp, old_logp))
        surr = ops.minimum(ops.mul(ratio, adv), ops.mul(ops.clip(ratio, 1 - self.ppo.clip, 1 + self.ppo.clip), adv))
        ent = ops.mean(_entropy(logp_all))
        v_loss = ops.mean(ops.square(ops.sub(self._values(x, goals, subs), ret)))
        loss = ops.add(ops.sub(ops.mul(ops.mean(surr), -1.0), ops.mul(ent, self.ppo.entropy_coef)),
                       ops.mul(v_loss, 0.5))
        return loss, v_loss, ent


class DecisionAgent(_PpoAgent):
    def __init__(self, cfg: NetConfig | None = None, ppo: PpoConfig | None = None, seed: int = 0,
                 store: dc.ParamStore | None = None):
        cfg = cfg or NetConfig()
        ppo = ppo or PpoConfig(lr=5e-5, lr_late=1e-5)
        super().__init__(store or dc.ParamStore(), ppo)
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.policy = DecisionPolicy(self.store, "pi.", cfg, rng)
        self.value = DecisionValue(self.store, "v.", cfg, rng)

    def logits(self, state: VectorState, task_goal, subgoals: np.ndarray) -> np.ndarray:
        with dc.no_grad():
            return self.policy.logits(featurize([state]), np.asarray(task_goal, float)[None, :3],
                                      np.asarray(subgoals, float)[None, :, :3]).data[0].copy()

    def act(self, state: VectorState, task_goal, subgoals: np.ndarray, mask: np.ndarray,
            rng: np.random.Generator | None, greedy: bool = False) -> tuple[np.ndarray, int]:
        """Probabilities softmax(logits + mask) and a sampled (or argmax) subgoal index."""
        logits = self.logits(state, task_goal, subgoals)
        if not np.all(np.isfinite(logits)):
            raise dc.NonFiniteError("decision logits are not finite")
        probs = masked_probabilities(logits, mask)
        idx = int(np.argmax(probs)) if greedy else int(rng.choice(len(probs), p=probs))
        return probs, idx

    def _policy_logp(self, items, x):
        goals = np.stack([t.goal for t in items])
        subs = np.stack([t.subgoals for t in items])
        masks = np.stack([t.mask for t in items])
        return ops.log_softmax(ops.add(self.policy.logits(x, goals, subs), masks), axis=-1)

    def _values(self, x, goals, subgoals):
        return self.value(x, goals, subgoals)


class PlannerAgent(_PpoAgent):
    def __init__(self, cfg: NetConfig | None = None, ppo: PpoConfig | None = None, seed: int = 0,
                 store: dc.ParamStore | None = None, actions: tuple[ActionDelta, ...] = ACTIONS):
        cfg = cfg or NetConfig()
        ppo = ppo or PpoConfig(lr=1e-4, lr_late=1e-5)
        super().__init__(store or dc.ParamStore(), ppo)
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.actions = actions
        self.policy = PlannerPolicy(self.store, "pi.", cfg, rng)
        self.value = PlannerValue(self.store, "v.", cfg, rng)

    def probabilities(self, state: VectorState, subgoal) -> np.ndarray:
        with dc.no_grad():
            logits = self.policy(featurize([state]), np.asarray(subgoal, float)[None, :3]).data[0]
        if not np.all(np.isfinite(logits)):
            raise dc.NonFiniteError("planner logits are not finite")
        return masked_probabilities(logits, np.zeros_like(logits))

    def act(self, state: VectorState, subgoal, rng: np.random.Generator | None,
            greedy: bool = False) -> tuple[np.ndarray, int]:
        probs = self.probabilities(state, subgoal)
        idx = int(np.argmax(probs)) if greedy else int(rng.choice(len(probs), p=probs))
        return probs, idx

    def _policy_logp(self, items, x):
        goals = np.stack([t.goal for t in items])
        return ops.log_softmax(self.policy(x, goals), axis=-1)

    def _values(self, x, goals, subgoals):
        return self.value(x, goals)
