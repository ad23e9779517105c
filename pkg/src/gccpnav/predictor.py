"""Goal-conditioned trajectory predictor.

The scene encoder (history self-attention, interaction graph, route
cross-attention and drivable-area CNN) is shared in structure with the
policies in :mod:`gccpnav.agents`; each network owns its own weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcompute as dc
from .diffcompute import nn, ops
from .encoding import N_SLOTS, VectorState
from .geometry import normalize_angles, to_ego_frame_array
from .sim import DT

HORIZON = 10
POS_SCALE = 10.0
SPEED_SCALE = 10.0
TRAJ_FEATURES = 11
ROUTE_FEATURES = 10
GOAL_FEATURES = 4


class EmptyBatchError(ValueError):
    pass


@dataclass
class PredictorConfig:
    dim: int = 128
    heads: int = 4
    horizon: int = HORIZON
    goal_conditioning: bool = True
    lr: float = 1e-4
    seed: int = 0
    conv_channels: tuple[int, int, int] = (8, 16, 16)


@dataclass
class SceneInputs:
    """Network-ready arrays for a batch of B states."""

    traj: np.ndarray     # (B, 6, T_h, TRAJ_FEATURES)
    routes: np.ndarray   # (B, 6, N_r, N_p-1, ROUTE_FEATURES)
    raster: np.ndarray   # (B, 1, 64, 64)
    valid: np.ndarray    # (B, 6) bool
    current: np.ndarray  # (B, 6, 3) current ego-frame pose of each slot

    @property
    def batch(self) -> int:
        return self.traj.shape[0]

    def repeat(self, n: int) -> "SceneInputs":
        return SceneInputs(*(np.repeat(a, n, axis=0) for a in
                             (self.traj, self.routes, self.raster, self.valid, self.current)))


@dataclass
class PredictedTrajectories:
    ego: np.ndarray          # (T_f, 3)
    surrounding: np.ndarray  # (N_s, T_f, 3)
    valid: np.ndarray        # (N_s,) bool

    @property
    def all(self) -> np.ndarray:
        return np.concatenate([self.ego[None], self.surrounding], axis=0)


def _pose_features(p: np.ndarray) -> np.ndarray:
    """(..., 4) x, y, heading, speed -> scaled x, y, cos, sin, speed."""
    return np.stack([p[..., 0] / POS_SCALE, p[..., 1] / POS_SCALE, np.cos(p[..., 2]), np.sin(p[..., 2]),
                     p[..., 3] / SPEED_SCALE], axis=-1)


def _xyh_features(p: np.ndarray) -> np.ndarray:
    return np.stack([p[..., 0] / POS_SCALE, p[..., 1] / POS_SCALE, np.cos(p[..., 2]), np.sin(p[..., 2])], axis=-1)


def featurize_one(state: VectorState) -> tuple[np.ndarray, ...]:
    hist = np.asarray(state.history, float)
    prev = np.concatenate([hist[:, :1], hist[:, :-1]], axis=1)
    slot = np.broadcast_to((np.arange(N_SLOTS) / N_SLOTS)[:, None, None], hist.shape[:2] + (1,))
    traj = np.concatenate([_pose_features(prev), _pose_features(hist), slot], axis=-1)
    routes = np.asarray(state.routes, float)
    n_slots, n_r, n_p, _ = routes.shape
    rid = np.broadcast_to((np.arange(n_r) / n_r)[None, :, None, None], (n_slots, n_r, n_p - 1, 1))
    real = (np.arange(n_p - 1)[None, None, :] + 1 < np.asarray(state.route_real)[:, :, None]).astype(float)[..., None]
    rfeat = np.concatenate([_xyh_features(routes[:, :, :-1]), _xyh_features(routes[:, :, 1:]), rid, real], axis=-1)
    valid = np.asarray(state.valid, bool)
    traj[~valid] = 0.0
    rfeat[~valid] = 0.0
    raster = np.asarray(state.drivable, float)[None]
    current = hist[:, -1, :3].copy()
    current[~valid] = 0.0
    return traj, rfeat, raster, valid, current


def featurize(states: Sequence[VectorState]) -> SceneInputs:
    if not states:
        raise EmptyBatchError("cannot featurize an empty batch")
    parts = [featurize_one(s) for s in states]
    return SceneInputs(*(np.stack(p) for p in zip(*parts)))


def goal_features(subgoals: np.ndarray) -> np.ndarray:
    """(..., 3) ego-frame subgoal poses -> (..., GOAL_FEATURES)."""
    return _xyh_features(np.asarray(subgoals, float))


class SceneEncoder:
    """Per-vehicle scene features: history, interaction, route attention, drivable."""

    def __init__(self, store: dc.ParamStore, prefix: str, dim: int, heads: int, rng: np.random.Generator,
                 conv_channels: tuple[int, int, int] = (8, 16, 16)):
        self.dim = dim
        self.hist_embed = nn.MLP(store, f"{prefix}hist_embed", [TRAJ_FEATURES, dim, dim], rng)
        self.hist_att = nn.MultiHeadAttention(store, f"{prefix}hist_att", dim, heads, rng)
        self.inter_att = nn.MultiHeadAttention(store, f"{prefix}inter_att", dim, heads, rng)
        self.route_embed = nn.MLP(store, f"{prefix}route_embed", [ROUTE_FEATURES, dim, dim], rng)
        self.route_att = nn.MultiHeadAttention(store, f"{prefix}route_att", dim, heads, rng)
        c1, c2, c3 = conv_channels
        self.convs = [
            nn.Conv2d(store, f"{prefix}conv1", 1, c1, 3, rng, stride=2, padding=1),
            nn.Conv2d(store, f"{prefix}conv2", c1, c2, 3, rng, stride=2, padding=1),
            nn.Conv2d(store, f"{prefix}conv3", c2, c3, 3, rng, stride=2, padding=1),
        ]
        self.c3 = c3
        self.conv_out = nn.Linear(store, f"{prefix}conv_out", c3 * 4 * 4, dim, rng)

    def __call__(self, x: SceneInputs) -> dict[str, dc.Tensor]:
        b = x.batch
        # history: self-attention over the T_h vectors of each vehicle, then max-pool
        h = self.hist_embed(dc.Tensor(x.traj))                       # (B, 6, T_h, L)
        h = self.hist_att(h)
        f_h = ops.max(h, axis=2)                                     # (B, 6, L)
        # interaction graph over the ego and surrounding nodes; invalid nodes masked as keys
        f_i = self.inter_att(f_h, key_mask=x.valid)
        # routes: per-vector embedding, max-pool per route, cross-attention with the interaction query
        r = self.route_embed(dc.Tensor(x.routes))                    # (B, 6, N_r, N_p-1, L)
        r = ops.max(r, axis=3)                                       # (B, 6, N_r, L)
        q = ops.reshape(f_i, (b, N_SLOTS, 1, self.dim))
        f_r = ops.reshape(self.route_att(q, r), (b, N_SLOTS, self.dim))
        # drivable area
        d = dc.Tensor(x.raster)
        for conv in self.convs:
            d = ops.relu(conv(d))
        d = ops.maxpool2d(d, 2)                                      # (B, c3, 4, 4)
        f_d = ops.relu(self.conv_out(ops.reshape(d, (b, 1, self.c3 * 16))))  # (B, 1, L)
        f_d = ops.broadcast_to(f_d, (b, N_SLOTS, self.dim))
        return {"history": f_h, "interaction": f_i, "route": f_r, "drivable": f_d}


class Predictor:
    def __init__(self, config: PredictorConfig | None = None, store: dc.ParamStore | None = None):
        self.config = config or PredictorConfig()
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        self.store = store or dc.ParamStore()
        self.encoder = SceneEncoder(self.store, "", cfg.dim, cfg.heads, rng, cfg.conv_channels)
        self.goal_mlp = nn.MLP(self.store, "goal_mlp", [GOAL_FEATURES, cfg.dim, cfg.dim], rng, final_relu=True)
        self.decoder = nn.MLP(self.store, "decoder", [5 * cfg.dim, cfg.dim, cfg.horizon * 3], rng)

    # forward

    def encode(self, x: SceneInputs) -> dict[str, dc.Tensor]:
        return self.encoder(x)

    def goal_embedding(self, goals: np.ndarray, batch: int) -> dc.Tensor:
        """(B, 1, L) subgoal embedding; a zero vector when goal conditioning is off."""
        if not self.config.goal_conditioning:
            return dc.Tensor(np.zeros((batch, 1, self.config.dim)))
        g = np.asarray(goals, float).reshape(batch, 1, 3)
        return self.goal_mlp(dc.Tensor(goal_features(g)))

    def decode(self, feats: dict[str, dc.Tensor], x: SceneInputs, goals: np.ndarray) -> dc.Tensor:
        """(B, 6, T_f, 3) absolute ego-frame poses; invalid slots are zero."""
        b = x.batch
        cfg = self.config
        f_g = ops.broadcast_to(self.goal_embedding(goals, b), (b, N_SLOTS, cfg.dim))
        z = ops.concat([feats["history"], feats["interaction"], feats["route"], feats["drivable"], f_g], axis=-1)
        out = ops.reshape(self.decoder(z), (b, N_SLOTS, cfg.horizon, 3))
        # residual on the current pose; the loss is on absolute poses
        scale = np.array([POS_SCALE, POS_SCALE, 1.0])
        out = ops.add(ops.mul(out, scale), x.current[:, :, None, :])
        return ops.mul(out, x.valid[:, :, None, None].astype(float))

    def forward(self, x: SceneInputs, goals: np.ndarray) -> dc.Tensor:
        return self.decode(self.encode(x), x, goals)

    def predict(self, state: VectorState, subgoal) -> PredictedTrajectories:
        with dc.no_grad():
            out = self.forward(featurize([state]), np.asarray(subgoal, float)[None, :3]).data[0]
        return _to_prediction(out, state.valid)

    def predict_many(self, state: VectorState, subgoals: np.ndarray) -> list[PredictedTrajectories]:
        """One prediction per subgoal; the scene is encoded once and reused."""
        goals = np.asarray(subgoals, float)[:, :3]
        x = featurize([state])
        with dc.no_grad():
            feats = self.encode(x)
            n = len(goals)
            rep = {k: ops.broadcast_to(v, (n,) + v.shape[1:]) for k, v in feats.items()}
            out = self.decode(rep, x.repeat(n), goals).data
        return [_to_prediction(o, state.valid) for o in out]

    # training

    def loss(self, x: SceneInputs, goals: np.ndarray, truth: np.ndarray, truth_valid: np.ndarray) -> dc.Tensor:
        pred = self.forward(x, goals)
        return masked_smooth_l1(pred, truth, truth_valid)

    def train_step(self, x: SceneInputs, goals: np.ndarray, truth: np.ndarray, truth_valid: np.ndarray) -> float:
        if x.batch == 0:
            raise EmptyBatchError("train_step needs at least one sample")
        loss = self.loss(x, goals, truth, truth_valid)
        dc.backward(loss)
        self.store.adam_step(self.config.lr)
        return float(loss.data)


def masked_smooth_l1(pred: dc.Tensor, truth: np.ndarray, truth_valid: np.ndarray) -> dc.Tensor:
    """Mean smooth-L1 over valid (sample, vehicle) pairs and their T_f x 3 entries."""
    truth_valid = np.asarray(truth_valid, bool)
    n = int(truth_valid.sum())
    if n == 0:
        raise EmptyBatchError("no valid vehicle futures in the batch")
    w = truth_valid[:, :, None, None].astype(float)
    target = np.where(truth_valid[:, :, None, None], truth, 0.0)
    per = ops.smooth_l1(ops.mul(pred, w), dc.Tensor(target))
    return ops.mul(ops.sum(per), 1.0 / (n * pred.shape[2] * pred.shape[3]))


def _to_prediction(out: np.ndarray, valid: np.ndarray) -> PredictedTrajectories:
    valid = np.asarray(valid, bool)
    return PredictedTrajectories(out[0].copy(), out[1:].copy(), valid[1:].copy())


def cv_predict(state: VectorState, horizon: int = HORIZON) -> PredictedTrajectories:
    """Constant-velocity extrapolation of every slot along its current heading."""
    cur = np.asarray(state.history, float)[:, -1]
    k = np.arange(1, horizon + 1)[None, :] * DT
    x = cur[:, 0:1] + cur[:, 3:4] * np.cos(cur[:, 2:3]) * k
    y = cur[:, 1:2] + cur[:, 3:4] * np.sin(cur[:, 2:3]) * k
    h = np.broadcast_to(cur[:, 2:3], x.shape)
    out = np.stack([x, y, h], axis=-1)
    out[~np.asarray(state.valid, bool)] = 0.0
    return _to_prediction(out, state.valid)


def ade_fde(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    pred = np.asarray(pred, float)
    truth = np.asarray(truth, float)
    if pred.shape[-2] != truth.shape[-2]:
        raise ValueError(f"horizons differ: {pred.shape[-2]} vs {truth.shape[-2]}")
    d = np.hypot(pred[..., 0] - truth[..., 0], pred[..., 1] - truth[..., 1])
    return float(d.mean()), float(d[..., -1].mean())


def future_targets(tracks: dict[int, dict[int, np.ndarray]], ids: np.ndarray, valid: np.ndarray, t: int,
                   ego_world: np.ndarray, current: np.ndarray, horizon: int = HORIZON):
    """Ground-truth futures t+1..t+T_f in the ego frame at time t.

    Returns (truth (6, T_f, 3), truth_valid (6,)). A slot is valid only when the
    vehicle was encoded and has all T_f future poses. Headings are unwrapped to
    lie within pi of the slot's current heading so the loss sees no 2 pi jumps.
    """
    truth = np.zeros((len(ids), horizon, 3))
    ok = np.zeros(len(ids), dtype=bool)
    for slot, (vid, v) in enumerate(zip(ids, valid)):
        if not v:
            continue
        tr = tracks.get(int(vid), {})
        steps = [tr.get(t + k) for k in range(1, horizon + 1)]
        if any(p is None for p in steps):
            continue
        arr = to_ego_frame_array(ego_world[0], ego_world[1], ego_world[2], np.array(steps)[:, :3])
        arr[:, 2] = current[slot, 2] + normalize_angles(arr[:, 2] - current[slot, 2])
        truth[slot] = arr
        ok[slot] = True
    return truth, ok


def jacobian_norm_wrt_goal(predictor: Predictor, state: VectorState, subgoal, h: float = 1e-4) -> np.ndarray:
    """Finite-difference Jacobian norm of each slot's prediction w.r.t. the subgoal."""
    base = np.asarray(subgoal, float)[:3]
    norms = np.zeros(N_SLOTS)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        p = predictor.predict(state, base + e).all
        m = predictor.predict(state, base - e).all
        norms += (((p - m) / (2 * h)) ** 2).sum(axis=(1, 2))
    return np.sqrt(norms)

