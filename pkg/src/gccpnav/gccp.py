"""Collision risk mask over the candidate subgoals."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .encoding import N_SUBGOALS, SubgoalSet, VectorState
from .geometry import DEFAULT_LENGTH, DEFAULT_WIDTH, sat_overlap_many
from .predictor import PredictedTrajectories, Predictor, cv_predict

log = logging.getLogger(__name__)

UNSAFE = -1e8
MODES = ("learned", "cv", "disabled")


@dataclass
class RiskMask:
    entries: np.ndarray                 # (12,) values in {UNSAFE, 0}
    raw: np.ndarray                     # mask before the all-unsafe fallback
    fallback: bool = False
    predictions: list = field(default_factory=list)  # per-subgoal PredictedTrajectories when computed

    @property
    def unsafe(self) -> np.ndarray:
        return self.entries == UNSAFE


def prediction_collides(pred: PredictedTrajectories, dims=(DEFAULT_LENGTH, DEFAULT_WIDTH)) -> bool:
    """True iff the ego box overlaps any valid surrounding box at a shared step."""
    others = pred.surrounding[pred.valid]
    if len(others) == 0:
        return False
    t = pred.ego.shape[0]
    ego = np.concatenate([pred.ego, np.broadcast_to(dims, (t, 2))], axis=-1)
    oth = np.concatenate([others, np.broadcast_to(dims, others.shape[:2] + (2,))], axis=-1)
    return bool(sat_overlap_many(np.broadcast_to(ego, oth.shape), oth).any())


def compute_mask(state: VectorState, subgoals: SubgoalSet | np.ndarray, predictor: Predictor | None,
                 mode: str = "learned") -> RiskMask:
    """Risk mask: UNSAFE where the predicted ego future collides with a neighbour.

    If every subgoal is unsafe the mask falls back to zeros so the decision
    distribution stays defined; the event is logged and flagged.
    """
    if mode not in MODES:
        raise ValueError(f"unknown gccp mode {mode!r}; expected one of {MODES}")
    goals = subgoals.goals if isinstance(subgoals, SubgoalSet) else np.asarray(subgoals, float)
    if len(goals) != N_SUBGOALS:
        raise ValueError(f"expected {N_SUBGOALS} subgoals, got {len(goals)}")
    raw = np.zeros(N_SUBGOALS)
    preds: list = []
    if mode != "disabled":
        if predictor is None:
            raise ValueError(f"mode {mode!r} needs a predictor")
        preds = predictor.predict_many(state, goals)
        if mode == "cv":
            cv = cv_predict(state, predictor.config.horizon)
            preds = [PredictedTrajectories(p.ego, cv.surrounding, cv.valid) for p in preds]
        for i, p in enumerate(preds):
            if prediction_collides(p):
                raw[i] = UNSAFE
    entries = raw.copy()
    fallback = bool(np.all(raw == UNSAFE))
    if fallback:
        log.info("all %d subgoals predicted unsafe; using an all-zero mask", N_SUBGOALS)
        entries[:] = 0.0
    return RiskMask(entries, raw, fallback, preds)


def debug_records(mask: RiskMask, subgoals: np.ndarray, extra: dict | None = None):
    """One JSON-serialisable record per subgoal: goal, mask value, predicted trajectories."""
    for i, g in enumerate(np.asarray(subgoals, float)):
        rec = {"subgoal_index": i, "subgoal": [float(v) for v in g[:3]], "mask": float(mask.entries[i]),
               "raw_mask": float(mask.raw[i])}
        if mask.predictions:
            p = mask.predictions[i]
            rec["ego_pred"] = np.round(p.ego, 6).tolist()
            rec["surrounding_pred"] = [np.round(s, 6).tolist() for s, v in zip(p.surrounding, p.valid) if v]
        if extra:
            rec.update(extra)
        yield rec


def write_debug(fh, mask: RiskMask, subgoals: np.ndarray, extra: dict | None = None) -> int:
    n = 0
    for rec in debug_records(mask, subgoals, extra):
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
        n += 1
    return n
