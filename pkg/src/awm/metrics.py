"""Trajectory metrics: ADE, minADE over sampled rollouts, overlap and offroad flags."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class TrajectoryEval:
    ade: float
    overlap: bool
    offroad: bool
    index: int = 0


def _xy(seq):
    seq = np.asarray(seq, dtype=np.float64)
    return seq[..., :2]


def ade(realized, expert) -> float:
    """Mean over timesteps of the planar distance between two state sequences."""
    r, e = _xy(realized), _xy(expert)
    if r.shape != e.shape:
        raise MetricError(f"sequence shapes differ: {r.shape} vs {e.shape}")
    return float(np.mean(np.hypot(r[..., 0] - e[..., 0], r[..., 1] - e[..., 1])))


def ade_batch(realized, expert) -> np.ndarray:
    """Per-row ADE for ``(B, T, >=2)`` arrays."""
    r, e = _xy(realized), _xy(expert)
    if r.shape != e.shape:
        raise MetricError(f"sequence shapes differ: {r.shape} vs {e.shape}")
    return np.mean(np.hypot(r[..., 0] - e[..., 0], r[..., 1] - e[..., 1]), axis=-1)


def min_ade(rollouts, expert):
    """Smallest ADE among ``rollouts`` and the index achieving it (lowest index on ties)."""
    if len(rollouts) == 0:
        raise MetricError("min_ade needs at least one rollout")
    errs = [ade(r, expert) for r in rollouts]
    i = int(np.argmin(errs))
    return errs[i], i


def overlap_flag(realized, others_pos, radii, ego_radius=1.0, valid=None) -> bool:
    """True if the ego disc intersects any replayed agent disc at any step.

    ``others_pos`` is ``(T, A, 2)``; ``radii`` is ``(A,)``.
    """
    r = _xy(realized)
    op = np.asarray(others_pos, dtype=np.float64)
    if op.size == 0:
        return False
    d = np.hypot(op[..., 0] - r[:, None, 0], op[..., 1] - r[:, None, 1])
    hit = d < ego_radius + np.asarray(radii)[None, :]
    if valid is not None:
        hit = hit & np.asarray(valid, dtype=bool)[None, :]
    return bool(np.any(hit))


def offroad_flag(realized, roadgraph) -> bool:
    """True if any position lies farther than the half width from every centerline."""
    return bool(np.any(roadgraph.distance(_xy(realized)) > roadgraph.half_width))


def evaluate_trajectory(realized, scenario) -> TrajectoryEval:
    others = np.stack([a.positions for a in scenario.others], axis=1) if scenario.others else np.zeros((0, 0, 2))
    radii = np.array([a.radius for a in scenario.others])
    return TrajectoryEval(
        ade(realized, scenario.expert.states),
        overlap_flag(realized, others, radii, scenario.ego_radius),
        offroad_flag(realized, scenario.roadgraph),
    )


def evaluate_rollouts(rollouts, scenario) -> TrajectoryEval:
    """minADE evaluation: overlap/offroad are reported for the lowest-ADE rollout."""
    best, i = min_ade(rollouts, scenario.expert.states)
    ev = evaluate_trajectory(rollouts[i], scenario)
    return TrajectoryEval(best, ev.overlap, ev.offroad, i)


def rates(evals) -> dict:
    """Dataset aggregates: mean ADE and the fraction of flagged scenarios."""
    if not evals:
        return {"ade": float("nan"), "overlap": float("nan"), "offroad": float("nan")}
    return {
        "ade": float(np.mean([e.ade for e in evals])),
        "overlap": float(np.mean([e.overlap for e in evals])),
        "offroad": float(np.mean([e.offroad for e in evals])),
    }
