"""Trajectory accuracy metrics over planar pose sequences."""

from typing import Sequence

import numpy as np

from app.core.exceptions import EmptyInputError, ShapeError
from app.utils.se2 import compose, inverse, relative


def _pose_stack(poses) -> np.ndarray:
    if len(poses) and hasattr(poses[0], "as_array"):
        return np.stack([p.as_array() for p in poses])
    return np.asarray(poses, dtype=np.float64).reshape(-1, 3)


def ate(est: Sequence, gt: Sequence) -> float:
    """Positional RMSE over aligned timestamps, without any global alignment."""
    est, gt = _pose_stack(est), _pose_stack(gt)
    if len(est) != len(gt):
        raise ShapeError(f"trajectories differ in length: {len(est)} vs {len(gt)}")
    if len(est) == 0:
        raise EmptyInputError("ATE of empty trajectories")
    err = est[:, :2] - gt[:, :2]
    return float(np.sqrt(np.mean(np.sum(err**2, axis=1))))


def rpe(est: Sequence, gt: Sequence) -> float:
    """Translational RMSE of the one-step relative motion error (gt step)⁻¹ ∘ (est step)."""
    est, gt = _pose_stack(est), _pose_stack(gt)
    if len(est) != len(gt):
        raise ShapeError(f"trajectories differ in length: {len(est)} vs {len(gt)}")
    if len(est) < 2:
        raise EmptyInputError("RPE needs at least two poses")
    est_steps = relative(est[:-1], est[1:])
    gt_steps = relative(gt[:-1], gt[1:])
    err = compose(inverse(gt_steps), est_steps)
    return float(np.sqrt(np.mean(np.sum(err[:, :2] ** 2, axis=1))))


def spl_term(success: bool, shortest: float, path: float) -> float:
    """success · l / max(p, l); a start already at the goal scores its success."""
    if not success:
        return 0.0
    if shortest == 0.0:
        return 1.0
    return shortest / max(path, shortest)
