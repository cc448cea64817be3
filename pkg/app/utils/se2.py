"""Planar rigid-motion algebra on (x, y, theta) triples.

Poses and motions share one representation: an element of SE(2) written as a
translation followed by a heading. Every function accepts a single triple of
shape (3,) or a stack of shape (..., 3) and broadcasts over the leading axes.
"""

import numpy as np


def wrap_angle(theta):
    """Wrap angles into (-pi, pi]."""
    theta = np.asarray(theta, dtype=np.float64)
    wrapped = np.pi - np.mod(np.pi - theta, 2.0 * np.pi)
    # np.mod may round up to exactly 2*pi for inputs a hair above pi
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)
    # in-range angles pass through untouched so wrapping is idempotent
    wrapped = np.where((theta > -np.pi) & (theta <= np.pi), theta, wrapped)
    if wrapped.ndim == 0:
        return float(wrapped)
    return wrapped


def rotation(theta) -> np.ndarray:
    """2x2 rotation matrices for one or many headings."""
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def compose(pose, delta) -> np.ndarray:
    """pose ∘ delta: translate by delta's (x, y) in pose's body frame, then turn."""
    pose = np.asarray(pose, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    c, s = np.cos(pose[..., 2]), np.sin(pose[..., 2])
    x = pose[..., 0] + c * delta[..., 0] - s * delta[..., 1]
    y = pose[..., 1] + s * delta[..., 0] + c * delta[..., 1]
    theta = wrap_angle(pose[..., 2] + delta[..., 2])
    return np.stack(np.broadcast_arrays(x, y, theta), axis=-1)


def inverse(pose) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    c, s = np.cos(pose[..., 2]), np.sin(pose[..., 2])
    x = -(c * pose[..., 0] + s * pose[..., 1])
    y = -(-s * pose[..., 0] + c * pose[..., 1])
    return np.stack([x, y, wrap_angle(-pose[..., 2])], axis=-1)


def relative(pose_a, pose_b) -> np.ndarray:
    """pose_a⁻¹ ∘ pose_b, i.e. pose_b expressed in the frame of pose_a."""
    pose_a = np.asarray(pose_a, dtype=np.float64)
    pose_b = np.asarray(pose_b, dtype=np.float64)
    c, s = np.cos(pose_a[..., 2]), np.sin(pose_a[..., 2])
    dx = pose_b[..., 0] - pose_a[..., 0]
    dy = pose_b[..., 1] - pose_a[..., 1]
    x = c * dx + s * dy
    y = -s * dx + c * dy
    theta = wrap_angle(pose_b[..., 2] - pose_a[..., 2])
    return np.stack(np.broadcast_arrays(x, y, theta), axis=-1)


def fold(start, deltas) -> np.ndarray:
    """Chain deltas (N, 3) from start; returns the N + 1 visited poses."""
    poses = [np.asarray(start, dtype=np.float64)]
    for delta in np.asarray(deltas, dtype=np.float64):
        poses.append(compose(poses[-1], delta))
    return np.stack(poses)


def body_frame(pose, points) -> np.ndarray:
    """World points (..., n, 2) expressed in the body frame of pose (..., 3)."""
    pose = np.asarray(pose, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    offset = points - pose[..., None, :2]
    c = np.cos(pose[..., 2])[..., None]
    s = np.sin(pose[..., 2])[..., None]
    return np.stack(
        [c * offset[..., 0] + s * offset[..., 1], -s * offset[..., 0] + c * offset[..., 1]],
        axis=-1,
    )
