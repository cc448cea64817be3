"""Simulator-backed token dynamics: encode(render(apply_action(...))) in place of the network."""

from typing import Protocol, Sequence

import numpy as np

from app.schema.encoder_schema import EncoderSpec
from app.schema.world_schema import Pose, World
from app.services.encoder_service import encode_batch
from app.services.world_service import in_bounds, render_batch
from app.utils.se2 import compose


class Dynamics(Protocol):
    """Anything that can roll candidate action plans out into token grids."""

    def anchored(self, pose: Pose) -> "Dynamics": ...

    def rollout_batch(
        self, ctx: np.ndarray, actions: np.ndarray, ks: np.ndarray, noise_seeds: Sequence[int]
    ) -> np.ndarray: ...


class OracleDynamics:
    """
    Exact dynamics of a known world, rolled out from an anchor pose.

    Plans arrive in normalized action units and are rescaled by
    ``action_scale`` before execution; each plan entry is applied as one
    rigid motion, so composed k-step actions need no special handling.
    Frames whose pose left the world are returned as NaN tokens.
    """

    def __init__(self, world: World, spec: EncoderSpec, anchor: Pose, action_scale: float = 1.0):
        self.world = world
        self.spec = spec
        self.anchor = anchor
        self.action_scale = action_scale

    def anchored(self, pose: Pose) -> "OracleDynamics":
        return OracleDynamics(self.world, self.spec, pose, self.action_scale)

    def poses(self, actions: np.ndarray) -> np.ndarray:
        """(B, H, 3) poses visited by each candidate plan."""
        actions = np.asarray(actions, dtype=np.float64)
        B, H = actions.shape[:2]
        current = np.broadcast_to(self.anchor.as_array(), (B, 3))
        visited = np.empty((B, H, 3))
        for j in range(H):
            delta = actions[:, j].copy()
            delta[:, :2] *= self.action_scale
            current = compose(current, delta)
            visited[:, j] = current
        return visited

    def rollout_batch(
        self, ctx: np.ndarray, actions: np.ndarray, ks: np.ndarray, noise_seeds: Sequence[int]
    ) -> np.ndarray:
        visited = self.poses(actions)
        B, H = visited.shape[:2]
        flat = visited.reshape(B * H, 3)
        tokens = encode_batch(render_batch(self.world, flat, check_bounds=False), self.spec)
        tokens[~in_bounds(self.world, flat[:, :2])] = np.nan
        return tokens.reshape(B, H, self.spec.L, self.spec.d)
