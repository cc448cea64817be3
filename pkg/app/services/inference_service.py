from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import OutOfBoundsError
from app.core.logger import logger
from app.models.world_model import NavWorldModel
from app.schema.api_schema import RolloutResponse, RolloutStep, TokenGridIn
from app.schema.encoder_schema import ContextWindow, TokenGrid
from app.schema.model_schema import CheckpointMeta
from app.schema.planner_schema import CemConfig, PlanResult
from app.schema.world_schema import ActionDelta, Pose, World
from app.services.encoder_service import context_from_tokens, dino_distance, encode, encode_episode
from app.services.flow_service import FlowDynamics, rollout
from app.services.planner_service import cem_plan, goal_tokens
from app.services.world_service import episode_from_actions, generate_world, in_bounds, render_observation
from app.utils.seeding import derive_seed


class InferenceService:
    """Read-only rollouts, planning and scoring over one loaded checkpoint."""

    def __init__(self, model: NavWorldModel, meta: CheckpointMeta):
        self.model = model
        self.meta = meta

    def world(self, seed: Optional[int] = None) -> World:
        return generate_world(self.meta.world_seed if seed is None else seed, self.meta.world_config)

    def start_context(self, world: World, start: Pose) -> ContextWindow:
        """The first frame repeated to fill the model's context."""
        spec = self.meta.encoder
        first = encode(render_observation(world, start), spec).tokens
        return context_from_tokens(np.stack([first] * self.meta.model.m), spec.grid_h, spec.grid_w)

    def rollout(
        self,
        start: Pose,
        actions: Sequence[ActionDelta],
        world_seed: Optional[int] = None,
        noise_seed: int = 0,
        euler_steps: int = 50,
    ) -> RolloutResponse:
        """
        Predict the plan's frames and compare each with the rendered ground truth.

        Raises:
            OutOfBoundsError: the executed plan leaves the world.
        """
        world = self.world(world_seed)
        episode = episode_from_actions(world, start, actions, self.meta.action_scale)
        truth = encode_episode(episode, self.meta.encoder)
        seeds = [derive_seed(noise_seed, "rollout", 0, j) for j in range(len(actions))]
        ctx = self.start_context(world, start)
        predicted = rollout(FlowDynamics(self.model, euler_steps), ctx, list(actions), seeds, euler_steps)
        steps: List[RolloutStep] = []
        for j, z in enumerate(predicted):
            distance = dino_distance(z, TokenGrid.like(truth[j + 1], z))
            steps.append(RolloutStep(step=j + 1, pose=episode.poses[j + 1], dino_distance=distance))
        return RolloutResponse(steps=steps, mean_dino_distance=float(np.mean([s.dino_distance for s in steps])))

    def plan(
        self, start: Pose, goal: Tuple[float, float], world_seed: Optional[int] = None, **cem_overrides
    ) -> PlanResult:
        world = self.world(world_seed)
        goal_xy = np.asarray(goal, dtype=np.float64)
        if not in_bounds(world, goal_xy):
            raise OutOfBoundsError(f"goal {tuple(goal_xy)} outside {world.bounds}")
        overrides = {key: value for key, value in cem_overrides.items() if value is not None}
        cfg = CemConfig.model_validate({**CemConfig().model_dump(), **overrides})
        dynamics = FlowDynamics(self.model, cfg.euler_steps).anchored(start)
        ctx = self.start_context(world, start)
        result = cem_plan(dynamics, ctx, goal_tokens(world, self.meta.encoder, start, goal_xy), cfg)
        logger.info(f"planned {len(result.best_actions)} steps toward {tuple(goal_xy)}, score {result.best_score:.4f}")
        return result


def score_grids(a: TokenGridIn, b: TokenGridIn) -> float:
    """DINO distance between two posted token grids."""
    return dino_distance(
        TokenGrid(tokens=a.tokens, grid_h=a.grid_h, grid_w=a.grid_w),
        TokenGrid(tokens=b.tokens, grid_h=b.grid_h, grid_w=b.grid_w),
    )
