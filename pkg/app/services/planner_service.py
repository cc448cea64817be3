"""Cross-entropy planning in token space and navigation evaluation on the synthetic world."""

from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import ConfigError, EmptyInputError, GenerationError, PlanningError
from app.core.logger import logger
from app.models.world_model import NavWorldModel
from app.schema.encoder_schema import ContextWindow, EncoderSpec, TokenGrid
from app.schema.planner_schema import (
    CemConfig,
    EpisodeResult,
    IterationStats,
    NavConfig,
    NavReport,
    PlanResult,
    TrajectoryErrors,
)
from app.schema.world_schema import ActionDelta, Episode, Pose, World
from app.services.encoder_service import build_context, context_from_tokens, dino_distance_batch, encode
from app.services.flow_service import FlowDynamics
from app.services.world_service import apply_action, in_bounds, render_observation, shortest_path_length
from app.utils.metrics import ate, rpe, spl_term
from app.utils.se2 import fold
from app.utils.seeding import derive_seed, rng_for

Objective = Callable[[np.ndarray, List[int]], np.ndarray]


def score_batch(tokens: np.ndarray, goal: np.ndarray, mode: str = "final") -> np.ndarray:
    """
    Scores of (B, H, L, d) rollouts against a goal grid; lower is better.

    A rollout with any non-finite frame scores +inf.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        if mode == "final":
            scores = dino_distance_batch(tokens[:, -1], goal)
        elif mode == "min":
            scores = dino_distance_batch(tokens, goal).min(axis=1)
        else:
            raise ConfigError(f"unknown score mode {mode!r}")
    finite = np.all(np.isfinite(tokens.reshape(len(tokens), -1)), axis=1)
    return np.where(finite & np.isfinite(scores), scores, np.inf)


def score_trajectory(rollout: Sequence[TokenGrid], goal: TokenGrid, mode: str = "final") -> float:
    """DINO distance of the predicted rollout to the goal grid (last frame, or the best frame)."""
    if not rollout:
        raise EmptyInputError("cannot score an empty rollout")
    tokens = np.stack([z.tokens for z in rollout])[None]
    return float(score_batch(tokens, goal.tokens, mode)[0])


def _noise_seeds(seed: int, iteration: int, horizon: int) -> List[int]:
    return [derive_seed(seed, "cem-noise", iteration, j) for j in range(horizon)]


def cem_optimize(objective: Objective, cfg: CemConfig) -> PlanResult:
    """
    Cross-entropy search over (horizon_steps, 3) action sequences.

    Candidates are drawn from a diagonal Gaussian, clipped to the action
    bounds and scored by ``objective(candidates, noise_seeds)``; the
    distribution is refit on the elites each iteration. The best candidate
    ever scored is returned together with the noise seeds it was scored under.

    Raises:
        PlanningError: every candidate of an iteration scored non-finite.
    """
    rng = rng_for(cfg.seed, "cem")
    H = cfg.horizon_steps
    low, high = np.asarray(cfg.action_low), np.asarray(cfg.action_high)
    mean = np.tile(np.asarray(cfg.init_mean, dtype=np.float64), (H, 1))
    std = np.tile(np.asarray(cfg.init_std, dtype=np.float64), (H, 1))

    best_score, best_plan, best_seeds = np.inf, None, []
    stats = []
    for it in range(cfg.n_iters):
        candidates = np.clip(mean + std * rng.standard_normal((cfg.n_candidates, H, 3)), low, high)
        seeds = _noise_seeds(cfg.seed, it, H)
        scores = np.asarray(objective(candidates, seeds), dtype=np.float64)
        finite = np.isfinite(scores)
        if not finite.any():
            raise PlanningError(f"all {cfg.n_candidates} candidates scored non-finite at iteration {it}")
        scores = np.where(finite, scores, np.inf)
        order = np.argsort(scores, kind="stable")
        n_use = min(cfg.n_elites, int(finite.sum()))
        elites = candidates[order[:n_use]]

        if scores[order[0]] < best_score:
            best_score, best_plan, best_seeds = float(scores[order[0]]), candidates[order[0]].copy(), seeds
        mean = elites.mean(axis=0)
        std = elites.std(axis=0) * cfg.std_decay
        stats.append(
            IterationStats(
                iteration=it,
                best_score=best_score,
                iteration_best=float(scores[order[0]]),
                elite_mean=float(scores[order[:n_use]].mean()),
                n_finite=int(finite.sum()),
            )
        )
        logger.debug(f"cem iteration {it}: best {best_score:.5f}, {int(finite.sum())} finite candidates")

    return PlanResult(
        best_actions=[ActionDelta.from_array(a) for a in best_plan],
        best_score=best_score,
        best_noise_seeds=best_seeds,
        final_mean=[ActionDelta.from_array(a) for a in mean],
        iterations=stats,
    )


def _as_dynamics(dynamics, cfg: CemConfig):
    if isinstance(dynamics, NavWorldModel):
        return FlowDynamics(dynamics, cfg.euler_steps)
    return dynamics


def plan_objective(dynamics, ctx: ContextWindow, goal: TokenGrid, cfg: CemConfig) -> Objective:
    dynamics = _as_dynamics(dynamics, cfg)
    ctx_arr = ctx.stacked()
    ks = np.ones(cfg.horizon_steps)

    def objective(candidates: np.ndarray, seeds: List[int]) -> np.ndarray:
        tokens = dynamics.rollout_batch(ctx_arr, candidates, ks, seeds)
        return score_batch(tokens, goal.tokens, cfg.score_mode)

    return objective


def cem_plan(dynamics, ctx: ContextWindow, goal: TokenGrid, cfg: CemConfig) -> PlanResult:
    """Plan unit-step actions from ``ctx`` toward ``goal`` with a model or an oracle."""
    return cem_optimize(plan_objective(dynamics, ctx, goal, cfg), cfg)


def should_stop(actions: Sequence[ActionDelta], cfg: CemConfig) -> bool:
    if cfg.stop_rule == "first":
        return actions[0].translation < cfg.stop_fraction
    return max(a.translation for a in actions) < cfg.stop_fraction


def goal_tokens(world: World, spec: EncoderSpec, start: Pose, goal_xy) -> TokenGrid:
    """Goal image: rendered at the goal, facing along the start-to-goal bearing."""
    goal_xy = np.asarray(goal_xy, dtype=np.float64)
    heading = np.arctan2(goal_xy[1] - start.y, goal_xy[0] - start.x)
    return encode(render_observation(world, Pose(x=goal_xy[0], y=goal_xy[1], theta=heading)), spec)


def run_episode(
    world: World,
    dynamics,
    cem_cfg: CemConfig,
    goal_xy,
    goal: TokenGrid,
    start: Pose,
    spec: EncoderSpec,
    m: int,
    max_steps: int = 40,
    success_radius: float = 1.0,
    action_scale: float = 1.0,
) -> EpisodeResult:
    """
    Receding-horizon navigation: plan, execute the first action, re-observe.

    The context always holds the last m true observations (the first frame
    repeated while history is short). Steps that would leave the world are
    not executed.

    Raises:
        OutOfBoundsError: start or goal outside the world.
    """
    goal_xy = np.asarray(goal_xy, dtype=np.float64)
    shortest = shortest_path_length(world, start, goal_xy)
    dynamics = _as_dynamics(dynamics, cem_cfg)
    pose = start
    poses = [start]
    frames = [encode(render_observation(world, start), spec).tokens] * m
    path = 0.0
    stopped = False

    def distance(p: Pose) -> float:
        return float(np.hypot(goal_xy[0] - p.x, goal_xy[1] - p.y))

    for step in range(max_steps):
        if distance(pose) <= success_radius:
            break
        ctx = context_from_tokens(np.stack(frames[-m:]), spec.grid_h, spec.grid_w, last_index=step)
        step_cfg = cem_cfg.model_copy(update={"seed": derive_seed(cem_cfg.seed, "nav-step", step)})
        plan = cem_plan(dynamics.anchored(pose), ctx, goal, step_cfg)
        if should_stop(plan.best_actions, cem_cfg):
            stopped = True
            break
        nxt = apply_action(pose, plan.best_actions[0].scaled(action_scale))
        if in_bounds(world, (nxt.x, nxt.y)):
            path += float(np.hypot(nxt.x - pose.x, nxt.y - pose.y))
            pose = nxt
        poses.append(pose)
        frames.append(encode(render_observation(world, pose), spec).tokens)

    final = distance(pose)
    success = final <= success_radius
    reason = "reached" if success else ("stopped" if stopped else "max_steps")
    return EpisodeResult(
        success=success,
        path_length=path,
        shortest_length=shortest,
        final_distance=final,
        steps=len(poses) - 1,
        stop_reason=reason,
        poses=poses,
    )


def sr_spl(results: Sequence[EpisodeResult]) -> NavReport:
    """Success rate and success weighted by path length."""
    if not results:
        raise EmptyInputError("no episode results")
    sr = float(np.mean([r.success for r in results]))
    spl = float(np.mean([spl_term(r.success, r.shortest_length, r.path_length) for r in results]))
    return NavReport(sr=sr, spl=spl, episodes=list(results))


def sample_nav_task(world: World, rng: np.random.Generator, cfg: NavConfig) -> Tuple[Pose, np.ndarray]:
    """
    Start pose facing an in-bounds goal ``cfg.goal_distance`` away.

    Raises:
        GenerationError: no placement found within ``cfg.max_placement_tries``.
    """
    x_min, y_min, x_max, y_max = world.bounds
    low = np.array([x_min + cfg.margin, y_min + cfg.margin])
    high = np.array([x_max - cfg.margin, y_max - cfg.margin])
    for _ in range(cfg.max_placement_tries):
        start = rng.uniform(low, high)
        bearing = rng.uniform(-np.pi, np.pi)
        dist = rng.uniform(*cfg.goal_distance)
        goal = start + dist * np.array([np.cos(bearing), np.sin(bearing)])
        if np.all(goal >= low) and np.all(goal <= high):
            return Pose(x=start[0], y=start[1], theta=bearing), goal
    raise GenerationError(f"no start/goal pair {cfg.goal_distance} m apart after {cfg.max_placement_tries} tries")


def navigation_tasks(world: World, cfg: NavConfig, seed: int = 0) -> List[Tuple[Pose, np.ndarray]]:
    rng = rng_for(seed, "nav-tasks")
    return [sample_nav_task(world, rng, cfg) for _ in range(cfg.n_episodes)]


def evaluate_navigation(
    world: World,
    dynamics,
    cem_cfg: CemConfig,
    nav_cfg: NavConfig,
    spec: EncoderSpec,
    m: int,
    action_scale: float = 1.0,
    seed: int = 0,
    tasks: Optional[Sequence[Tuple[Pose, np.ndarray]]] = None,
) -> NavReport:
    """Closed-loop SR/SPL over ``nav_cfg.n_episodes`` seeded start/goal placements."""
    tasks = tasks if tasks is not None else navigation_tasks(world, nav_cfg, seed)
    results = []
    for episode, (start, goal_xy) in enumerate(tasks):
        result = run_episode(
            world,
            dynamics,
            cem_cfg.model_copy(update={"seed": derive_seed(cem_cfg.seed, "episode", episode)}),
            goal_xy,
            goal_tokens(world, spec, start, goal_xy),
            start,
            spec,
            m,
            max_steps=nav_cfg.max_steps,
            success_radius=nav_cfg.success_radius,
            action_scale=action_scale,
        )
        logger.info(
            f"episode {episode}: {result.stop_reason} after {result.steps} steps, "
            f"path {result.path_length:.2f} m / shortest {result.shortest_length:.2f} m"
        )
        results.append(result)
    report = sr_spl(results)
    logger.info(f"navigation over {len(results)} episodes: SR {report.sr:.3f}, SPL {report.spl:.3f}")
    return report


def random_policy_path(
    world: World, start: Pose, n_steps: int, cem_cfg: CemConfig, action_scale: float = 1.0, seed: int = 0
) -> List[Pose]:
    """Baseline walk with actions uniform inside the planner's bounds; blocked steps stay put."""
    rng = rng_for(seed, "random-policy")
    pose, poses = start, [start]
    for _ in range(n_steps):
        action = ActionDelta.from_array(rng.uniform(cem_cfg.action_low, cem_cfg.action_high))
        nxt = apply_action(pose, action.scaled(action_scale))
        if in_bounds(world, (nxt.x, nxt.y)):
            pose = nxt
        poses.append(pose)
    return poses


def straight_line_reference(poses: Sequence[Pose], goal_xy) -> List[Pose]:
    """Points on the start-to-goal segment at the same travelled distance as each executed pose."""
    goal_xy = np.asarray(goal_xy, dtype=np.float64)
    start = poses[0].as_array()
    offset = goal_xy - start[:2]
    length = float(np.hypot(*offset))
    direction = offset / length if length > 0 else np.zeros(2)
    travelled = np.concatenate([[0.0], np.cumsum([np.hypot(b.x - a.x, b.y - a.y) for a, b in zip(poses, poses[1:])])])
    heading = float(np.arctan2(offset[1], offset[0])) if length > 0 else start[2]
    return [Pose.from_array([*(start[:2] + min(s, length) * direction), heading]) for s in travelled]


def path_ate(poses: Sequence[Pose], goal_xy) -> float:
    """ATE of an executed path against the straight line to the goal."""
    return ate(poses, straight_line_reference(poses, goal_xy))


def evaluate_open_loop(
    dynamics,
    world: World,
    episodes: Sequence[Episode],
    spec: EncoderSpec,
    m: int,
    cem_cfg: CemConfig,
    horizon: Optional[int] = None,
) -> TrajectoryErrors:
    """
    Plan toward the frame ``horizon`` steps ahead of each held-out episode's
    first full context and compare the integrated plan with the true poses.
    """
    horizon = horizon or cem_cfg.horizon_steps
    dynamics = _as_dynamics(dynamics, cem_cfg)
    cfg = cem_cfg.model_copy(update={"horizon_steps": horizon})
    ates, rpes = [], []
    for n, episode in enumerate(episodes):
        i = m - 1
        if i + horizon >= len(episode):
            continue
        ctx = build_context(episode, i, m, spec)
        goal = encode(episode.observations[i + horizon], spec)
        anchor = episode.poses[i]
        step_cfg = cfg.model_copy(update={"seed": derive_seed(cfg.seed, "open-loop", n)})
        plan = cem_plan(dynamics.anchored(anchor), ctx, goal, step_cfg)
        deltas = np.stack([a.scaled(episode.action_scale).as_array() for a in plan.best_actions])
        est = fold(anchor.as_array(), deltas)
        gt = episode.pose_array()[i : i + horizon + 1]
        ates.append(ate(est, gt))
        rpes.append(rpe(est, gt))
    if not ates:
        raise EmptyInputError(f"no episode is longer than {m - 1 + horizon} steps")
    return TrajectoryErrors(ate=float(np.mean(ates)), rpe=float(np.mean(rpes)), n_episodes=len(ates))
