"""Synthetic planar navigation world: landmarks, rendering and scripted trajectories."""

from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import (
    ConfigError,
    DegenerateScaleError,
    EmptyInputError,
    GenerationError,
    OutOfBoundsError,
)
from app.core.logger import logger
from app.schema.world_schema import (
    ActionDelta,
    Episode,
    MotionConfig,
    Observation,
    Policy,
    Pose,
    RendererKind,
    World,
    WorldConfig,
)
from app.utils.se2 import body_frame, compose, wrap_angle
from app.utils.seeding import rng_for

# translation shrinks to zero over this many wall retries, leaving a turn in place
_RETRY_SHRINK_STEPS = 8


def _softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=axis, keepdims=True))
    return shifted / shifted.sum(axis=axis, keepdims=True)


def generate_world(seed: int, config: Optional[WorldConfig] = None) -> World:
    """
    Build a landmark world as a pure function of (seed, config).

    Args:
        seed: world seed.
        config: world geometry and renderer; defaults to ``WorldConfig()``.

    Returns:
        World with landmark positions inside the bounds, unit-variance landmark
        features and the frozen cell/landmark affinity and readout tables.

    Raises:
        ConfigError: fewer than 4 landmarks or degenerate bounds.
    """
    config = config or WorldConfig()
    if config.n_landmarks < 4:
        raise ConfigError(
            f"world needs at least 4 landmarks, got {config.n_landmarks}"
        )
    x_min, y_min, x_max, y_max = config.bounds
    if not (x_max > x_min and y_max > y_min):
        raise ConfigError(f"degenerate world bounds {config.bounds}")

    rng = rng_for(seed, "world")
    n = config.n_landmarks
    positions = rng.uniform((x_min, y_min), (x_max, y_max), size=(n, 2))
    features = rng.standard_normal((n, config.d_raw))
    logits = rng.standard_normal((config.n_cells, n)) / config.affinity_temperature
    readout = rng.standard_normal((config.d_raw, 2)) / (np.sqrt(2.0) * config.half_extent)

    return World(
        seed=seed,
        config=config,
        landmark_positions=positions,
        landmark_features=features,
        cell_weights=_softmax(logits, axis=1),
        readout=readout,
    )


def in_bounds(world: World, xy) -> bool | np.ndarray:
    xy = np.asarray(xy, dtype=np.float64)
    x_min, y_min, x_max, y_max = world.bounds
    inside = (
        (xy[..., 0] >= x_min)
        & (xy[..., 0] <= x_max)
        & (xy[..., 1] >= y_min)
        & (xy[..., 1] <= y_max)
    )
    if inside.ndim == 0:
        return bool(inside)
    return inside


def apply_action(p: Pose, a: ActionDelta) -> Pose:
    """Translate by (u_x, u_y) in the pre-action body frame, then turn by omega."""
    return Pose.from_array(compose(p.as_array(), a.as_array()))


def render_batch(world: World, poses: np.ndarray, check_bounds: bool = True) -> np.ndarray:
    """
    Render raw grids for a stack of poses.

    Each cell mixes the body-frame landmark coordinates with fixed affinities,
    reads them out linearly and adds the cell's mixed landmark features. The
    NONLINEAR renderer passes that field through a fixed sine.

    Args:
        world: the world to observe.
        poses: (N, 3) array of (x, y, theta).
        check_bounds: raise on poses outside the world.

    Returns:
        (N, H_p, W_p, d_raw) float64 array.
    """
    poses = np.atleast_2d(np.asarray(poses, dtype=np.float64))
    if check_bounds:
        outside = ~in_bounds(world, poses[:, :2])
        if np.any(outside):
            bad = poses[int(np.argmax(outside))]
            raise OutOfBoundsError(f"pose ({bad[0]:.3f}, {bad[1]:.3f}) outside {world.bounds}")

    cfg = world.config
    local = body_frame(poses, world.landmark_positions)  # (N, n, 2)
    mixed = np.einsum("ln,Nnc->Nlc", world.cell_weights, local)  # (N, L, 2)
    offsets = world.cell_weights @ world.landmark_features  # (L, d_raw)
    field = mixed @ world.readout.T + offsets[None]
    if cfg.renderer == RendererKind.NONLINEAR:
        field = np.sin(cfg.nonlinear_gain * field)
    return field.reshape(len(poses), cfg.grid_h, cfg.grid_w, cfg.d_raw)


def render_observation(w: World, p: Pose) -> Observation:
    return Observation(grid=render_batch(w, p.as_array()[None])[0])


def _inner_box(world: World, margin_frac: float = 0.25) -> Tuple[np.ndarray, np.ndarray]:
    x_min, y_min, x_max, y_max = world.bounds
    dx, dy = (x_max - x_min) * margin_frac, (y_max - y_min) * margin_frac
    return np.array([x_min + dx, y_min + dy]), np.array([x_max - dx, y_max - dy])


def _bearing_to(pose: np.ndarray, target: np.ndarray) -> float:
    heading = np.arctan2(target[1] - pose[1], target[0] - pose[0])
    return wrap_angle(heading - pose[2])


class _ScriptedPolicy:
    """Stateful action proposer for the scripted exploration policies."""

    def __init__(self, world: World, policy: Policy, motion: MotionConfig, rng: np.random.Generator):
        self.world = world
        self.policy = policy
        self.motion = motion
        self.rng = rng
        self.omega = 0.0
        self.waypoint: Optional[np.ndarray] = None
        x_min, y_min, x_max, y_max = world.bounds
        self.center = np.array([(x_min + x_max) / 2.0, (y_min + y_max) / 2.0])

    def propose(self, pose: np.ndarray) -> np.ndarray:
        m, rng = self.motion, self.rng
        u_x = rng.uniform(m.step_min, m.step_max)
        if self.policy == Policy.WAYPOINT:
            if self.waypoint is None or np.hypot(*(self.waypoint - pose[:2])) < m.waypoint_reach:
                low, high = _inner_box(self.world)
                self.waypoint = rng.uniform(low, high)
            turn = m.waypoint_gain * _bearing_to(pose, self.waypoint)
            omega = np.clip(turn, -m.waypoint_omega_max, m.waypoint_omega_max)
            return np.array([u_x, 0.0, omega])

        u_y = rng.normal(0.0, m.lateral_std)
        omega = m.omega_persistence * self.omega + rng.normal(0.0, m.omega_std)
        return np.array([u_x, u_y, np.clip(omega, -m.omega_max, m.omega_max)])

    def retreat(self, pose: np.ndarray, delta: np.ndarray, attempt: int) -> np.ndarray:
        """Shrink the step and turn toward the world center after a wall hit."""
        shrink = max(0.0, 1.0 - attempt / _RETRY_SHRINK_STEPS)
        limit = self.motion.waypoint_omega_max if self.policy == Policy.WAYPOINT else self.motion.omega_max
        turn = limit if _bearing_to(pose, self.center) >= 0 else -limit
        return np.array([delta[0] * shrink, delta[1] * shrink, turn])

    def commit(self, delta: np.ndarray) -> None:
        self.omega = float(delta[2])


def _sample_start(world: World, rng: np.random.Generator) -> Pose:
    low, high = _inner_box(world)
    xy = rng.uniform(low, high)
    return Pose(x=float(xy[0]), y=float(xy[1]), theta=float(rng.uniform(-np.pi, np.pi)))


def episode_from_actions(
    world: World, start: Pose, actions: Sequence[ActionDelta], action_scale: float = 1.0
) -> Episode:
    """Execute unit-step actions from start and render every visited pose."""
    poses = [start]
    for action in actions:
        poses.append(apply_action(poses[-1], action.scaled(action_scale)))
    grids = render_batch(world, np.stack([p.as_array() for p in poses]))
    return Episode(
        poses=poses,
        actions=list(actions),
        observations=[Observation(grid=g) for g in grids],
        world_seed=world.seed,
        action_scale=action_scale,
    )


def sample_trajectory(
    w: World,
    seed: int,
    length: int,
    policy: Policy | str = Policy.RANDOM_SMOOTH,
    motion: Optional[MotionConfig] = None,
    start: Optional[Pose] = None,
) -> Episode:
    """
    Roll out a scripted exploration policy for ``length`` poses.

    Proposals that would leave the world are retried with a shrinking step
    and a turn toward the center; after ``motion.max_retries`` failed
    retries the sampler gives up.

    Raises:
        ConfigError: length < 2.
        OutOfBoundsError: explicit start outside the world.
        GenerationError: no in-bounds step found within the retry budget.
    """
    if length < 2:
        raise ConfigError(f"trajectory length must be at least 2, got {length}")
    policy = Policy(policy)
    motion = motion or MotionConfig()
    rng = rng_for(w.seed, seed, "trajectory")
    if start is None:
        start = _sample_start(w, rng)
    elif not in_bounds(w, (start.x, start.y)):
        raise OutOfBoundsError(f"start ({start.x}, {start.y}) outside {w.bounds}")

    proposer = _ScriptedPolicy(w, policy, motion, rng)
    poses: List[Pose] = [start]
    actions: List[ActionDelta] = []
    for step in range(length - 1):
        pose = poses[-1].as_array()
        proposal = proposer.propose(pose)
        for attempt in range(motion.max_retries + 1):
            delta = proposal if attempt == 0 else proposer.retreat(pose, proposal, attempt)
            action = ActionDelta.from_array(delta)
            nxt = apply_action(poses[-1], action)
            if in_bounds(w, (nxt.x, nxt.y)):
                break
        else:
            raise GenerationError(
                f"no in-bounds step after {motion.max_retries} retries at step {step}"
            )
        proposer.commit(delta)
        actions.append(action)
        poses.append(nxt)

    grids = render_batch(w, np.stack([p.as_array() for p in poses]))
    logger.debug(f"Sampled {policy.value} trajectory of {length} poses (world {w.seed}, seed {seed})")
    return Episode(
        poses=poses,
        actions=actions,
        observations=[Observation(grid=g) for g in grids],
        world_seed=w.seed,
    )


def normalize_actions(episodes: List[Episode]) -> Tuple[List[Episode], float]:
    """
    Express every translation in units of the corpus' mean step length.

    Returns:
        The rescaled episodes (poses untouched, ``action_scale`` updated) and
        the scale, in the incoming action units.

    Raises:
        EmptyInputError: no episodes.
        DegenerateScaleError: no non-zero translation anywhere in the corpus.
    """
    if not episodes:
        raise EmptyInputError("cannot normalize an empty corpus")
    magnitudes = [a.translation for ep in episodes for a in ep.actions]
    if not magnitudes or max(magnitudes) == 0.0:
        raise DegenerateScaleError("corpus has no non-zero translation")
    scale = float(np.mean(magnitudes))

    normalized = []
    for ep in episodes:
        actions = [
            ActionDelta(u_x=a.u_x / scale, u_y=a.u_y / scale, omega=a.omega, k=a.k)
            for a in ep.actions
        ]
        normalized.append(ep.model_copy(update={"actions": actions, "action_scale": ep.action_scale * scale}))
    logger.info(f"Normalized {len(magnitudes)} actions with scale {scale:.6f}")
    return normalized, scale


def shortest_path_length(w: World, start: Pose, goal) -> float:
    """Straight-line distance; worlds are obstacle-free."""
    goal = np.asarray(goal, dtype=np.float64)
    if not in_bounds(w, (start.x, start.y)):
        raise OutOfBoundsError(f"start ({start.x}, {start.y}) outside {w.bounds}")
    if not in_bounds(w, goal):
        raise OutOfBoundsError(f"goal ({goal[0]}, {goal[1]}) outside {w.bounds}")
    return float(np.hypot(goal[0] - start.x, goal[1] - start.y))
