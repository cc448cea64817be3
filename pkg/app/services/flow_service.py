"""Flow-matching objective, Euler probability-flow sampler and sliding-window rollouts."""

import copy
import hashlib
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from app.core.exceptions import (
    ConfigError,
    DivergenceError,
    EmptyInputError,
    NumericError,
    OutOfBoundsError,
    RangeError,
    ShapeError,
)
from app.core.logger import logger
from app.models.world_model import NavWorldModel
from app.schema.encoder_schema import ContextWindow, EncoderSpec, TokenGrid
from app.schema.model_schema import ModelConfig
from app.schema.train_schema import FlowSample, TrainConfig, TrainLog
from app.schema.world_schema import ActionDelta, Episode
from app.services.encoder_service import encode_episode
from app.services.model_service import build_model, model_dtype, params_digest
from app.utils.se2 import relative
from app.utils.seeding import derive_seed


def _check_flow_time(t) -> None:
    values = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t, dtype=np.float64)
    if values.size and (np.any(~np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0):
        raise RangeError(f"flow time must lie in [0, 1], got {values.min()}..{values.max()}")


def interpolate(z0, z1, t):
    """z_t = (1 − t)·z0 + t·z1; t broadcasts against the token axes."""
    if tuple(z0.shape) != tuple(z1.shape):
        raise ShapeError(f"z0 {tuple(z0.shape)} and z1 {tuple(z1.shape)} differ")
    _check_flow_time(t)
    return (1 - t) * z0 + t * z1


def target_velocity(z0, z1):
    if tuple(z0.shape) != tuple(z1.shape):
        raise ShapeError(f"z0 {tuple(z0.shape)} and z1 {tuple(z1.shape)} differ")
    return z1 - z0


def make_flow_sample(z0: np.ndarray, z1: np.ndarray, t: float) -> FlowSample:
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    return FlowSample(z0=z0, z1=z1, t=t, z_t=interpolate(z0, z1, t), u=target_velocity(z0, z1))


@dataclass
class FlowBatch:
    """Model inputs and regression target for one optimisation step."""

    z_t: torch.Tensor  # (B, L, d)
    t: torch.Tensor  # (B,)
    ctx: torch.Tensor  # (B, m, L, d)
    action: torch.Tensor  # (B, 3)
    k: torch.Tensor  # (B,)
    u: torch.Tensor  # (B, L, d)

    def __len__(self) -> int:
        return self.z_t.shape[0]

    def select(self, idx) -> "FlowBatch":
        return FlowBatch(
            z_t=self.z_t[idx], t=self.t[idx], ctx=self.ctx[idx], action=self.action[idx], k=self.k[idx], u=self.u[idx]
        )


def make_flow_batch(
    ctx: torch.Tensor, z0: torch.Tensor, action: torch.Tensor, k: torch.Tensor, z1: torch.Tensor, t: torch.Tensor
) -> FlowBatch:
    z_t = interpolate(z0, z1, t[:, None, None])
    return FlowBatch(z_t=z_t, t=t, ctx=ctx, action=action, k=k, u=target_velocity(z0, z1))


class TransitionCorpus:
    """
    Encoded episodes addressed as (episode, i, k) transitions.

    A transition pairs the context ending at frame i with the target frame
    i + k and the composed action between them, in normalized action units.
    """

    def __init__(self, episodes: Sequence[Episode], spec: EncoderSpec, m: int):
        if m < 1:
            raise ConfigError(f"context length must be positive, got {m}")
        self.spec = spec
        self.m = m
        self.tokens = [encode_episode(ep, spec) for ep in episodes]
        self.poses = [ep.pose_array() for ep in episodes]
        self.scales = [ep.action_scale for ep in episodes]
        self.anchors = np.array(
            [(e, i) for e, tok in enumerate(self.tokens) for i in range(m - 1, len(tok) - 1)], dtype=np.int64
        ).reshape(-1, 2)
        if len(self.anchors) == 0:
            raise EmptyInputError(f"no episode is longer than the context length {m}")
        self._fixed: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.anchors) if self._fixed is None else len(self._fixed)

    def fixed(self, n: int) -> "TransitionCorpus":
        """View restricted to the first n single-step transitions."""
        if n > len(self.anchors):
            raise ConfigError(f"corpus has only {len(self.anchors)} transitions, {n} requested")
        view = copy.copy(self)
        view._fixed = np.column_stack([self.anchors[:n], np.ones(n, dtype=np.int64)])
        return view

    def sample_triples(self, rng: np.random.Generator, batch_size: int, k_max: int) -> np.ndarray:
        """(B, 3) rows of (episode, i, k) with k uniform on 1..k_max, clamped to the episode end."""
        if self._fixed is not None:
            if batch_size >= len(self._fixed):
                return self._fixed.copy()
            return self._fixed[np.sort(rng.choice(len(self._fixed), size=batch_size, replace=False))]
        rows = self.anchors[rng.integers(len(self.anchors), size=batch_size)]
        ks = rng.integers(1, k_max + 1, size=batch_size)
        lengths = np.array([len(self.tokens[e]) for e in rows[:, 0]])
        ks = np.minimum(ks, lengths - 1 - rows[:, 1])
        return np.column_stack([rows, ks])

    def action(self, e: int, i: int, k: int) -> np.ndarray:
        rel = relative(self.poses[e][i], self.poses[e][i + k])
        rel[:2] /= self.scales[e]
        return rel

    def context(self, e: int, i: int) -> np.ndarray:
        return self.tokens[e][i - self.m + 1 : i + 1]

    def arrays(self, triples: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        ctx = np.stack([self.context(e, i) for e, i, _ in triples])
        target = np.stack([self.tokens[e][i + k] for e, i, k in triples])
        actions = np.stack([self.action(e, i, k) for e, i, k in triples])
        return ctx, target, actions, triples[:, 2].astype(np.float64)

    def tensors(self, triples: np.ndarray, dtype=torch.float32) -> Tuple[torch.Tensor, ...]:
        return tuple(torch.as_tensor(arr, dtype=dtype) for arr in self.arrays(triples))


def fm_loss(model: NavWorldModel, batch: FlowBatch) -> torch.Tensor:
    """Mean squared error between v_θ(z_t, t | ctx, a, k) and u over batch and every element."""
    if len(batch) == 0:
        raise EmptyInputError("empty flow-matching batch")
    v = model(batch.z_t, batch.t, batch.ctx, batch.action, batch.k)
    if not torch.all(torch.isfinite(v)):
        raise NumericError("velocity field produced non-finite values")
    return torch.mean((v - batch.u) ** 2)


def grad_fm_loss(model: NavWorldModel, batch: FlowBatch) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradient of ``fm_loss`` for every trainable parameter."""
    model.zero_grad(set_to_none=True)
    fm_loss(model, batch).backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
        if p.requires_grad
    }
    model.zero_grad(set_to_none=True)
    return grads


def _linear_decay(cfg: TrainConfig) -> Callable[[int], float]:
    ratio = cfg.lr_final / cfg.lr_initial

    def factor(step: int) -> float:
        return 1.0 + (ratio - 1.0) * min(1.0, step / max(1, cfg.steps - 1))

    return factor


def draw_flow_noise(generator: torch.Generator, z0: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    z1 = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    t = torch.rand(z0.shape[0], generator=generator, dtype=z0.dtype)
    return z1, t


def train(
    corpus: TransitionCorpus, cfg: TrainConfig, mcfg: ModelConfig, model: Optional[NavWorldModel] = None
) -> Tuple[NavWorldModel, TrainLog]:
    """
    Optimise the flow-matching objective with AdamW and a linear lr decay.

    The data order, flow times and noise draws all come from ``cfg.seed``,
    so runs that share a corpus and a TrainConfig see identical batches
    whatever the model configuration.

    Raises:
        ShapeError: the corpus context length differs from ``mcfg.m``.
        DivergenceError: the loss became non-finite.
    """
    if corpus.m != mcfg.m:
        raise ShapeError(f"corpus context length {corpus.m} differs from model context length {mcfg.m}")
    model = model or build_model(mcfg)
    dtype = model_dtype(model)
    if cfg.steps == 0:
        return model, TrainLog(params_digest=params_digest(model))

    source = corpus.fixed(cfg.fixed_transitions) if cfg.fixed_transitions else corpus
    rng = np.random.default_rng(derive_seed(cfg.seed, "flow-data"))
    generator = torch.Generator().manual_seed(derive_seed(cfg.seed, "flow-noise"))
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr_initial, weight_decay=cfg.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, _linear_decay(cfg))
    data_sha = hashlib.sha256()
    log = TrainLog()
    started = time.perf_counter()

    model.train()
    for step in range(cfg.steps):
        triples = source.sample_triples(rng, cfg.batch_size, cfg.k_max)
        data_sha.update(np.ascontiguousarray(triples).tobytes())
        ctx, z0, action, k = source.tensors(triples, dtype=dtype)
        z1, t = draw_flow_noise(generator, z0)
        batch = make_flow_batch(ctx, z0, action, k, z1, t)
        if step == 0:
            log.zero_model_loss = float(torch.mean(batch.u**2))
        try:
            loss = fm_loss(model, batch)
        except NumericError as exc:
            raise DivergenceError(str(exc), step=step) from exc
        if not torch.isfinite(loss):
            raise DivergenceError("flow-matching loss is not finite", step=step)

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        log.lrs.append(optimizer.param_groups[0]["lr"])
        scheduler.step()
        log.losses.append(float(loss.item()))
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            logger.info(f"train step {step}/{cfg.steps}: loss {log.losses[-1]:.6f} lr {log.lrs[-1]:.2e}")
    model.eval()

    log.wall_clock = time.perf_counter() - started
    log.params_digest = params_digest(model)
    log.data_digest = data_sha.hexdigest()
    return model, log


@torch.no_grad()
def eval_fm_loss(
    model: NavWorldModel, corpus: TransitionCorpus, triples: np.ndarray, n_draws: int, seed: int
) -> Tuple[float, float]:
    """(model loss, zero-model loss) averaged over ``n_draws`` fixed noise draws per transition."""
    dtype = model_dtype(model)
    generator = torch.Generator().manual_seed(derive_seed(seed, "flow-eval"))
    ctx, z0, action, k = corpus.tensors(np.repeat(triples, n_draws, axis=0), dtype=dtype)
    z1, t = draw_flow_noise(generator, z0)
    batch = make_flow_batch(ctx, z0, action, k, z1, t)
    return float(fm_loss(model, batch)), float(torch.mean(batch.u**2))


def euler_integrate(field: Callable[[torch.Tensor, float], torch.Tensor], z1, steps: int):
    """
    Integrate dz/dt = field(z, t) backward from t = 1 to t = 0 with fixed steps.

    Raises:
        ConfigError: steps < 1.
        NumericError: the state became non-finite.
    """
    if steps < 1:
        raise ConfigError(f"Euler sampler needs at least one step, got {steps}")
    h = 1.0 / steps
    z = z1
    for n in range(steps, 0, -1):
        z = z - h * field(z, n / steps)
        finite = torch.all(torch.isfinite(z)) if isinstance(z, torch.Tensor) else np.all(np.isfinite(z))
        if not finite:
            raise NumericError("sampler state became non-finite", step=steps - n)
    return z


def euler_sample_tensors(
    model: NavWorldModel,
    ctx: torch.Tensor,
    action: torch.Tensor,
    k: torch.Tensor,
    z1: torch.Tensor,
    steps: int,
) -> torch.Tensor:
    model.check_shapes(z1, ctx, action)

    def field(z: torch.Tensor, t: float) -> torch.Tensor:
        return model(z, torch.full((z.shape[0],), t, dtype=z.dtype), ctx, action, k)

    with torch.no_grad():
        return euler_integrate(field, z1, steps)


def euler_sample(
    model: NavWorldModel, ctx: ContextWindow, a: ActionDelta, k: int, z1: TokenGrid, steps: int = 50
) -> TokenGrid:
    """Sample ẑ for (ctx, a, k) starting from the caller's noise grid ``z1``."""
    dtype = model_dtype(model)
    ctx_t = torch.as_tensor(ctx.stacked(), dtype=dtype)[None]
    a_t = torch.as_tensor(a.as_array(), dtype=dtype)[None]
    k_t = torch.tensor([float(k)], dtype=dtype)
    z = euler_sample_tensors(model, ctx_t, a_t, k_t, torch.as_tensor(z1.tokens, dtype=dtype)[None], steps)
    return TokenGrid.like(z[0].double().numpy(), z1)


def noise_grid(seed: int, L: int, d: int, dtype=torch.float64) -> torch.Tensor:
    """Standard Gaussian (L, d) tokens fixed by ``seed``."""
    generator = torch.Generator().manual_seed(derive_seed(seed, "rollout-noise"))
    return torch.randn((L, d), generator=generator, dtype=dtype)


class FlowDynamics:
    """Learned token dynamics: batched sliding-window rollouts of the velocity network."""

    def __init__(self, model: NavWorldModel, euler_steps: int = 50):
        self.model = model
        self.euler_steps = euler_steps
        self.model.eval()

    def anchored(self, pose) -> "FlowDynamics":
        return self

    def rollout_batch(
        self, ctx: np.ndarray, actions: np.ndarray, ks: np.ndarray, noise_seeds: Sequence[int]
    ) -> np.ndarray:
        """
        Roll B candidate plans out from one shared context.

        Args:
            ctx: (m, L, d) context tokens, oldest first.
            actions: (B, H, 3) normalized actions.
            ks: (H,) horizon token per plan step.
            noise_seeds: one seed per plan step, shared by every candidate.

        Returns:
            (B, H, L, d) predicted token grids.
        """
        actions = np.asarray(actions, dtype=np.float64)
        B, H = actions.shape[:2]
        if len(noise_seeds) != H or len(ks) != H:
            raise ConfigError(f"plan of {H} steps needs {H} noise seeds and horizons")
        cfg = self.model.config
        dtype = model_dtype(self.model)
        window = torch.as_tensor(np.asarray(ctx), dtype=dtype)[None].expand(B, -1, -1, -1).contiguous()
        if tuple(window.shape[1:]) != (cfg.m, cfg.L, cfg.d):
            raise ShapeError(f"context must be ({cfg.m}, {cfg.L}, {cfg.d}), got {tuple(np.shape(ctx))}")
        predicted = []
        for j in range(H):
            z1 = noise_grid(noise_seeds[j], cfg.L, cfg.d, dtype=dtype)[None].expand(B, -1, -1).contiguous()
            a = torch.as_tensor(actions[:, j], dtype=dtype)
            k = torch.full((B,), float(ks[j]), dtype=dtype)
            z = euler_sample_tensors(self.model, window, a, k, z1, self.euler_steps)
            predicted.append(z)
            window = torch.cat([window[:, 1:], z[:, None]], dim=1)
        return torch.stack(predicted, dim=1).double().numpy()


def _as_dynamics(dynamics, euler_steps: int):
    if isinstance(dynamics, NavWorldModel):
        return FlowDynamics(dynamics, euler_steps)
    return dynamics


def rollout(
    dynamics,
    init_ctx: ContextWindow,
    plan: Sequence[ActionDelta],
    noise_seeds: Sequence[int],
    euler_steps: int = 50,
) -> List[TokenGrid]:
    """
    Sequential rollout: each predicted grid joins the context and the oldest frame drops out.

    ``dynamics`` is a NavWorldModel or any object with ``rollout_batch``
    (for example the simulator-backed oracle). Each plan step draws its own
    noise from the matching seed.

    Raises:
        EmptyInputError: empty plan.
        ConfigError: seed count differs from plan length.
        OutOfBoundsError: a simulator-backed rollout left the world.
    """
    if not plan:
        raise EmptyInputError("rollout needs a non-empty plan")
    if len(noise_seeds) != len(plan):
        raise ConfigError(f"{len(plan)} plan steps but {len(noise_seeds)} noise seeds")
    dynamics = _as_dynamics(dynamics, euler_steps)
    actions = np.stack([a.as_array() for a in plan])[None]
    ks = np.array([a.k for a in plan], dtype=np.float64)
    tokens = dynamics.rollout_batch(init_ctx.stacked(), actions, ks, list(noise_seeds))[0]
    # the oracle marks frames outside the world with NaN; the sampler raises on its own non-finite states
    bad = np.flatnonzero(~np.all(np.isfinite(tokens), axis=(1, 2)))
    if bad.size:
        raise OutOfBoundsError(f"rollout left the world at plan step {int(bad[0])}")
    ref = init_ctx.frames[-1]
    return [TokenGrid.like(z, ref) for z in tokens]


def predict_direct(
    dynamics, ctx: ContextWindow, action: ActionDelta, noise_seed: int, euler_steps: int = 50
) -> TokenGrid:
    """One solve for z_{i+k} from the composed action and its horizon token ``action.k``."""
    return rollout(dynamics, ctx, [action], [noise_seed], euler_steps)[0]
