"""Linear dynamics probe: z_{i+k} ≈ z_i + A z_i + B a, fitted per representation space and horizon."""

import math
from typing import List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from app.core.exceptions import (
    ConstantTargetError,
    DivergenceError,
    EmptyInputError,
    ShapeError,
    SingularSystemError,
)
from app.core.logger import logger
from app.models.linear_probe import LinearDynamicsProbe
from app.schema.encoder_schema import EncoderSpec, TokenGrid
from app.schema.probe_schema import (
    ProbeMethod,
    ProbePair,
    ProbeParams,
    ProbeReport,
    ProbeReportRow,
    ProbeTrainConfig,
)
from app.schema.world_schema import ActionDelta, Episode
from app.services.encoder_service import encode_episode
from app.utils.se2 import relative


def probe_predict(p: ProbeParams, z: TokenGrid, a: ActionDelta) -> TokenGrid:
    """ẑ[l] = z[l] + A z[l] + Bᵀ a for every token l."""
    if z.d != p.d:
        raise ShapeError(f"probe has d={p.d}, token grid has d={z.d}")
    return TokenGrid.like(_predict_tokens(p.A, p.B, z.tokens, a.as_array()), z)


def _predict_tokens(A: np.ndarray, B: np.ndarray, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    # z (..., L, d), a (..., 3)
    return z + z @ A.T + (a @ B)[..., None, :]


def aggregate_action(episode: Episode, i: int, k: int) -> ActionDelta:
    """Composition of the k unit actions from i, expressed in the frame at i (episode action units)."""
    poses = episode.pose_array()
    rel = relative(poses[i], poses[i + k])
    return ActionDelta(u_x=rel[0] / episode.action_scale, u_y=rel[1] / episode.action_scale, omega=rel[2], k=k)


def build_probe_pairs(episodes: Sequence[Episode], spec: EncoderSpec, k: int) -> List[ProbePair]:
    pairs = []
    for episode in episodes:
        tokens = encode_episode(episode, spec)
        for i in range(len(episode) - k):
            pairs.append(
                ProbePair(
                    z_i=TokenGrid(tokens=tokens[i], grid_h=spec.grid_h, grid_w=spec.grid_w),
                    z_target=TokenGrid(tokens=tokens[i + k], grid_h=spec.grid_h, grid_w=spec.grid_w),
                    action=aggregate_action(episode, i, k),
                    k=k,
                )
            )
    return pairs


def _stack_pairs(pairs: Sequence[ProbePair]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not pairs:
        raise EmptyInputError("no probe pairs")
    z = np.stack([pair.z_i.tokens for pair in pairs])
    target = np.stack([pair.z_target.tokens for pair in pairs])
    actions = np.stack([pair.action.as_array() for pair in pairs])
    return z, target, actions


def _design(z: np.ndarray, actions: np.ndarray) -> np.ndarray:
    n, L, d = z.shape
    broadcast = np.broadcast_to(actions[:, None, :], (n, L, 3))
    return np.concatenate([z, broadcast], axis=-1).reshape(n * L, d + 3)


def fit_probe_closed_form(pairs: Sequence[ProbePair]) -> ProbeParams:
    """
    Exact least-squares probe from the normal equations.

    Each token of each pair is one regression row with regressors (z[l], a)
    and target z_target[l] − z[l].

    Raises:
        EmptyInputError: no pairs.
        SingularSystemError: fewer than d + 3 rows or a rank-deficient design.
    """
    z, target, actions = _stack_pairs(pairs)
    d = z.shape[-1]
    X = _design(z, actions)
    Y = (target - z).reshape(-1, d)
    if X.shape[0] < d + 3:
        raise SingularSystemError(f"{X.shape[0]} regression rows cannot determine {d + 3} unknowns")
    rank = np.linalg.matrix_rank(X)
    if rank < d + 3:
        raise SingularSystemError(f"design matrix has rank {rank} < {d + 3}")
    theta = np.linalg.solve(X.T @ X, X.T @ Y)  # (d + 3, d)
    return ProbeParams(A=theta[:d].T, B=theta[d:])


def _probe_lr_lambda(cfg: ProbeTrainConfig):
    def factor(step: int) -> float:
        if step < cfg.warmup_steps:
            return (step + 1) / cfg.warmup_steps
        progress = (step - cfg.warmup_steps) / max(1, cfg.steps - cfg.warmup_steps)
        return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))

    return factor


def fit_probe_sgd(pairs: Sequence[ProbePair], cfg: ProbeTrainConfig | None = None) -> ProbeParams:
    """
    Huber-loss probe fit with AdamW, linear warmup and cosine decay.

    Deterministic given ``cfg.seed``: parameters start at zero and minibatches,
    if any, are drawn from a seeded generator.

    Raises:
        EmptyInputError: no pairs.
        DivergenceError: the loss became non-finite.
    """
    cfg = cfg or ProbeTrainConfig()
    z_np, target_np, actions_np = _stack_pairs(pairs)
    z = torch.from_numpy(z_np)
    target = torch.from_numpy(target_np)
    actions = torch.from_numpy(actions_np)

    probe = LinearDynamicsProbe(z.shape[-1]).double()
    optimizer = torch.optim.AdamW(probe.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, _probe_lr_lambda(cfg))
    generator = torch.Generator().manual_seed(cfg.seed)

    for step in range(cfg.steps):
        if cfg.batch_pairs is None or cfg.batch_pairs >= len(z):
            idx = slice(None)
        else:
            idx = torch.randperm(len(z), generator=generator)[: cfg.batch_pairs]
        pred = probe(z[idx], actions[idx])
        loss = F.huber_loss(pred, target[idx], delta=cfg.huber_delta)
        if not torch.isfinite(loss):
            raise DivergenceError("probe loss is not finite", step=step)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        scheduler.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            logger.debug(f"probe step {step}: huber {loss.item():.6e}")

    return ProbeParams(
        A=probe.A.weight.detach().numpy().copy(),
        B=probe.B.weight.detach().numpy().T.copy(),
    )


def r2_components(pred, target) -> Tuple[float, float, float]:
    """(R², SSE, SST) over the fully flattened tensors, with compensated sums."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise ShapeError(f"prediction has {pred.size} values, target has {target.size}")
    if target.size == 0:
        raise EmptyInputError("R² of empty tensors")
    mean = math.fsum(target.tolist()) / target.size
    sse = math.fsum(np.square(target - pred).tolist())
    sst = math.fsum(np.square(target - mean).tolist())
    if sst == 0.0:
        raise ConstantTargetError("target is constant, R² undefined")
    return 1.0 - sse / sst, sse, sst


def r2_global(pred, target) -> float:
    return r2_components(pred, target)[0]


def split_corpus(episodes: Sequence[Episode], eval_fraction: float = 0.2) -> Tuple[List[Episode], List[Episode]]:
    """Trajectory-level split: the last ``eval_fraction`` of episodes are held out."""
    n_eval = int(round(len(episodes) * eval_fraction))
    n_train = len(episodes) - n_eval
    return list(episodes[:n_train]), list(episodes[n_train:])


def evaluate_probe(params: ProbeParams, pairs: Sequence[ProbePair]) -> Tuple[float, float, float]:
    z, target, actions = _stack_pairs(pairs)
    return r2_components(_predict_tokens(params.A, params.B, z, actions), target)


def probe_sweep(
    corpus: Sequence[Episode],
    encoders: Sequence[EncoderSpec],
    horizons: Sequence[int],
    method: ProbeMethod = ProbeMethod.SGD,
    cfg: ProbeTrainConfig | None = None,
    eval_fraction: float = 0.2,
) -> ProbeReport:
    """
    Fit on the training trajectories and score on the held-out ones, per (encoder, k).

    Raises:
        EmptyInputError: a split has no pairs at some horizon.
    """
    train_eps, eval_eps = split_corpus(corpus, eval_fraction)
    if horizons and (not train_eps or not eval_eps):
        raise EmptyInputError(f"split of {len(corpus)} episodes leaves an empty side")

    rows = []
    for spec in encoders:
        for k in horizons:
            train_pairs = build_probe_pairs(train_eps, spec, k)
            eval_pairs = build_probe_pairs(eval_eps, spec, k)
            if not train_pairs or not eval_pairs:
                raise EmptyInputError(f"no probe pairs at k={k} for encoder {spec.name}")
            if method == ProbeMethod.CLOSED_FORM:
                params = fit_probe_closed_form(train_pairs)
            else:
                params = fit_probe_sgd(train_pairs, cfg)
            r2, sse, sst = evaluate_probe(params, eval_pairs)
            logger.info(f"probe {spec.name} k={k}: R²={r2:.5f} over {len(eval_pairs)} held-out pairs")
            rows.append(ProbeReportRow(encoder=spec.name, k=k, r2=r2, sse=sse, sst=sst, n_pairs=len(eval_pairs)))
    return ProbeReport(rows=rows)
