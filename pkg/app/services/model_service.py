"""Functional surface over the velocity network: conditioning, backbone, head and gate diagnostics."""

import hashlib
from typing import List, Sequence, Tuple

import numpy as np
import torch

from app.core.exceptions import ConfigError, DegenerateEmbeddingError
from app.core.logger import logger
from app.models.blocks import adaln_modulate
from app.models.conditioning import ConditionVector
from app.models.embedding import fourier_embed
from app.models.world_model import NavWorldModel
from app.schema.model_schema import CondMode, GateReport, GateReportRow, ModelConfig
from app.schema.world_schema import ActionDelta

__all__ = [
    "adaln_modulate",
    "build_condition",
    "build_model",
    "cdit_forward",
    "ddt_head_forward",
    "fourier_embed",
    "gate_report",
    "gate_strength",
    "model_forward",
    "parameter_count",
    "params_digest",
]


def build_model(config: ModelConfig) -> NavWorldModel:
    model = NavWorldModel(config)
    logger.debug(f"Built {config.cond_mode.value} model with {parameter_count(model)} parameters")
    return model


def parameter_count(model: NavWorldModel | ModelConfig) -> int:
    if isinstance(model, ModelConfig):
        model = NavWorldModel(model)
    return sum(p.numel() for p in model.parameters())


def params_digest(model: torch.nn.Module) -> str:
    sha = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        sha.update(name.encode())
        sha.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return sha.hexdigest()


def model_dtype(model: torch.nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def actions_tensor(actions: Sequence[ActionDelta], dtype=torch.float32) -> Tuple[torch.Tensor, torch.Tensor]:
    a = torch.tensor(np.stack([act.as_array() for act in actions]), dtype=dtype)
    k = torch.tensor([act.k for act in actions], dtype=dtype)
    return a, k


def build_condition(
    model: NavWorldModel, a: torch.Tensor, k: torch.Tensor, t: torch.Tensor, force_gate: float | None = None
) -> ConditionVector:
    return model.conditioning(a, k, t, force_gate=force_gate)


def gate_strength(model: NavWorldModel, t_emb: torch.Tensor) -> torch.Tensor:
    if model.config.cond_mode != CondMode.LEARNED_GATE:
        raise ConfigError(f"gate_strength needs a learned gate, model uses {model.config.cond_mode.value}")
    return model.conditioning.gate_strength(t_emb)


def cdit_forward(model: NavWorldModel, z_t: torch.Tensor, ctx: torch.Tensor, c: ConditionVector) -> torch.Tensor:
    """Backbone features z' (B, L, width_backbone)."""
    model.check_shapes(z_t, ctx)
    return model.backbone(z_t, ctx, c.c)


def ddt_head_forward(
    model: NavWorldModel, z_t: torch.Tensor, z_prime: torch.Tensor, t_emb: torch.Tensor
) -> torch.Tensor:
    return model.head(z_t, z_prime, t_emb)


def model_forward(
    model: NavWorldModel,
    z_t: torch.Tensor,
    t: torch.Tensor,
    ctx: torch.Tensor,
    a: torch.Tensor,
    k: torch.Tensor,
) -> torch.Tensor:
    return model(z_t, t, ctx, a, k)


def dynamics_ratios(n_d: np.ndarray, n_t: float) -> Tuple[np.ndarray, np.ndarray]:
    """P_dyn = n_d / (n_d + n_t) and R_dyn = n_d / n_t."""
    if n_t == 0:
        raise DegenerateEmbeddingError("time embedding has zero norm")
    n_d = np.asarray(n_d, dtype=np.float64)
    return n_d / (n_d + n_t), n_d / n_t


def _median_iqr(values: np.ndarray) -> Tuple[float, float]:
    q25, q50, q75 = np.percentile(values, [25, 50, 75])
    return float(q50), float(q75 - q25)


@torch.no_grad()
def gate_report(model: NavWorldModel, t_grid: Sequence[float], samples: List[ActionDelta]) -> GateReport:
    """
    Gate diagnostics over flow time.

    For each t: n_t = ‖t_emb‖, n_d = ‖g(t_emb) ⊙ c_dyn(a, k)‖ per sample; the
    report carries median and IQR of P_dyn and R_dyn across samples.
    """
    if model.config.cond_mode != CondMode.LEARNED_GATE:
        raise ConfigError("gate report needs a LEARNED_GATE model")
    dtype = model_dtype(model)
    a, k = actions_tensor(samples, dtype=dtype)
    c_dyn = model.conditioning.dynamics_feature(a, k)
    rows = []
    for t in t_grid:
        t_emb = model.conditioning.time_embedding(torch.tensor([float(t)], dtype=dtype))
        n_t = float(torch.linalg.vector_norm(t_emb))
        gate = model.conditioning.gate_strength(t_emb)
        n_d = torch.linalg.vector_norm(gate * c_dyn, dim=-1).double().numpy()
        p_dyn, r_dyn = dynamics_ratios(n_d, n_t)
        p_med, p_iqr = _median_iqr(p_dyn)
        r_med, r_iqr = _median_iqr(r_dyn)
        rows.append(GateReportRow(t=float(t), p_dyn_median=p_med, p_dyn_iqr=p_iqr, r_dyn_median=r_med, r_dyn_iqr=r_iqr))
    return GateReport(rows=rows)
