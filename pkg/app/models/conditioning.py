from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from app.core.exceptions import RangeError
from app.models.embedding import GaussianFourierEmbedding
from app.schema.model_schema import CondMode, ModelConfig


@dataclass(frozen=True)
class ConditionVector:
    """Global condition c plus the parts it was fused from."""

    c: torch.Tensor
    t_emb: torch.Tensor
    c_dyn: torch.Tensor
    gate: Optional[torch.Tensor] = None


def check_flow_time(t: torch.Tensor) -> None:
    if torch.any((t < 0) | (t > 1)) or not torch.all(torch.isfinite(t)):
        raise RangeError(f"flow time must lie in [0, 1], got min {t.min().item()} max {t.max().item()}")


class DynamicsConditioning(nn.Module):
    """
    Fuses action, horizon and flow-time embeddings into the condition vector.

    c_dyn = MLP(concat(a_emb, k_emb)) is injected into t_emb according to the
    configured mode; LEARNED_GATE scales it by g(t_emb) = Sigmoid(SiLU(Linear(t_emb))).
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        width, fdim = config.width_backbone, config.fourier_dim
        self.a_embedder = GaussianFourierEmbedding(3, fdim, config.fourier_scale)
        self.k_embedder = GaussianFourierEmbedding(1, fdim, config.fourier_scale)
        self.t_embedder = GaussianFourierEmbedding(1, fdim, config.fourier_scale)
        self.t_mlp = nn.Sequential(nn.Linear(fdim, width), nn.SiLU(), nn.Linear(width, width))
        self.dyn_mlp = nn.Sequential(nn.Linear(2 * fdim, width), nn.SiLU(), nn.Linear(width, width))
        self.gate = nn.Linear(width, width) if config.cond_mode == CondMode.LEARNED_GATE else None
        self.fusion = (
            nn.Sequential(nn.Linear(2 * width, width), nn.SiLU(), nn.Linear(width, width))
            if config.cond_mode == CondMode.MLP_FUSION
            else None
        )

    def time_embedding(self, t: torch.Tensor) -> torch.Tensor:
        return self.t_mlp(self.t_embedder(t))

    def dynamics_feature(self, action: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        k_in = k.to(action.dtype) / self.config.k_norm
        return self.dyn_mlp(torch.cat([self.a_embedder(action), self.k_embedder(k_in)], dim=-1))

    def gate_strength(self, t_emb: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(F.silu(self.gate(t_emb)))

    def forward(
        self,
        action: torch.Tensor,
        k: torch.Tensor,
        t: torch.Tensor,
        force_gate: Optional[float] = None,
    ) -> ConditionVector:
        check_flow_time(t)
        t_emb = self.time_embedding(t)
        c_dyn = self.dynamics_feature(action, k)
        mode = self.config.cond_mode
        gate = None
        if mode == CondMode.SIMPLE_ADD:
            c = t_emb + c_dyn
        elif mode == CondMode.MLP_FUSION:
            c = self.fusion(torch.cat([t_emb, c_dyn], dim=-1))
        elif mode == CondMode.SCHEDULED_GATE:
            gate = t.to(c_dyn.dtype)[:, None].expand_as(c_dyn)
            c = t_emb + gate * c_dyn
        else:
            gate = self.gate_strength(t_emb) if force_gate is None else torch.full_like(c_dyn, force_gate)
            c = t_emb + gate * c_dyn
        return ConditionVector(c=c, t_emb=t_emb, c_dyn=c_dyn, gate=gate)
