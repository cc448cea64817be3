from enum import Enum
from typing import List

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.exceptions import ConfigError
from app.schema.encoder_schema import EncoderSpec
from app.schema.world_schema import WorldConfig


class CondMode(str, Enum):
    SIMPLE_ADD = "simple_add"
    MLP_FUSION = "mlp_fusion"
    SCHEDULED_GATE = "scheduled_gate"
    LEARNED_GATE = "learned_gate"


class ModelConfig(BaseModel):
    """Geometry of the conditioning module, CDiT-lite backbone and DDT head."""

    depth_backbone: int = Field(3, ge=0)
    width_backbone: int = Field(64, ge=1)
    heads_backbone: int = Field(4, ge=1)
    depth_head: int = Field(1, ge=0)
    width_head: int = Field(128, ge=1)
    heads_head: int = Field(4, ge=1)
    grid_h: int = Field(8, ge=1)
    grid_w: int = Field(8, ge=1)
    d: int = Field(32, ge=1, description="token channels")
    m: int = Field(2, ge=1, description="context frames")
    cond_mode: CondMode = CondMode.LEARNED_GATE
    fourier_dim: int = Field(32, ge=2)
    fourier_scale: float = Field(1.0, gt=0, description="std of the Gaussian frequency tables")
    k_norm: float = Field(16.0, gt=0, description="horizon k is divided by this before embedding")
    mlp_ratio: float = Field(4.0, gt=0)
    head_attention: bool = True
    seed: int = 0

    model_config = ConfigDict(
        frozen=True,
        json_schema_extra={
            "examples": [
                {
                    "depth_backbone": 3,
                    "width_backbone": 64,
                    "heads_backbone": 4,
                    "depth_head": 1,
                    "width_head": 128,
                    "heads_head": 4,
                    "cond_mode": "learned_gate",
                }
            ]
        },
    )

    @model_validator(mode="after")
    def divisible(self):
        if self.width_backbone % self.heads_backbone:
            raise ConfigError("width_backbone must be divisible by heads_backbone")
        if self.width_head % self.heads_head:
            raise ConfigError("width_head must be divisible by heads_head")
        if self.width_backbone % 4 or self.width_head % 4:
            raise ConfigError("widths must be multiples of 4 for the 2D sine-cosine table")
        if self.fourier_dim % 2:
            raise ConfigError("fourier_dim must be even (sin and cos halves)")
        return self

    @property
    def L(self) -> int:
        return self.grid_h * self.grid_w


class GateReportRow(BaseModel):
    t: float = Field(..., ge=0.0, le=1.0)
    p_dyn_median: float
    p_dyn_iqr: float
    r_dyn_median: float
    r_dyn_iqr: float


class GateReport(BaseModel):
    rows: List[GateReportRow] = Field(default_factory=list)


class CheckpointMeta(BaseModel):
    """Everything needed to rebuild a trained model and the token space it was trained in."""

    model: ModelConfig
    encoder: EncoderSpec
    world_seed: int
    world_config: WorldConfig
    action_scale: float = Field(..., gt=0)
    params_digest: str
    data_digest: str = ""
    train_steps: int = Field(0, ge=0)
