from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.exceptions import ConfigError


class FlowSample(BaseModel):
    """One point on the linear path between clean tokens z0 and noise z1."""

    z0: np.ndarray
    z1: np.ndarray
    t: float = Field(..., ge=0.0, le=1.0)
    z_t: np.ndarray
    u: np.ndarray

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)


class TrainConfig(BaseModel):
    steps: int = Field(5000, ge=0)
    batch_size: int = Field(16, ge=1)
    lr_initial: float = Field(2e-4, gt=0)
    lr_final: float = Field(2e-6, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    seed: int = Field(0, description="data order, flow times and training noise")
    t_sampling: Literal["uniform"] = "uniform"
    k_max: int = Field(8, ge=1)
    fixed_transitions: Optional[int] = Field(
        None, ge=1, description="train on this many fixed transitions instead of the corpus"
    )
    log_every: int = Field(250, ge=1)

    model_config = ConfigDict(
        frozen=True,
        json_schema_extra={
            "examples": [{"steps": 5000, "batch_size": 16, "lr_initial": 2e-4, "lr_final": 2e-6}]
        },
    )

    @model_validator(mode="after")
    def decaying(self):
        if self.lr_final > self.lr_initial:
            raise ConfigError("lr_final must not exceed lr_initial")
        return self


class TrainLog(BaseModel):
    losses: List[float] = Field(default_factory=list)
    lrs: List[float] = Field(default_factory=list)
    wall_clock: float = 0.0
    params_digest: str = ""
    data_digest: str = ""
    zero_model_loss: Optional[float] = None

    @model_validator(mode="after")
    def finite(self):
        if not all(np.isfinite(self.losses)):
            raise ValueError("training losses must be finite")
        return self
