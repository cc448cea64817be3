from enum import Enum
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.exceptions import ShapeError
from app.schema.encoder_schema import TokenGrid
from app.schema.world_schema import ActionDelta


class ProbeMethod(str, Enum):
    SGD = "sgd"
    CLOSED_FORM = "closed_form"


class ProbeParams(BaseModel):
    """z_next = z + z Aᵀ + a B, with A (d, d) per-token and B (3, d) broadcast."""

    A: np.ndarray
    B: np.ndarray

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @field_validator("A", "B", mode="before")
    @classmethod
    def finite_matrix(cls, v) -> np.ndarray:
        arr = np.asarray(v, dtype=np.float64)
        if arr.ndim != 2 or not np.all(np.isfinite(arr)):
            raise ValueError("probe parameters must be finite matrices")
        return arr

    @model_validator(mode="after")
    def shapes(self):
        d = self.A.shape[0]
        if self.A.shape != (d, d) or self.B.shape != (3, d):
            raise ShapeError(f"probe shapes A{self.A.shape} B{self.B.shape} are inconsistent")
        return self

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @classmethod
    def zeros(cls, d: int) -> "ProbeParams":
        return cls(A=np.zeros((d, d)), B=np.zeros((3, d)))


class ProbePair(BaseModel):
    z_i: TokenGrid
    z_target: TokenGrid
    action: ActionDelta
    k: int = Field(..., ge=1)

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def consistent(self):
        if self.z_i.tokens.shape != self.z_target.tokens.shape:
            raise ShapeError("source and target grids differ in shape")
        if self.action.k != self.k:
            raise ValueError("aggregated action must carry the pair horizon")
        return self


class ProbeTrainConfig(BaseModel):
    """Huber-loss AdamW fit of the linear probe."""

    steps: int = Field(1500, ge=1)
    lr: float = Field(2e-2, gt=0)
    warmup_steps: int = Field(100, ge=0)
    weight_decay: float = Field(1e-4, ge=0)
    huber_delta: float = Field(1.0, gt=0)
    batch_pairs: Optional[int] = Field(128, ge=1, description="pairs per step; None means full batch")
    seed: int = 0
    log_every: int = Field(250, ge=1)

    model_config = ConfigDict(frozen=True)


class ProbeReportRow(BaseModel):
    encoder: str
    k: int
    r2: float = Field(..., le=1.0)
    sse: float = Field(..., ge=0.0)
    sst: float = Field(..., gt=0.0)
    n_pairs: int = Field(..., ge=0)


class ProbeReport(BaseModel):
    rows: List[ProbeReportRow] = Field(default_factory=list)

    def get(self, encoder: str, k: int) -> ProbeReportRow:
        for row in self.rows:
            if row.encoder == encoder and row.k == k:
                return row
        raise KeyError((encoder, k))

    model_config = {
        "json_schema_extra": {
            "examples": [
                {"rows": [{"encoder": "linear", "k": 1, "r2": 0.998, "sse": 1.2, "sst": 600.0, "n_pairs": 248}]}
            ]
        }
    }
