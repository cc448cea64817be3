from enum import Enum
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.exceptions import ShapeError


class EncoderKind(str, Enum):
    LINEAR_LANDMARK = "linear"
    NONLINEAR = "nonlinear"
    RANDOM_PROJ = "randproj"
    SHUFFLED = "shuffled"


class EncoderSpec(BaseModel):
    """
    Frozen encoder description; the encoder is a pure function of this spec.

    ``shuffle_scope`` defaults to ``"frame"``: each frame gets its own token
    permutation, seeded by ``seed`` and a digest of the frame. One fixed
    permutation for every frame (``"experiment"``) commutes with the per-token
    linear probe, so it leaves R² exactly unchanged and cannot show the loss of
    spatial order.
    """

    kind: EncoderKind = EncoderKind.LINEAR_LANDMARK
    seed: int = 0
    grid_h: int = Field(8, ge=1)
    grid_w: int = Field(8, ge=1)
    d_raw: int = Field(8, ge=1)
    d: int = Field(32, ge=1, description="token channels")
    gain: float = Field(2.0, gt=0, description="std of the token map at unit-variance input")
    base: Optional["EncoderSpec"] = Field(None, description="wrapped encoder for SHUFFLED")
    shuffle_scope: Literal["frame", "experiment"] = "frame"

    model_config = ConfigDict(
        frozen=True,
        json_schema_extra={"examples": [{"kind": "linear", "seed": 0, "d": 32}]},
    )

    @model_validator(mode="after")
    def check_base(self):
        if self.kind == EncoderKind.SHUFFLED:
            if self.base is None:
                raise ValueError("SHUFFLED encoder needs a base encoder")
            if self.base.kind == EncoderKind.SHUFFLED:
                raise ValueError("SHUFFLED encoders do not nest")
            if (self.base.grid_h, self.base.grid_w, self.base.d_raw, self.base.d) != (
                self.grid_h,
                self.grid_w,
                self.d_raw,
                self.d,
            ):
                raise ValueError("SHUFFLED dims must match its base encoder")
        elif self.base is not None:
            raise ValueError("only SHUFFLED encoders take a base")
        return self

    @property
    def L(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def name(self) -> str:
        return self.kind.value


class TokenGrid(BaseModel):
    """One observation in representation space: L patch tokens of width d."""

    tokens: np.ndarray
    grid_h: int = Field(..., ge=1)
    grid_w: int = Field(..., ge=1)

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @field_validator("tokens", mode="before")
    @classmethod
    def as_matrix(cls, v) -> np.ndarray:
        arr = np.asarray(v, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"tokens must be (L, d), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("token grid contains non-finite values")
        return arr

    @model_validator(mode="after")
    def grid_matches(self):
        if self.grid_h * self.grid_w != self.tokens.shape[0]:
            raise ShapeError(
                f"grid {self.grid_h}x{self.grid_w} does not cover {self.tokens.shape[0]} tokens"
            )
        return self

    @property
    def L(self) -> int:
        return self.tokens.shape[0]

    @property
    def d(self) -> int:
        return self.tokens.shape[1]

    @classmethod
    def like(cls, tokens, ref: "TokenGrid") -> "TokenGrid":
        return cls(tokens=tokens, grid_h=ref.grid_h, grid_w=ref.grid_w)


class ContextWindow(BaseModel):
    """m consecutive frames, oldest first."""

    frames: List[TokenGrid] = Field(..., min_length=1)
    frame_indices: List[int]

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def consecutive(self):
        if len(self.frames) != len(self.frame_indices):
            raise ValueError("one index per frame")
        if any(b - a != 1 for a, b in zip(self.frame_indices, self.frame_indices[1:])):
            raise ValueError("frame indices must be consecutive and increasing")
        shapes = {f.tokens.shape for f in self.frames}
        if len(shapes) != 1:
            raise ShapeError(f"context frames disagree on shape: {sorted(shapes)}")
        return self

    @property
    def m(self) -> int:
        return len(self.frames)

    def stacked(self) -> np.ndarray:
        return np.stack([f.tokens for f in self.frames])

    def advance(self, frame: TokenGrid) -> "ContextWindow":
        """Append a frame and drop the oldest; the window length is unchanged."""
        return ContextWindow(
            frames=[*self.frames[1:], frame],
            frame_indices=[*self.frame_indices[1:], self.frame_indices[-1] + 1],
        )


EncoderSpec.model_rebuild()
