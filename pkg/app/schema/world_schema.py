from enum import Enum
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.exceptions import ShapeError
from app.utils.se2 import wrap_angle


class RendererKind(str, Enum):
    LINEAR = "linear"
    NONLINEAR = "nonlinear"


class Policy(str, Enum):
    RANDOM_SMOOTH = "random-smooth"
    WAYPOINT = "waypoint"


class Pose(BaseModel):
    """Planar agent pose; theta is kept wrapped into (-pi, pi]."""

    x: float = Field(..., description="meters")
    y: float = Field(..., description="meters")
    theta: float = Field(0.0, description="radians in (-pi, pi]")

    model_config = ConfigDict(
        frozen=True,
        json_schema_extra={"examples": [{"x": 1.5, "y": -2.0, "theta": 0.3}]},
    )

    @field_validator("theta")
    @classmethod
    def wrap_theta(cls, v: float) -> float:
        return wrap_angle(v)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "Pose":
        return cls(x=float(arr[0]), y=float(arr[1]), theta=float(arr[2]))


class ActionDelta(BaseModel):
    """Planar motion (forward, lateral, yaw) over k unit steps."""

    u_x: float = Field(..., description="forward translation")
    u_y: float = Field(0.0, description="lateral translation")
    omega: float = Field(0.0, description="yaw change in radians")
    k: int = Field(1, ge=1, description="horizon in unit steps")

    model_config = ConfigDict(
        frozen=True,
        json_schema_extra={"examples": [{"u_x": 1.0, "u_y": 0.0, "omega": 0.1, "k": 1}]},
    )

    @field_validator("u_x", "u_y", "omega")
    @classmethod
    def finite(cls, v: float) -> float:
        if not np.isfinite(v):
            raise ValueError("action components must be finite")
        return v

    def as_array(self) -> np.ndarray:
        return np.array([self.u_x, self.u_y, self.omega], dtype=np.float64)

    @property
    def translation(self) -> float:
        return float(np.hypot(self.u_x, self.u_y))

    def scaled(self, scale: float) -> "ActionDelta":
        """Translation multiplied by scale, rotation untouched."""
        return ActionDelta(u_x=self.u_x * scale, u_y=self.u_y * scale, omega=self.omega, k=self.k)

    @classmethod
    def from_array(cls, arr, k: int = 1) -> "ActionDelta":
        return cls(u_x=float(arr[0]), u_y=float(arr[1]), omega=float(arr[2]), k=k)


class Observation(BaseModel):
    """Raw sensory grid (H_p, W_p, d_raw) rendered at one pose."""

    grid: np.ndarray

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @field_validator("grid", mode="before")
    @classmethod
    def check_grid(cls, v) -> np.ndarray:
        arr = np.asarray(v, dtype=np.float64)
        if arr.ndim != 3:
            raise ShapeError(f"observation grid must be 3-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("observation grid contains non-finite values")
        return arr


class WorldConfig(BaseModel):
    n_landmarks: int = Field(12, description="landmark count, at least 4")
    bounds: Tuple[float, float, float, float] = Field(
        (-8.0, -8.0, 8.0, 8.0), description="x_min, y_min, x_max, y_max in meters"
    )
    grid_h: int = Field(8, ge=1)
    grid_w: int = Field(8, ge=1)
    d_raw: int = Field(8, ge=1)
    renderer: RendererKind = RendererKind.LINEAR
    affinity_temperature: float = Field(1.0, gt=0, description="spread of cell/landmark affinities")
    nonlinear_gain: float = Field(2.0, gt=0)

    model_config = ConfigDict(
        frozen=True,
        json_schema_extra={
            "examples": [
                {"n_landmarks": 12, "bounds": [-8, -8, 8, 8], "grid_h": 8, "grid_w": 8, "d_raw": 8}
            ]
        },
    )

    @property
    def n_cells(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def half_extent(self) -> float:
        x_min, y_min, x_max, y_max = self.bounds
        return 0.5 * max(x_max - x_min, y_max - y_min)


class MotionConfig(BaseModel):
    """Step statistics of the scripted exploration policies, in meters/radians."""

    step_min: float = Field(0.2, gt=0)
    step_max: float = Field(0.4, gt=0)
    lateral_std: float = Field(0.05, ge=0)
    omega_max: float = Field(0.1, gt=0)
    omega_std: float = Field(0.015, ge=0)
    omega_persistence: float = Field(0.5, ge=0, lt=1)
    waypoint_gain: float = Field(0.8, gt=0)
    waypoint_omega_max: float = Field(0.3, gt=0)
    waypoint_reach: float = Field(0.5, gt=0)
    max_retries: int = Field(64, ge=1)

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def ordered_steps(self):
        if self.step_min > self.step_max:
            raise ValueError("step_min must not exceed step_max")
        return self


class World(BaseModel):
    """Procedural landmark world plus the frozen rendering tables derived from its seed."""

    seed: int
    config: WorldConfig
    landmark_positions: np.ndarray = Field(..., description="(n, 2) meters")
    landmark_features: np.ndarray = Field(..., description="(n, d_raw) unit variance")
    cell_weights: np.ndarray = Field(..., description="(L, n) rows sum to one")
    readout: np.ndarray = Field(..., description="(d_raw, 2) body-frame readout")

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @property
    def bounds(self) -> Tuple[float, float, float, float]:
        return self.config.bounds

    @property
    def landmarks(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.landmark_positions, self.landmark_features))

    def to_bytes(self) -> bytes:
        header = self.config.model_dump_json().encode("utf-8")
        body = b"".join(
            np.ascontiguousarray(a, dtype="<f8").tobytes()
            for a in (self.landmark_positions, self.landmark_features, self.cell_weights, self.readout)
        )
        return int(self.seed).to_bytes(8, "little", signed=True) + header + body


class Episode(BaseModel):
    """Index-aligned poses, unit-step actions and observations of one trajectory.

    Actions are stored in units of ``action_scale`` meters: executing
    ``actions[i].scaled(action_scale)`` from ``poses[i]`` reproduces ``poses[i + 1]``.
    """

    poses: List[Pose]
    actions: List[ActionDelta]
    observations: List[Observation]
    world_seed: int
    action_scale: float = Field(1.0, gt=0)

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @model_validator(mode="after")
    def aligned(self):
        if len(self.poses) < 1:
            raise ValueError("episode needs at least one pose")
        if len(self.actions) != len(self.poses) - 1:
            raise ValueError("actions must number poses - 1")
        if len(self.observations) != len(self.poses):
            raise ValueError("observations must align with poses")
        if any(a.k != 1 for a in self.actions):
            raise ValueError("episode actions are unit steps (k == 1)")
        return self

    def __len__(self) -> int:
        return len(self.poses)

    def pose_array(self) -> np.ndarray:
        return np.stack([p.as_array() for p in self.poses])

    def action_array(self) -> np.ndarray:
        if not self.actions:
            return np.zeros((0, 3))
        return np.stack([a.as_array() for a in self.actions])

    def observation_array(self) -> np.ndarray:
        return np.stack([o.grid for o in self.observations])


class Corpus(BaseModel):
    """Episodes of one world with actions normalized by the corpus step length."""

    world_seed: int
    world_config: WorldConfig
    policy: Policy = Policy.RANDOM_SMOOTH
    data_seed: int = 0
    action_scale: float = Field(1.0, gt=0, description="meters per normalized action unit")
    episodes: List[Episode] = Field(default_factory=list)

    model_config = ConfigDict(frozen=True)

    def __len__(self) -> int:
        return len(self.episodes)
