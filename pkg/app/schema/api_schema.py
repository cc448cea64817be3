from typing import List, Optional

from pydantic import BaseModel, Field

from app.schema.world_schema import ActionDelta, Pose


class HealthCheckResponse(BaseModel):
    status: str
    torch_version: str
    checkpoint_loaded: bool
    checkpoint: Optional[str] = None


class RolloutRequest(BaseModel):
    world_seed: Optional[int] = Field(None, description="defaults to the checkpoint's training world")
    start: Pose
    actions: List[ActionDelta] = Field(..., min_length=1, description="normalized actions, one per predicted frame")
    noise_seed: int = 0
    euler_steps: int = Field(50, ge=1, le=1000)

    model_config = {
        "json_schema_extra": {
            "examples": [
                {
                    "world_seed": 0,
                    "start": {"x": 0.0, "y": 0.0, "theta": 0.0},
                    "actions": [{"u_x": 1.0, "u_y": 0.0, "omega": 0.0, "k": 1}] * 4,
                    "noise_seed": 0,
                    "euler_steps": 50,
                }
            ]
        }
    }


class RolloutStep(BaseModel):
    step: int = Field(..., ge=1)
    pose: Pose = Field(..., description="ground-truth pose after executing the step")
    dino_distance: float = Field(..., ge=0.0, description="predicted vs rendered tokens")


class RolloutResponse(BaseModel):
    steps: List[RolloutStep]
    mean_dino_distance: float


class PlanRequest(BaseModel):
    world_seed: Optional[int] = None
    start: Pose
    goal: List[float] = Field(..., min_length=2, max_length=2, description="goal position x, y in meters")
    n_candidates: Optional[int] = Field(None, ge=1)
    n_iters: Optional[int] = Field(None, ge=1)
    horizon_steps: Optional[int] = Field(None, ge=1)
    euler_steps: Optional[int] = Field(None, ge=1)
    seed: Optional[int] = None

    model_config = {
        "json_schema_extra": {
            "examples": [
                {
                    "start": {"x": 0.0, "y": 0.0, "theta": 0.0},
                    "goal": [4.0, 1.0],
                    "n_candidates": 60,
                    "n_iters": 2,
                }
            ]
        }
    }


class TokenGridIn(BaseModel):
    tokens: List[List[float]] = Field(..., min_length=1)
    grid_h: int = Field(..., ge=1)
    grid_w: int = Field(..., ge=1)


class ScoreRequest(BaseModel):
    a: TokenGridIn
    b: TokenGridIn


class ScoreResponse(BaseModel):
    dino_distance: float
