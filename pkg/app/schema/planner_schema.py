from typing import List, Literal, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.exceptions import ConfigError
from app.schema.world_schema import ActionDelta, Pose

Triple = Tuple[float, float, float]


class CemConfig(BaseModel):
    """Cross-entropy search over normalized (u_x, u_y, omega) action sequences."""

    n_candidates: int = Field(120, ge=1)
    horizon_steps: int = Field(8, ge=1)
    n_iters: int = Field(3, ge=1)
    elite_frac: float = Field(0.1, gt=0.0, le=0.5)
    action_low: Triple = (0.0, -0.5, -0.5)
    action_high: Triple = (2.0, 0.5, 0.5)
    init_mean: Triple = (1.0, 0.0, 0.0)
    init_std: Triple = (0.5, 0.2, 0.2)
    std_decay: float = Field(1.0, gt=0.0, le=1.0, description="extra std shrink per iteration")
    score_mode: Literal["final", "min"] = "final"
    euler_steps: int = Field(10, ge=1, description="sampler steps per predicted frame")
    stop_fraction: float = Field(0.1, ge=0.0)
    stop_rule: Literal["plan", "first"] = "plan"
    seed: int = 0

    model_config = ConfigDict(
        frozen=True,
        json_schema_extra={"examples": [{"n_candidates": 120, "horizon_steps": 8, "n_iters": 3}]},
    )

    @model_validator(mode="after")
    def enough_elites(self):
        if self.n_elites < 2:
            raise ConfigError(
                f"{self.n_candidates} candidates at elite_frac {self.elite_frac} leave fewer than 2 elites"
            )
        if any(lo >= hi for lo, hi in zip(self.action_low, self.action_high)):
            raise ConfigError("action bounds must satisfy low < high")
        if any(s < 0 for s in self.init_std):
            raise ConfigError("init_std must be non-negative")
        return self

    @property
    def n_elites(self) -> int:
        return int(self.n_candidates * self.elite_frac + 1e-9)


class IterationStats(BaseModel):
    iteration: int
    best_score: float = Field(..., description="best score seen so far")
    iteration_best: float
    elite_mean: float
    n_finite: int


class PlanResult(BaseModel):
    best_actions: List[ActionDelta]
    best_score: float
    best_noise_seeds: List[int] = Field(default_factory=list)
    final_mean: List[ActionDelta] = Field(default_factory=list)
    iterations: List[IterationStats] = Field(default_factory=list)


class EpisodeResult(BaseModel):
    success: bool
    path_length: float = Field(..., ge=0.0)
    shortest_length: float = Field(..., ge=0.0)
    final_distance: float = Field(..., ge=0.0)
    steps: int = Field(..., ge=0)
    stop_reason: Literal["reached", "stopped", "max_steps"]
    poses: List[Pose] = Field(default_factory=list)


class NavReport(BaseModel):
    sr: float = Field(..., ge=0.0, le=1.0)
    spl: float = Field(..., ge=0.0, le=1.0)
    episodes: List[EpisodeResult] = Field(default_factory=list)

    @model_validator(mode="after")
    def spl_below_sr(self):
        if self.spl > self.sr + 1e-12:
            raise ValueError("SPL cannot exceed SR")
        return self


class NavConfig(BaseModel):
    n_episodes: int = Field(20, ge=1)
    max_steps: int = Field(40, ge=0)
    success_radius: float = Field(1.0, gt=0)
    goal_distance: Tuple[float, float] = (6.0, 10.0)
    margin: float = Field(1.0, ge=0, description="keep starts and goals this far from walls")
    max_placement_tries: int = Field(256, ge=1)

    model_config = ConfigDict(frozen=True)


class TrajectoryErrors(BaseModel):
    ate: float = Field(..., ge=0.0)
    rpe: float = Field(..., ge=0.0)
    n_episodes: int = Field(..., ge=0)
