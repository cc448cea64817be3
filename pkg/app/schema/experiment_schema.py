import json
from pathlib import Path
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from app.core.exceptions import ArtifactNotFoundError, ConfigError
from app.schema.encoder_schema import EncoderKind
from app.schema.model_schema import ModelConfig
from app.schema.planner_schema import CemConfig, NavConfig
from app.schema.probe_schema import ProbeMethod, ProbeTrainConfig
from app.schema.train_schema import TrainConfig
from app.schema.world_schema import MotionConfig, Policy, WorldConfig
from app.utils.seeding import json_digest


class SeedConfig(BaseModel):
    """The five independent randomness streams of an experiment."""

    world: int = Field(0, description="landmark layout and frozen encoder tables")
    data: int = Field(0, description="trajectories, data order, flow times and training noise")
    model: int = Field(0, description="initial network weights")
    noise: int = Field(0, description="rollout sampler noise")
    planner: int = Field(0, description="CEM proposals and navigation tasks")

    model_config = ConfigDict(frozen=True)


class CorpusConfig(BaseModel):
    n_episodes: int = Field(40, ge=2)
    length: int = Field(32, ge=2, description="poses per episode")
    policy: Policy = Policy.RANDOM_SMOOTH
    eval_fraction: float = Field(0.2, gt=0.0, lt=1.0, description="trailing episodes held out")

    model_config = ConfigDict(frozen=True)


class ExperimentConfig(BaseModel):
    """Complete, serializable description of a run; a run directory stores the one that produced it."""

    world: WorldConfig = Field(default_factory=WorldConfig)
    motion: MotionConfig = Field(default_factory=MotionConfig)
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    encoders: List[EncoderKind] = Field(
        default_factory=lambda: [EncoderKind.LINEAR_LANDMARK, EncoderKind.SHUFFLED],
        description="token spaces swept by the probe",
    )
    encoder: EncoderKind = Field(EncoderKind.LINEAR_LANDMARK, description="token space of the world model")
    token_dim: int = Field(32, ge=1)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    probe: ProbeTrainConfig = Field(default_factory=ProbeTrainConfig)
    probe_method: ProbeMethod = ProbeMethod.SGD
    cem: CemConfig = Field(default_factory=CemConfig)
    nav: NavConfig = Field(default_factory=NavConfig)
    horizons: List[int] = Field(default_factory=lambda: [1, 2, 4, 8])
    seeds: SeedConfig = Field(default_factory=SeedConfig)
    output_dir: Optional[Path] = None
    rollout_horizon: int = Field(16, ge=1)
    eval_episodes: int = Field(8, ge=1, description="held-out episodes used by rollout and open-loop evaluation")
    euler_steps: int = Field(50, ge=1, description="sampler steps for rollout evaluation")
    gate_grid_points: int = Field(64, ge=2)
    gate_samples: int = Field(256, ge=1)

    model_config = ConfigDict(
        frozen=True,
        json_schema_extra={
            "examples": [
                {
                    "corpus": {"n_episodes": 40, "length": 32},
                    "horizons": [1, 2, 4, 8],
                    "seeds": {"world": 0, "data": 0, "model": 0, "noise": 0, "planner": 0},
                }
            ]
        },
    )

    @model_validator(mode="after")
    def token_space_matches(self):
        if (self.model.grid_h, self.model.grid_w) != (self.world.grid_h, self.world.grid_w):
            raise ConfigError(
                f"model grid {self.model.grid_h}x{self.model.grid_w} differs from world grid "
                f"{self.world.grid_h}x{self.world.grid_w}"
            )
        if self.model.d != self.token_dim:
            raise ConfigError(f"model token dim {self.model.d} differs from token_dim {self.token_dim}")
        if any(k < 1 for k in self.horizons):
            raise ConfigError(f"probe horizons must be positive, got {self.horizons}")
        return self

    @classmethod
    def load(cls, path: Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ArtifactNotFoundError(path, "config file")
        try:
            return cls.model_validate(json.loads(path.read_text(encoding="utf-8")))
        except (ValidationError, ValueError) as exc:
            raise ConfigError(f"invalid experiment config {path}: {exc}") from exc

    def override(self, **updates) -> "ExperimentConfig":
        """Copy with ``updates`` applied, re-validated; None values are ignored."""
        payload = self.model_dump(mode="json")
        for key, value in updates.items():
            if value is None:
                continue
            target = payload
            *parents, leaf = key.split(".")
            for part in parents:
                target = target[part]
            target[leaf] = value.model_dump(mode="json") if isinstance(value, BaseModel) else value
        try:
            return ExperimentConfig.model_validate(payload)
        except ValidationError as exc:
            raise ConfigError(f"invalid override: {exc}") from exc

    def digest(self) -> str:
        return json_digest(self.model_dump(mode="json", exclude={"output_dir"}))


class RunManifest(BaseModel):
    command: str
    config_hash: str
    artifacts: Dict[str, str] = Field(default_factory=dict, description="relative path -> sha256")
    versions: Dict[str, str] = Field(default_factory=dict)
    stages: Dict[str, float] = Field(default_factory=dict, description="wall-clock seconds per stage")
