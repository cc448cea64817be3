import numpy as np
import pytest
import torch

from app.schema.model_schema import CondMode, ModelConfig
from app.schema.world_schema import WorldConfig
from app.services.encoder_service import parse_encoder
from app.services.world_service import generate_world, normalize_actions, sample_trajectory
from app.utils.seeding import derive_seed

GRID = 4
D_RAW = 4
TOKEN_DIM = 8


@pytest.fixture(scope="session")
def small_world_config() -> WorldConfig:
    return WorldConfig(n_landmarks=6, grid_h=GRID, grid_w=GRID, d_raw=D_RAW)


@pytest.fixture(scope="session")
def small_world(small_world_config):
    return generate_world(7, small_world_config)


@pytest.fixture(scope="session")
def linear_spec():
    return parse_encoder("linear", seed=3, grid_h=GRID, grid_w=GRID, d_raw=D_RAW, d=TOKEN_DIM)


@pytest.fixture(scope="session")
def small_corpus(small_world):
    """Normalized episodes and their action scale."""
    episodes = [sample_trajectory(small_world, derive_seed(11, "episode", e), 12) for e in range(6)]
    return normalize_actions(episodes)


def tiny_model_config(cond_mode: CondMode = CondMode.LEARNED_GATE, **overrides) -> ModelConfig:
    payload = dict(
        depth_backbone=1,
        width_backbone=16,
        heads_backbone=2,
        depth_head=1,
        width_head=16,
        heads_head=2,
        grid_h=GRID,
        grid_w=GRID,
        d=TOKEN_DIM,
        m=2,
        fourier_dim=8,
        mlp_ratio=2.0,
        cond_mode=cond_mode,
    )
    payload.update(overrides)
    return ModelConfig(**payload)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return tiny_model_config()


def randomize_zero_init(model: torch.nn.Module, seed: int = 0, std: float = 0.2) -> None:
    """Give the adaLN-Zero projections and the final un-embed non-zero weights."""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if torch.count_nonzero(p) == 0:
                p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * std)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
