"""Frozen synthetic encoders, token shuffling, context assembly and the DINO patch distance."""

from functools import lru_cache
from typing import Dict, List

import numpy as np

from app.core.exceptions import InsufficientHistoryError, NormalizationError, ShapeError
from app.schema.encoder_schema import ContextWindow, EncoderKind, EncoderSpec, TokenGrid
from app.schema.world_schema import Episode, Observation
from app.utils.seeding import bytes_digest, derive_seed, rng_for

# shuffle_tokens(z, IDENTITY_SHUFFLE_SEED) returns z unchanged
IDENTITY_SHUFFLE_SEED = -1


@lru_cache(maxsize=64)
def _encoder_tables(spec: EncoderSpec) -> Dict[str, np.ndarray]:
    rng = rng_for(spec.seed, "encoder", spec.kind.value)
    tables: Dict[str, np.ndarray] = {}
    if spec.kind in (EncoderKind.LINEAR_LANDMARK, EncoderKind.NONLINEAR):
        # circular 3x3 neighbourhood mixing, 9 * d_raw -> d
        fan_in = 9 * spec.d_raw
        tables["conv"] = rng.standard_normal((3, 3, spec.d_raw, spec.d)) * (spec.gain / np.sqrt(fan_in))
    if spec.kind == EncoderKind.NONLINEAR:
        tables["bias"] = rng.standard_normal(spec.d) * 0.5
        tables["mix"] = rng.standard_normal((spec.d, spec.d)) * (spec.gain / np.sqrt(spec.d))
    if spec.kind == EncoderKind.RANDOM_PROJ:
        tables["proj"] = rng.standard_normal((spec.d_raw, spec.d)) * (spec.gain / np.sqrt(spec.d_raw))
    for table in tables.values():
        table.setflags(write=False)
    return tables


def _circular_conv(grids: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """(N, H, W, c_in) * (3, 3, c_in, c_out) with wrap-around borders."""
    out = 0.0
    for dy in range(3):
        for dx in range(3):
            shifted = np.roll(grids, shift=(1 - dy, 1 - dx), axis=(1, 2))
            out = out + shifted @ kernel[dy, dx]
    return out


def permutation_for(seed: int, L: int) -> np.ndarray:
    if seed == IDENTITY_SHUFFLE_SEED:
        return np.arange(L)
    return rng_for(seed, "shuffle").permutation(L)


def _frame_shuffle_seed(spec: EncoderSpec, grid: np.ndarray) -> int:
    if spec.shuffle_scope == "experiment":
        return spec.seed
    return derive_seed(spec.seed, bytes_digest(np.ascontiguousarray(grid).tobytes()))


def encode_batch(grids: np.ndarray, spec: EncoderSpec) -> np.ndarray:
    """
    Encode a stack of raw grids.

    Args:
        grids: (N, H_p, W_p, d_raw) raw observations.
        spec: encoder description.

    Returns:
        (N, L, d) token tensor.

    Raises:
        ShapeError: grid dims differ from the encoder's input dims.
    """
    grids = np.asarray(grids, dtype=np.float64)
    expected = (spec.grid_h, spec.grid_w, spec.d_raw)
    if grids.ndim != 4 or grids.shape[1:] != expected:
        raise ShapeError(f"encoder {spec.name} expects (N, {expected}) grids, got {grids.shape}")
    n = grids.shape[0]

    if spec.kind == EncoderKind.SHUFFLED:
        tokens = encode_batch(grids, spec.base)
        for i in range(n):
            tokens[i] = tokens[i][permutation_for(_frame_shuffle_seed(spec, grids[i]), spec.L)]
        return tokens

    tables = _encoder_tables(spec)
    if spec.kind == EncoderKind.RANDOM_PROJ:
        out = grids @ tables["proj"]
    else:
        out = _circular_conv(grids, tables["conv"])
        if spec.kind == EncoderKind.NONLINEAR:
            out = np.tanh(out + tables["bias"]) @ tables["mix"]
    return out.reshape(n, spec.L, spec.d)


def encode(obs: Observation, spec: EncoderSpec) -> TokenGrid:
    tokens = encode_batch(obs.grid[None], spec)[0]
    return TokenGrid(tokens=tokens, grid_h=spec.grid_h, grid_w=spec.grid_w)


def encode_episode(episode: Episode, spec: EncoderSpec) -> np.ndarray:
    """(T, L, d) tokens for every observation of the episode."""
    return encode_batch(episode.observation_array(), spec)


def shuffle_tokens(z: TokenGrid, seed: int) -> TokenGrid:
    """Permute token rows with the permutation fixed by ``seed``."""
    return TokenGrid.like(z.tokens[permutation_for(seed, z.L)], z)


def unshuffle_tokens(z: TokenGrid, seed: int) -> TokenGrid:
    inverse = np.argsort(permutation_for(seed, z.L))
    return TokenGrid.like(z.tokens[inverse], z)


def _unit_rows(tokens: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(tokens, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise NormalizationError("token with zero norm cannot be channel-normalized")
    return tokens / norms


def dino_distance_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Mean per-token cosine distance over the last two axes, broadcasting leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-2:] != b.shape[-2:]:
        raise ShapeError(f"token grids differ: {a.shape[-2:]} vs {b.shape[-2:]}")
    cos = np.sum(_unit_rows(a) * _unit_rows(b), axis=-1)
    return np.mean(1.0 - np.clip(cos, -1.0, 1.0), axis=-1)


def dino_distance(a: TokenGrid, b: TokenGrid) -> float:
    """(1/L) Σ_l (1 − ⟨â_l, b̂_l⟩) over channel-normalized tokens; symmetric, in [0, 2]."""
    return float(dino_distance_batch(a.tokens, b.tokens))


def build_context(episode: Episode, i: int, m: int, spec: EncoderSpec) -> ContextWindow:
    """
    Encode observations i - m + 1 .. i into a context window.

    Raises:
        InsufficientHistoryError: i < m - 1.
        ShapeError: i beyond the episode.
    """
    if m < 1:
        raise InsufficientHistoryError(f"context length must be positive, got {m}")
    if i < m - 1:
        raise InsufficientHistoryError(f"index {i} has fewer than {m} frames of history")
    if i >= len(episode):
        raise ShapeError(f"index {i} beyond episode of length {len(episode)}")
    grids = np.stack([episode.observations[j].grid for j in range(i - m + 1, i + 1)])
    tokens = encode_batch(grids, spec)
    return ContextWindow(
        frames=[TokenGrid(tokens=t, grid_h=spec.grid_h, grid_w=spec.grid_w) for t in tokens],
        frame_indices=list(range(i - m + 1, i + 1)),
    )


def context_from_tokens(tokens: np.ndarray, grid_h: int, grid_w: int, last_index: int = 0) -> ContextWindow:
    """Context window over an (m, L, d) stack whose newest frame has index ``last_index``."""
    m = len(tokens)
    return ContextWindow(
        frames=[TokenGrid(tokens=t, grid_h=grid_h, grid_w=grid_w) for t in tokens],
        frame_indices=list(range(last_index - m + 1, last_index + 1)),
    )


def parse_encoder(name: str, seed: int = 0, **dims) -> EncoderSpec:
    """Encoder spec from its CLI name; ``shuffled`` wraps the linear encoder."""
    kind = EncoderKind(name)
    if kind == EncoderKind.SHUFFLED:
        base = EncoderSpec(kind=EncoderKind.LINEAR_LANDMARK, seed=seed, **dims)
        return EncoderSpec(kind=kind, seed=seed, base=base, **dims)
    return EncoderSpec(kind=kind, seed=seed, **dims)


ENCODER_NAMES: List[str] = [k.value for k in EncoderKind]
