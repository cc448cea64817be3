import hashlib
import json
from typing import Any

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(*parts: int | str | bytes) -> int:
    """Deterministic 63-bit child seed from a parent seed and labels."""
    entropy = []
    for part in parts:
        if isinstance(part, int):
            entropy.append(part & _MASK64)
        else:
            raw = part.encode() if isinstance(part, str) else part
            entropy.append(int.from_bytes(hashlib.sha256(raw).digest()[:8], "little"))
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)


def rng_for(*parts: int | str | bytes) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def bytes_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def json_digest(payload: Any) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
