import json
from pathlib import Path
from typing import Dict, Tuple

import torch

from app.core.exceptions import ArtifactNotFoundError, ChecksumError, ShapeError
from app.core.logger import logger
from app.crud.tensor_store import read_tensors, write_tensors
from app.models.world_model import NavWorldModel
from app.schema.model_schema import CheckpointMeta
from app.services.model_service import params_digest
from app.utils.seeding import bytes_digest

META_FILE = "model.json"
WEIGHTS_FILE = "model.bin"


class CheckpointCrud:
    """Model checkpoints: a JSON description plus a flat tensor file of the state dict."""

    def __init__(self, root: Path):
        self.root = Path(root)

    def exists(self) -> bool:
        return (self.root / META_FILE).is_file() and (self.root / WEIGHTS_FILE).is_file()

    def save(self, model: NavWorldModel, meta: CheckpointMeta) -> Dict[str, str]:
        """Write weights and metadata; returns sha256 per written file."""
        self.root.mkdir(parents=True, exist_ok=True)
        state = {name: tensor.detach().cpu().numpy() for name, tensor in model.state_dict().items()}
        checksums = {WEIGHTS_FILE: write_tensors(self.root / WEIGHTS_FILE, state)}
        raw = meta.model_dump_json(indent=2).encode("utf-8")
        (self.root / META_FILE).write_bytes(raw)
        checksums[META_FILE] = bytes_digest(raw)
        logger.info(f"Saved checkpoint {meta.params_digest[:12]} to {self.root}")
        return checksums

    def load_meta(self) -> CheckpointMeta:
        path = self.root / META_FILE
        if not path.is_file():
            raise ArtifactNotFoundError(path, "checkpoint")
        return CheckpointMeta.model_validate(json.loads(path.read_text(encoding="utf-8")))

    def load(self) -> Tuple[NavWorldModel, CheckpointMeta]:
        """
        Rebuild the model from its config and restore the stored weights.

        Raises:
            ArtifactNotFoundError: metadata or weights missing.
            ShapeError: a stored tensor disagrees with the rebuilt model.
            ChecksumError: the restored weights do not hash to the recorded digest.
        """
        meta = self.load_meta()
        state, _ = read_tensors(self.root / WEIGHTS_FILE)
        model = NavWorldModel(meta.model)
        expected = model.state_dict()
        if set(state) != set(expected):
            missing = sorted(set(expected) ^ set(state))
            raise ShapeError(f"checkpoint tensors do not match the model: {missing[:5]}")
        for name, tensor in expected.items():
            if tuple(state[name].shape) != tuple(tensor.shape):
                raise ShapeError(f"{name}: stored {tuple(state[name].shape)}, model expects {tuple(tensor.shape)}")
        model.load_state_dict({name: torch.from_numpy(array) for name, array in state.items()})
        model.eval()
        if params_digest(model) != meta.params_digest:
            raise ChecksumError(f"weights in {self.root} do not match digest {meta.params_digest[:12]}")
        return model, meta
