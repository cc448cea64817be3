from functools import lru_cache
from pathlib import Path
from typing import Annotated, Optional, Tuple

from fastapi import Depends, HTTPException, status

from app.core.config import settings
from app.core.exceptions import ArtifactNotFoundError
from app.core.logger import logger
from app.crud.checkpoint import CheckpointCrud
from app.models.world_model import NavWorldModel
from app.schema.model_schema import CheckpointMeta
from app.services.inference_service import InferenceService


@lru_cache(maxsize=4)
def load_checkpoint(path: Path) -> Tuple[NavWorldModel, CheckpointMeta]:
    """Checkpoints are immutable once written, so each path is loaded once per process."""
    logger.info(f"Loading checkpoint {path}")
    return CheckpointCrud(path).load()


def get_checkpoint_path() -> Optional[Path]:
    return settings.DEFAULT_CHECKPOINT


def get_inference_service_dep(
    path: Annotated[Optional[Path], Depends(get_checkpoint_path)],
) -> InferenceService:
    """
    Inference service over the configured checkpoint
    """
    if path is None:
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND, detail="No checkpoint configured (set NWM_CHECKPOINT)"
        )
    try:
        model, meta = load_checkpoint(Path(path))
    except ArtifactNotFoundError as exc:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=str(exc))
    return InferenceService(model, meta)
