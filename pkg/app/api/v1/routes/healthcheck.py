from pathlib import Path
from typing import Annotated, Optional

import torch
from fastapi import APIRouter, Depends

from app.core.exceptions import NavWorldError
from app.dependencies import get_checkpoint_path, load_checkpoint
from app.schema.api_schema import HealthCheckResponse

router = APIRouter(tags=["Healthcheck"])


@router.get("", response_model=HealthCheckResponse)
async def health_check(path: Annotated[Optional[Path], Depends(get_checkpoint_path)]):
    """
    Server status and whether the configured checkpoint can be loaded.
    """
    loaded = False
    if path is not None:
        try:
            load_checkpoint(Path(path))
            loaded = True
        except NavWorldError:
            loaded = False
    return {
        "status": "ok",
        "torch_version": torch.__version__,
        "checkpoint_loaded": loaded,
        "checkpoint": str(path) if path is not None else None,
    }
