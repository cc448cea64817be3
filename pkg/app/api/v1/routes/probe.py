from fastapi import APIRouter

from app.schema.api_schema import ScoreRequest, ScoreResponse
from app.services.inference_service import score_grids

router = APIRouter(tags=["Probe"])


@router.post("/score", response_model=ScoreResponse)
def score(request: ScoreRequest):
    """
    DINO distance between two token grids.
    """
    return {"dino_distance": score_grids(request.a, request.b)}
