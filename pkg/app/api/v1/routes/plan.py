from typing import Annotated

from fastapi import APIRouter, Depends

from app.dependencies import get_inference_service_dep
from app.schema.api_schema import PlanRequest
from app.schema.planner_schema import PlanResult
from app.services.inference_service import InferenceService

router = APIRouter(tags=["Planning"])

inference_dependency = Annotated[InferenceService, Depends(get_inference_service_dep)]


@router.post("", response_model=PlanResult)
def plan(request: PlanRequest, inference: inference_dependency):
    """
    Cross-entropy search for an action sequence whose predicted rollout ends near the goal image.
    """
    overrides = request.model_dump(include={"n_candidates", "n_iters", "horizon_steps", "euler_steps", "seed"})
    return inference.plan(
        start=request.start, goal=tuple(request.goal), world_seed=request.world_seed, **overrides
    )
