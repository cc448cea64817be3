from typing import Annotated

from fastapi import APIRouter, Depends

from app.dependencies import get_inference_service_dep
from app.schema.api_schema import RolloutRequest, RolloutResponse
from app.services.inference_service import InferenceService

router = APIRouter(tags=["Rollout"])

inference_dependency = Annotated[InferenceService, Depends(get_inference_service_dep)]


@router.post("", response_model=RolloutResponse)
def rollout(request: RolloutRequest, inference: inference_dependency):
    """
    Predict the frames of an action plan and score each against the simulator's rendering.
    """
    return inference.rollout(
        start=request.start,
        actions=request.actions,
        world_seed=request.world_seed,
        noise_seed=request.noise_seed,
        euler_steps=request.euler_steps,
    )
