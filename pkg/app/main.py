from contextlib import asynccontextmanager
from typing import AsyncGenerator

import torch
from fastapi import FastAPI, Request, status
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ValidationError

from app.api.v1.init_routes import init_routes
from app.core.config import settings
from app.core.exceptions import (
    ArtifactNotFoundError,
    ConfigError,
    NavWorldError,
    NormalizationError,
    OutOfBoundsError,
    RangeError,
    ShapeError,
)
from app.core.logger import configure_logging, logger
from app.middleware.request_logger import LoggingMiddleware

# domain errors caused by the request content rather than the server
CLIENT_ERRORS = (ConfigError, ShapeError, OutOfBoundsError, RangeError, NormalizationError)


@asynccontextmanager
async def lifespan(app: FastAPI) -> AsyncGenerator[None, None]:
    configure_logging(settings.LOG_LEVEL, settings.LOG_DIR, to_file=settings.LOG_TO_FILE)
    torch.set_num_threads(settings.TORCH_THREADS)
    logger.info(f"Serving checkpoint {settings.DEFAULT_CHECKPOINT}")
    yield


class RootResponse(BaseModel):
    message: str


app = FastAPI(
    lifespan=lifespan,
    title="Navigation World Model API",
    description="Rollouts, goal-conditioned planning and token-space scoring over a trained navigation world model.",
    version="1.0.0",
    license_info={
        "name": "MIT",
        "url": "https://opensource.org/licenses/MIT",
    },
    openapi_tags=[
        {
            "name": "Rollout",
            "description": "Sequential prediction of token grids along an action plan.",
        },
        {
            "name": "Planning",
            "description": "Cross-entropy planning toward a goal position.",
        },
        {
            "name": "Probe",
            "description": "Distances between token grids.",
        },
    ],
    # Sets the base path for all routes, essential if the API runs behind a proxy or gateway.
    root_path="/api/v1",
    servers=[],
    docs_url="/docs",
    redoc_url="/redoc",
)

app.add_middleware(LoggingMiddleware)


def _field_errors(errors) -> dict:
    fields = {}
    for e in errors:
        loc = e["loc"][1:] if e["loc"] and e["loc"][0] == "body" else e["loc"]
        fields[".".join(map(str, loc))] = e["msg"]
    return fields


def _validation_response(fields: dict) -> JSONResponse:
    return JSONResponse(
        status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
        content={
            "error": "ValidationError",
            "message": "Validation failed for one or more fields.",
            "fields": fields,
        },
    )


@app.exception_handler(RequestValidationError)
async def validation_exception_handler(request: Request, exc: RequestValidationError):
    return _validation_response(_field_errors(exc.errors()))


@app.exception_handler(ValidationError)
async def model_validation_exception_handler(request: Request, exc: ValidationError):
    return _validation_response(_field_errors(exc.errors()))


@app.exception_handler(NavWorldError)
async def domain_exception_handler(request: Request, exc: NavWorldError):
    if isinstance(exc, ArtifactNotFoundError):
        code = status.HTTP_404_NOT_FOUND
    elif isinstance(exc, CLIENT_ERRORS):
        code = status.HTTP_422_UNPROCESSABLE_ENTITY
    else:
        code = status.HTTP_500_INTERNAL_SERVER_ERROR
    logger.warning(f"{type(exc).__name__} on {request.url.path}: {exc}")
    return JSONResponse(status_code=code, content={"error": type(exc).__name__, "detail": str(exc)})


@app.exception_handler(Exception)
async def general_exception_handler(request: Request, exc: Exception):
    logger.exception(f"Unhandled exception: {exc}")
    return JSONResponse(
        status_code=500,
        content={"detail": "An unexpected error occurred."},
    )


@app.get("/", tags=["Root"], response_model=RootResponse)
def read_root():
    """Returns a welcome message for the API root."""
    return {"message": "Navigation world model API v1. Check out /docs for the endpoints."}


init_routes(app)
