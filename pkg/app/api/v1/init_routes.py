from fastapi import FastAPI

from app.api.v1.routes import healthcheck, plan, probe, rollout


def init_routes(app: FastAPI):
    app.include_router(router=healthcheck.router, prefix="/healthcheck")
    app.include_router(router=rollout.router, prefix="/rollout")
    app.include_router(router=plan.router, prefix="/plan")
    app.include_router(router=probe.router, prefix="/probe")
