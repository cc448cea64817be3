"""Command-line entry point: one subcommand per experiment."""

import json
import sys
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import torch
import typer
from typing_extensions import Annotated

from app.core.config import settings
from app.core.exceptions import ConfigError, NavWorldError
from app.core.logger import configure_logging, logger
from app.crud.run import RunCrud
from app.schema.experiment_schema import ExperimentConfig, RunManifest
from app.schema.probe_schema import ProbeMethod
from app.schema.world_schema import Pose
from app.services.encoder_service import ENCODER_NAMES
from app.services.experiment_service import ExperimentService

app = typer.Typer(
    name="nwm",
    help="Token-space navigation world model: data, probes, training, rollouts and planning.",
    no_args_is_help=True,
    add_completion=False,
)

ConfigOpt = Annotated[Optional[Path], typer.Option("--config", "-c", help="ExperimentConfig JSON file.")]
OutOpt = Annotated[Optional[Path], typer.Option("--out", "-o", help="Run directory.")]
CorpusOpt = Annotated[Optional[Path], typer.Option("--corpus", help="Corpus directory written by gen-data.")]
CkptOpt = Annotated[Optional[Path], typer.Option("--ckpt", help="Checkpoint directory written by train.")]


def _floats(value: str, n: int, name: str) -> Tuple[float, ...]:
    try:
        parts = tuple(float(v) for v in value.split(","))
    except ValueError as exc:
        raise typer.BadParameter(f"{name} must be {n} comma-separated numbers, got {value!r}") from exc
    if len(parts) != n:
        raise typer.BadParameter(f"{name} must be {n} comma-separated numbers, got {value!r}")
    return parts


def _encoders(values: Optional[List[str]]) -> Optional[List[str]]:
    if not values:
        return None
    unknown = [v for v in values if v not in ENCODER_NAMES]
    if unknown:
        raise typer.BadParameter(f"unknown encoder {unknown[0]!r}; choose from {', '.join(ENCODER_NAMES)}")
    return values


def _config(path: Optional[Path], **overrides) -> ExperimentConfig:
    base = ExperimentConfig.load(path) if path is not None else ExperimentConfig()
    return base.override(**overrides)


def _out(out: Optional[Path], cfg: ExperimentConfig, command: str) -> Path:
    if out is not None:
        return out
    if cfg.output_dir is not None:
        return cfg.output_dir / command
    return settings.OUTPUT_ROOT / command


def _execute(action: Callable[[], RunManifest]) -> None:
    """Run a command, print its manifest and translate domain failures into exit codes."""
    try:
        manifest = action()
    except ConfigError as exc:
        logger.error(f"configuration error: {exc}")
        typer.echo(f"error: {exc}", err=True)
        raise typer.Exit(code=2)
    except NavWorldError as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        typer.echo(f"error: {exc}", err=True)
        raise typer.Exit(code=1)
    typer.echo(json.dumps({"command": manifest.command, "artifacts": sorted(manifest.artifacts)}, indent=2))


@app.callback()
def main(
    log_level: Annotated[Optional[str], typer.Option("--log-level", help="Override NWM_LOG_LEVEL.")] = None,
    log_to_file: Annotated[Optional[bool], typer.Option("--log-file/--no-log-file")] = None,
):
    configure_logging(
        (log_level or settings.LOG_LEVEL).upper(),
        settings.LOG_DIR,
        to_file=settings.LOG_TO_FILE if log_to_file is None else log_to_file,
    )
    torch.set_num_threads(settings.TORCH_THREADS)


@app.command("gen-data")
def gen_data(
    config: ConfigOpt = None,
    out: OutOpt = None,
    world_seed: Annotated[Optional[int], typer.Option("--world-seed")] = None,
    data_seed: Annotated[Optional[int], typer.Option("--data-seed")] = None,
    episodes: Annotated[Optional[int], typer.Option("--episodes", min=2)] = None,
    length: Annotated[Optional[int], typer.Option("--length", min=2)] = None,
):
    """Generate a trajectory corpus for one world."""

    def action() -> RunManifest:
        cfg = _config(
            config,
            **{
                "seeds.world": world_seed,
                "seeds.data": data_seed,
                "corpus.n_episodes": episodes,
                "corpus.length": length,
            },
        )
        return ExperimentService(cfg).gen_data(_out(out, cfg, "gen-data"))

    _execute(action)


@app.command()
def probe(
    config: ConfigOpt = None,
    corpus: CorpusOpt = None,
    out: OutOpt = None,
    encoder: Annotated[
        Optional[List[str]],
        typer.Option("--encoder", "-e", help=f"Repeatable; one of {', '.join(ENCODER_NAMES)}."),
    ] = None,
    horizon: Annotated[Optional[List[int]], typer.Option("--horizon", "-k", min=1, help="Repeatable.")] = None,
    method: Annotated[Optional[ProbeMethod], typer.Option("--method")] = None,
    data_seed: Annotated[Optional[int], typer.Option("--data-seed")] = None,
):
    """Fit the linear dynamics probe per token space and horizon; writes probe.csv."""
    encoders = _encoders(encoder)

    def action() -> RunManifest:
        cfg = _config(
            config,
            encoders=encoders,
            horizons=horizon or None,
            probe_method=method.value if method else None,
            **{"seeds.data": data_seed},
        )
        return ExperimentService(cfg).probe(_out(out, cfg, "probe"), corpus)

    _execute(action)


@app.command()
def train(
    config: ConfigOpt = None,
    corpus: CorpusOpt = None,
    out: OutOpt = None,
    steps: Annotated[Optional[int], typer.Option("--steps", min=0)] = None,
    encoder: Annotated[Optional[str], typer.Option("--encoder", "-e")] = None,
):
    """Train the flow-matching world model; writes a checkpoint and the loss log."""
    enc = _encoders([encoder] if encoder else None)

    def action() -> RunManifest:
        cfg = _config(config, encoder=enc[0] if enc else None, **{"train.steps": steps})
        return ExperimentService(cfg).train(_out(out, cfg, "train"), corpus)

    _execute(action)


@app.command()
def rollout(
    ckpt: Annotated[Path, typer.Option("--ckpt", help="Checkpoint directory written by train.")],
    config: ConfigOpt = None,
    corpus: CorpusOpt = None,
    out: OutOpt = None,
    episode: Annotated[Optional[int], typer.Option("--episode", min=0)] = None,
    horizon_steps: Annotated[Optional[int], typer.Option("--horizon-steps", min=1)] = None,
    noise_seed: Annotated[Optional[int], typer.Option("--noise-seed")] = None,
):
    """Sequential rollouts against ground truth; writes the per-step DINO distance curve."""

    def action() -> RunManifest:
        cfg = _config(config)
        return ExperimentService(cfg).rollout(
            _out(out, cfg, "rollout"), ckpt, corpus, episode=episode, horizon=horizon_steps, noise_seed=noise_seed
        )

    _execute(action)


@app.command()
def plan(
    goal: Annotated[str, typer.Option("--goal", help="Goal position 'x,y' in meters.")],
    config: ConfigOpt = None,
    ckpt: CkptOpt = None,
    oracle: Annotated[bool, typer.Option("--oracle", help="Plan with the simulator instead of a checkpoint.")] = False,
    corpus: CorpusOpt = None,
    out: OutOpt = None,
    world_seed: Annotated[Optional[int], typer.Option("--world-seed")] = None,
    start: Annotated[Optional[str], typer.Option("--start", help="Start pose 'x,y,theta'.")] = None,
    cem_candidates: Annotated[Optional[int], typer.Option("--cem-candidates", min=1)] = None,
    cem_iters: Annotated[Optional[int], typer.Option("--cem-iters", min=1)] = None,
    horizon: Annotated[Optional[int], typer.Option("--horizon", min=1)] = None,
):
    """Plan one action sequence toward a goal; writes plan.json."""
    if (ckpt is None) != oracle:
        raise typer.BadParameter("pass exactly one of --ckpt or --oracle")
    goal_xy = _floats(goal, 2, "--goal")
    start_pose = Pose.from_array(_floats(start, 3, "--start")) if start else None

    def action() -> RunManifest:
        cfg = _config(config)
        return ExperimentService(cfg).plan(
            _out(out, cfg, "plan"),
            goal_xy,
            ckpt_dir=ckpt,
            world_seed=world_seed,
            start=start_pose,
            corpus_dir=corpus,
            n_candidates=cem_candidates,
            n_iters=cem_iters,
            horizon_steps=horizon,
        )

    _execute(action)


@app.command("eval-nav")
def eval_nav(
    config: ConfigOpt = None,
    ckpt: CkptOpt = None,
    oracle: Annotated[bool, typer.Option("--oracle", help="Navigate with the simulator.")] = False,
    corpus: CorpusOpt = None,
    out: OutOpt = None,
    world_seed: Annotated[Optional[int], typer.Option("--world-seed")] = None,
    episodes: Annotated[Optional[int], typer.Option("--episodes", min=1)] = None,
    cem_candidates: Annotated[Optional[int], typer.Option("--cem-candidates", min=1)] = None,
    cem_iters: Annotated[Optional[int], typer.Option("--cem-iters", min=1)] = None,
):
    """Closed-loop navigation; writes nav.json and nav_episodes.csv."""
    if (ckpt is None) != oracle:
        raise typer.BadParameter("pass exactly one of --ckpt or --oracle")

    def action() -> RunManifest:
        cfg = _config(config, **{"nav.n_episodes": episodes})
        return ExperimentService(cfg).eval_nav(
            _out(out, cfg, "eval-nav"),
            ckpt_dir=ckpt,
            world_seed=world_seed,
            corpus_dir=corpus,
            n_candidates=cem_candidates,
            n_iters=cem_iters,
        )

    _execute(action)


@app.command("ablate-cond")
def ablate_cond(
    config: ConfigOpt = None,
    corpus: CorpusOpt = None,
    out: OutOpt = None,
    steps: Annotated[Optional[int], typer.Option("--steps", min=0)] = None,
):
    """Train all four conditioning modes on identical data; writes ablation.csv."""

    def action() -> RunManifest:
        cfg = _config(config, **{"train.steps": steps})
        return ExperimentService(cfg).ablate_cond(_out(out, cfg, "ablate-cond"), corpus)

    _execute(action)


@app.command("gate-analysis")
def gate_analysis(
    ckpt: Annotated[Path, typer.Option("--ckpt", help="LEARNED_GATE checkpoint directory.")],
    config: ConfigOpt = None,
    out: OutOpt = None,
):
    """Dynamics proportion of the learned gate over flow time; writes gate.csv."""

    def action() -> RunManifest:
        cfg = _config(config)
        return ExperimentService(cfg).gate_analysis(_out(out, cfg, "gate-analysis"), ckpt)

    _execute(action)


@app.command()
def verify(run: Annotated[Path, typer.Argument(help="Run directory to check.")]):
    """Re-hash every artifact recorded in a run manifest."""
    _execute(lambda: RunCrud(run).verify())


@app.command()
def serve(
    host: Annotated[str, typer.Option("--host")] = "127.0.0.1",
    port: Annotated[int, typer.Option("--port")] = 8000,
):
    """Serve the planning API for ``NWM_CHECKPOINT``."""
    import uvicorn

    uvicorn.run("app.main:app", host=host, port=port)


if __name__ == "__main__":
    sys.exit(app())
