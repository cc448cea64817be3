"""Experiment orchestration: every CLI command as one method over an ExperimentConfig."""

import time
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import ConfigError, EmptyInputError, OutOfBoundsError
from app.core.logger import logger
from app.crud.checkpoint import CheckpointCrud
from app.crud.corpus import CorpusCrud
from app.crud.run import RunCrud
from app.models.world_model import NavWorldModel
from app.schema.encoder_schema import EncoderKind, EncoderSpec, TokenGrid
from app.schema.experiment_schema import ExperimentConfig, RunManifest
from app.schema.model_schema import CheckpointMeta, CondMode, ModelConfig
from app.schema.planner_schema import CemConfig
from app.schema.train_schema import TrainConfig
from app.schema.world_schema import ActionDelta, Corpus, Episode, Pose, World
from app.services.encoder_service import (
    build_context,
    context_from_tokens,
    dino_distance,
    encode,
    encode_episode,
    parse_encoder,
)
from app.services.flow_service import FlowDynamics, TransitionCorpus, eval_fm_loss, predict_direct, rollout, train
from app.services.model_service import gate_report
from app.services.oracle_service import OracleDynamics
from app.services.planner_service import (
    cem_plan,
    evaluate_navigation,
    evaluate_open_loop,
    goal_tokens,
    navigation_tasks,
    path_ate,
    random_policy_path,
)
from app.services.probe_service import aggregate_action, probe_sweep, split_corpus
from app.services.world_service import (
    generate_world,
    in_bounds,
    normalize_actions,
    render_observation,
    sample_trajectory,
)
from app.utils.se2 import fold
from app.utils.seeding import derive_seed, rng_for


def _grid(tokens: np.ndarray, spec: EncoderSpec) -> TokenGrid:
    return TokenGrid(tokens=tokens, grid_h=spec.grid_h, grid_w=spec.grid_w)


@contextmanager
def _stage(run: RunCrud, name: str) -> Iterator[None]:
    started = time.perf_counter()
    yield
    run.record_stage(name, time.perf_counter() - started)


class ExperimentService:
    """Runs experiment commands; each writes its config, metric files and manifest into one directory."""

    def __init__(self, config: ExperimentConfig):
        self.config = config

    # derived configuration
    def world(self, seed: Optional[int] = None) -> World:
        return generate_world(self.config.seeds.world if seed is None else seed, self.config.world)

    def encoder_spec(self, kind: Optional[EncoderKind] = None) -> EncoderSpec:
        cfg = self.config
        return parse_encoder(
            (kind or cfg.encoder).value,
            seed=cfg.seeds.world,
            grid_h=cfg.world.grid_h,
            grid_w=cfg.world.grid_w,
            d_raw=cfg.world.d_raw,
            d=cfg.token_dim,
        )

    def model_config(self, cond_mode: Optional[CondMode] = None) -> ModelConfig:
        update = {"seed": self.config.seeds.model}
        if cond_mode is not None:
            update["cond_mode"] = cond_mode
        return ModelConfig.model_validate({**self.config.model.model_dump(), **update})

    def train_config(self) -> TrainConfig:
        return TrainConfig.model_validate({**self.config.train.model_dump(), "seed": self.config.seeds.data})

    def cem_config(self, **overrides) -> CemConfig:
        overrides = {key: value for key, value in overrides.items() if value is not None}
        payload = {**self.config.cem.model_dump(), "seed": self.config.seeds.planner, **overrides}
        return CemConfig.model_validate(payload)

    # data
    def generate_corpus(self) -> Corpus:
        cfg = self.config
        world = self.world()
        episodes = [
            sample_trajectory(
                world, derive_seed(cfg.seeds.data, "episode", e), cfg.corpus.length, cfg.corpus.policy, cfg.motion
            )
            for e in range(cfg.corpus.n_episodes)
        ]
        normalized, scale = normalize_actions(episodes)
        return Corpus(
            world_seed=cfg.seeds.world,
            world_config=cfg.world,
            policy=cfg.corpus.policy,
            data_seed=cfg.seeds.data,
            action_scale=scale,
            episodes=normalized,
        )

    def corpus(self, corpus_dir: Optional[Path] = None) -> Corpus:
        if corpus_dir is None:
            return self.generate_corpus()
        return CorpusCrud(corpus_dir).load()

    def split(self, corpus: Corpus) -> Tuple[List[Episode], List[Episode]]:
        return split_corpus(corpus.episodes, self.config.corpus.eval_fraction)

    def _run(self, out: Path, command: str) -> RunCrud:
        run = RunCrud(out, command)
        run.write_config(self.config)
        return run

    # commands
    def gen_data(self, out: Path) -> RunManifest:
        run = self._run(out, "gen-data")
        with _stage(run, "generate"):
            corpus = self.generate_corpus()
        with _stage(run, "save"):
            run.register(CorpusCrud(run.path_for("corpus")).save(corpus), prefix="corpus/")
        rows = []
        for index, episode in enumerate(corpus.episodes):
            poses = episode.pose_array()
            path = float(np.sum(np.hypot(*np.diff(poses[:, :2], axis=0).T)))
            rows.append((index, len(episode), path))
        run.write_csv("corpus.csv", ["episode", "n_poses", "path_length"], rows)
        run.write_json("corpus_summary.json", {"action_scale": corpus.action_scale, "n_episodes": len(corpus)})
        return run.finalize(self.config)

    def probe(self, out: Path, corpus_dir: Optional[Path] = None) -> RunManifest:
        cfg = self.config
        run = self._run(out, "probe")
        corpus = self.corpus(corpus_dir)
        specs = [self.encoder_spec(kind) for kind in cfg.encoders]
        probe_cfg = cfg.probe.model_copy(update={"seed": cfg.seeds.data})
        with _stage(run, "probe"):
            report = probe_sweep(
                corpus.episodes, specs, cfg.horizons, cfg.probe_method, probe_cfg, cfg.corpus.eval_fraction
            )
        run.write_csv(
            "probe.csv",
            ["encoder", "k", "r2", "sse", "sst", "n_pairs"],
            [(r.encoder, r.k, r.r2, r.sse, r.sst, r.n_pairs) for r in report.rows],
        )
        run.write_json("probe.json", report)
        return run.finalize(cfg)

    def _train_model(
        self, corpus: Corpus, transitions: TransitionCorpus, mcfg: ModelConfig, run: RunCrud, ckpt_name: str
    ) -> Tuple[NavWorldModel, CheckpointMeta, Dict]:
        model, log = train(transitions, self.train_config(), mcfg)
        run.record_stage(f"train:{mcfg.cond_mode.value}", log.wall_clock)
        meta = CheckpointMeta(
            model=mcfg,
            encoder=transitions.spec,
            world_seed=corpus.world_seed,
            world_config=corpus.world_config,
            action_scale=corpus.action_scale,
            params_digest=log.params_digest,
            data_digest=log.data_digest,
            train_steps=len(log.losses),
        )
        run.register(CheckpointCrud(run.path_for(ckpt_name)).save(model, meta), prefix=f"{ckpt_name}/")
        summary = {
            "params_digest": log.params_digest,
            "data_digest": log.data_digest,
            "zero_model_loss": log.zero_model_loss,
            "final_loss": log.losses[-1] if log.losses else None,
            "steps": len(log.losses),
        }
        return model, meta, {"log": log, "summary": summary}

    def train(self, out: Path, corpus_dir: Optional[Path] = None) -> RunManifest:
        run = self._run(out, "train")
        corpus = self.corpus(corpus_dir)
        train_eps, _ = self.split(corpus)
        mcfg = self.model_config()
        with _stage(run, "encode"):
            transitions = TransitionCorpus(train_eps, self.encoder_spec(), mcfg.m)
        _, _, result = self._train_model(corpus, transitions, mcfg, run, "checkpoint")
        log = result["log"]
        run.write_csv(
            "train_log.csv",
            ["step", "loss", "lr"],
            [(i, loss, lr) for i, (loss, lr) in enumerate(zip(log.losses, log.lrs))],
        )
        run.write_json("train.json", result["summary"])
        return run.finalize(self.config)

    def rollout_errors(
        self,
        model: NavWorldModel,
        episodes: Sequence[Episode],
        spec: EncoderSpec,
        horizon: int,
        noise_seed: int,
        labels: Optional[Sequence[int]] = None,
    ) -> Tuple[np.ndarray, List[Tuple[int, int, float]], List[Tuple[int, int, float, float]]]:
        """
        Sequential rollouts along each episode's recorded actions.

        Returns the per-step mean DINO distance to the true tokens, the
        per-episode rows (episode, step, distance) and, at the final horizon,
        (episode, horizon, sequential, direct) rows.
        """
        m = model.config.m
        labels = list(labels) if labels is not None else list(range(len(episodes)))
        per_step, rows, direct_rows = [], [], []
        for label, episode in zip(labels, episodes):
            i = m - 1
            if i + horizon >= len(episode):
                logger.debug(f"episode {label} too short for a {horizon}-step rollout")
                continue
            ctx = build_context(episode, i, m, spec)
            truth = encode_episode(episode, spec)
            seeds = [derive_seed(noise_seed, "rollout", label, j) for j in range(horizon)]
            predicted = rollout(model, ctx, episode.actions[i : i + horizon], seeds, self.config.euler_steps)
            distances = [dino_distance(z, _grid(truth[i + 1 + j], spec)) for j, z in enumerate(predicted)]
            per_step.append(distances)
            rows.extend((label, j + 1, dist) for j, dist in enumerate(distances))
            direct = predict_direct(
                model, ctx, aggregate_action(episode, i, horizon), derive_seed(noise_seed, "direct", label),
                self.config.euler_steps,
            )
            direct_rows.append((label, horizon, distances[-1], dino_distance(direct, _grid(truth[i + horizon], spec))))
        if not per_step:
            raise EmptyInputError(f"no episode is longer than {m - 1 + horizon} steps")
        return np.mean(np.asarray(per_step), axis=0), rows, direct_rows

    def _eval_episodes(self, corpus: Corpus, episode: Optional[int]) -> Tuple[List[Episode], List[int]]:
        if episode is not None:
            if not 0 <= episode < len(corpus):
                raise ConfigError(f"episode {episode} outside corpus of {len(corpus)}")
            return [corpus.episodes[episode]], [episode]
        train_eps, eval_eps = self.split(corpus)
        eval_eps = eval_eps[: self.config.eval_episodes]
        return eval_eps, list(range(len(train_eps), len(train_eps) + len(eval_eps)))

    def rollout(
        self,
        out: Path,
        ckpt_dir: Path,
        corpus_dir: Optional[Path] = None,
        episode: Optional[int] = None,
        horizon: Optional[int] = None,
        noise_seed: Optional[int] = None,
    ) -> RunManifest:
        run = self._run(out, "rollout")
        model, meta = CheckpointCrud(ckpt_dir).load()
        corpus = self.corpus(corpus_dir)
        episodes, labels = self._eval_episodes(corpus, episode)
        horizon = horizon or self.config.rollout_horizon
        noise = self.config.seeds.noise if noise_seed is None else noise_seed
        with _stage(run, "rollout"):
            curve, rows, direct_rows = self.rollout_errors(model, episodes, meta.encoder, horizon, noise, labels)
        run.write_csv("rollout.csv", ["step", "dino_distance"], [(j + 1, d) for j, d in enumerate(curve)])
        run.write_csv("rollout_episodes.csv", ["episode", "step", "dino_distance"], rows)
        run.write_csv("rollout_direct.csv", ["episode", "horizon", "sequential", "direct"], direct_rows)
        return run.finalize(self.config)

    def _dynamics(
        self,
        ckpt_dir: Optional[Path],
        world_seed: Optional[int],
        corpus_dir: Optional[Path],
        start: Pose,
        euler_steps: int,
    ):
        """(world, dynamics, spec, m, action_scale) for a checkpoint, or the oracle when none is given."""
        if ckpt_dir is not None:
            model, meta = CheckpointCrud(ckpt_dir).load()
            world = generate_world(meta.world_seed if world_seed is None else world_seed, meta.world_config)
            return world, FlowDynamics(model, euler_steps), meta.encoder, meta.model.m, meta.action_scale
        corpus = self.corpus(corpus_dir)
        world = self.world(world_seed)
        spec = self.encoder_spec()
        oracle = OracleDynamics(world, spec, start, corpus.action_scale)
        return world, oracle, spec, self.config.model.m, corpus.action_scale

    def plan(
        self,
        out: Path,
        goal: Tuple[float, float],
        ckpt_dir: Optional[Path] = None,
        world_seed: Optional[int] = None,
        start: Optional[Pose] = None,
        corpus_dir: Optional[Path] = None,
        **cem_overrides,
    ) -> RunManifest:
        run = self._run(out, "plan")
        goal_xy = np.asarray(goal, dtype=np.float64)
        if start is None:
            start = Pose(x=0.0, y=0.0, theta=float(np.arctan2(goal_xy[1], goal_xy[0])))
        cem_cfg = self.cem_config(**cem_overrides)
        world, dynamics, spec, m, scale = self._dynamics(ckpt_dir, world_seed, corpus_dir, start, cem_cfg.euler_steps)
        if not in_bounds(world, goal_xy):
            raise OutOfBoundsError(f"goal {tuple(goal_xy)} outside {world.bounds}")
        first = encode(render_observation(world, start), spec).tokens
        ctx = context_from_tokens(np.stack([first] * m), spec.grid_h, spec.grid_w)
        with _stage(run, "plan"):
            result = cem_plan(dynamics.anchored(start), ctx, goal_tokens(world, spec, start, goal_xy), cem_cfg)
        path = fold(start.as_array(), np.stack([a.scaled(scale).as_array() for a in result.best_actions]))
        run.write_json("plan.json", result)
        run.write_csv("plan_path.csv", ["step", "x", "y", "theta"], [(j, *pose) for j, pose in enumerate(path)])
        return run.finalize(self.config)

    def eval_nav(
        self,
        out: Path,
        ckpt_dir: Optional[Path] = None,
        world_seed: Optional[int] = None,
        corpus_dir: Optional[Path] = None,
        **cem_overrides,
    ) -> RunManifest:
        cfg = self.config
        run = self._run(out, "eval-nav")
        cem_cfg = self.cem_config(**cem_overrides)
        origin = Pose(x=0.0, y=0.0)
        world, dynamics, spec, m, scale = self._dynamics(ckpt_dir, world_seed, corpus_dir, origin, cem_cfg.euler_steps)
        tasks = navigation_tasks(world, cfg.nav, cfg.seeds.planner)
        with _stage(run, "navigate"):
            report = evaluate_navigation(world, dynamics, cem_cfg, cfg.nav, spec, m, scale, cfg.seeds.planner, tasks)

        rows, planner_ates, random_ates = [], [], []
        for index, ((start, goal_xy), result) in enumerate(zip(tasks, report.episodes)):
            walk = random_policy_path(
                world, start, max(1, result.steps), cem_cfg, scale, derive_seed(cfg.seeds.planner, "random", index)
            )
            planner_ates.append(path_ate(result.poses, goal_xy))
            random_ates.append(path_ate(walk, goal_xy))
            rows.append(
                (
                    index, result.success, result.path_length, result.shortest_length, result.final_distance,
                    result.steps, result.stop_reason, planner_ates[-1], random_ates[-1],
                )
            )
        run.write_csv(
            "nav_episodes.csv",
            ["episode", "success", "path_length", "shortest_length", "final_distance", "steps", "stop_reason",
             "path_ate", "random_ate"],
            rows,
        )
        run.write_json(
            "nav.json",
            {
                "sr": report.sr,
                "spl": report.spl,
                "n_episodes": len(report.episodes),
                "path_ate": float(np.mean(planner_ates)),
                "random_ate": float(np.mean(random_ates)),
            },
        )
        return run.finalize(cfg)

    def ablate_cond(self, out: Path, corpus_dir: Optional[Path] = None) -> RunManifest:
        """Train every conditioning mode on identical data and compare rollouts and open-loop planning."""
        cfg = self.config
        run = self._run(out, "ablate-cond")
        corpus = self.corpus(corpus_dir)
        train_eps, eval_eps = self.split(corpus)
        eval_eps = eval_eps[: cfg.eval_episodes]
        labels = list(range(len(train_eps), len(train_eps) + len(eval_eps)))
        spec = self.encoder_spec()
        world = generate_world(corpus.world_seed, corpus.world_config)
        transitions = TransitionCorpus(train_eps, spec, cfg.model.m)
        held_out = TransitionCorpus(eval_eps, spec, cfg.model.m)
        held_out_triples = np.column_stack([held_out.anchors, np.ones(len(held_out.anchors), dtype=np.int64)])
        horizon = min(cfg.rollout_horizon, cfg.cem.horizon_steps)
        cem_cfg = self.cem_config()

        metrics: Dict[str, Dict[str, float]] = {}
        curves, fairness = [], {}
        for mode in CondMode:
            model, meta, result = self._train_model(
                corpus, transitions, self.model_config(mode), run, f"checkpoints/{mode.value}"
            )
            curve, _, _ = self.rollout_errors(model, eval_eps, spec, horizon, cfg.seeds.noise, labels)
            with _stage(run, f"open-loop:{mode.value}"):
                errors = evaluate_open_loop(model, world, eval_eps, spec, cfg.model.m, cem_cfg)
            held_out_loss, _ = eval_fm_loss(model, held_out, held_out_triples, n_draws=4, seed=cfg.seeds.noise)
            curves.extend((mode.value, j + 1, d) for j, d in enumerate(curve))
            metrics[mode.value] = {
                "final_train_loss": result["summary"]["final_loss"],
                "heldout_fm_loss": held_out_loss,
                "rollout_dino_mean": float(np.mean(curve)),
                "rollout_dino_final": float(curve[-1]),
                "plan_ate": errors.ate,
                "plan_rpe": errors.rpe,
            }
            fairness[mode.value] = {"data_digest": meta.data_digest, "params_digest": meta.params_digest}
            logger.info(f"ablation {mode.value}: rollout {np.mean(curve):.4f}, ATE {errors.ate:.3f}")

        names = [
            "final_train_loss",
            "heldout_fm_loss",
            "rollout_dino_mean",
            "rollout_dino_final",
            "plan_ate",
            "plan_rpe",
        ]
        run.write_csv(
            "ablation.csv",
            ["metric", "mode", "value"],
            [(name, mode.value, metrics[mode.value][name]) for name in names for mode in CondMode],
        )
        run.write_csv("ablation_curves.csv", ["mode", "step", "dino_distance"], curves)
        digests = {entry["data_digest"] for entry in fairness.values()}
        run.write_json("ablation.json", {"modes": fairness, "data_digests_equal": len(digests) == 1})
        return run.finalize(cfg)

    def gate_analysis(self, out: Path, ckpt_dir: Path) -> RunManifest:
        cfg = self.config
        run = self._run(out, "gate-analysis")
        model, _ = CheckpointCrud(ckpt_dir).load()
        rng = rng_for(cfg.seeds.data, "gate-samples")
        cem = cfg.cem
        samples = [
            ActionDelta.from_array(
                rng.uniform(cem.action_low, cem.action_high), k=int(rng.integers(1, cfg.train.k_max + 1))
            )
            for _ in range(cfg.gate_samples)
        ]
        t_grid = np.linspace(0.0, 1.0, cfg.gate_grid_points)
        with _stage(run, "gate"):
            report = gate_report(model, t_grid, samples)
        run.write_csv(
            "gate.csv",
            ["t", "p_dyn_median", "p_dyn_iqr", "r_dyn_median", "r_dyn_iqr"],
            [(r.t, r.p_dyn_median, r.p_dyn_iqr, r.r_dyn_median, r.r_dyn_iqr) for r in report.rows],
        )
        return run.finalize(cfg)
