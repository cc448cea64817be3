import math

import numpy as np
import pytest

from app.core.exceptions import ConstantTargetError, EmptyInputError, ShapeError, SingularSystemError
from app.schema.encoder_schema import TokenGrid
from app.schema.probe_schema import ProbeMethod, ProbePair, ProbeParams, ProbeTrainConfig
from app.schema.world_schema import ActionDelta, RendererKind, WorldConfig
from app.services.encoder_service import parse_encoder
from app.services.probe_service import (
    aggregate_action,
    build_probe_pairs,
    evaluate_probe,
    fit_probe_closed_form,
    fit_probe_sgd,
    probe_predict,
    probe_sweep,
    r2_components,
    r2_global,
    split_corpus,
)
from app.services.world_service import apply_action, generate_world, normalize_actions, sample_trajectory
from app.utils.seeding import derive_seed


def _planted_pairs(rng, A, B, n=40, L=6, noise=0.0):
    d = A.shape[0]
    pairs = []
    for _ in range(n):
        z = rng.normal(size=(L, d))
        a = rng.normal(size=3)
        target = z + z @ A.T + a @ B + noise * rng.normal(size=(L, d))
        pairs.append(
            ProbePair(
                z_i=TokenGrid(tokens=z, grid_h=1, grid_w=L),
                z_target=TokenGrid(tokens=target, grid_h=1, grid_w=L),
                action=ActionDelta.from_array(a),
                k=1,
            )
        )
    return pairs


def test_probe_predict_matches_dense_oracle(rng):
    L, d = 4, 3
    params = ProbeParams(A=rng.normal(size=(d, d)), B=rng.normal(size=(3, d)))
    z = TokenGrid(tokens=rng.normal(size=(L, d)), grid_h=2, grid_w=2)
    a = ActionDelta.from_array(rng.normal(size=3))
    expected = np.empty((L, d))
    for l in range(L):
        for c in range(d):
            value = z.tokens[l, c]
            value += sum(params.A[c, j] * z.tokens[l, j] for j in range(d))
            value += sum(params.B[j, c] * a.as_array()[j] for j in range(3))
            expected[l, c] = value
    np.testing.assert_allclose(probe_predict(params, z, a).tokens, expected, atol=1e-12)


def test_zero_probe_is_identity(rng):
    z = TokenGrid(tokens=rng.normal(size=(4, 3)), grid_h=2, grid_w=2)
    out = probe_predict(ProbeParams.zeros(3), z, ActionDelta(u_x=1.0))
    np.testing.assert_array_equal(out.tokens, z.tokens)
    with pytest.raises(ShapeError):
        probe_predict(ProbeParams.zeros(5), z, ActionDelta(u_x=1.0))


def test_closed_form_recovers_planted_parameters(rng):
    A = rng.normal(size=(3, 3)) * 0.2
    B = rng.normal(size=(3, 3))
    params = fit_probe_closed_form(_planted_pairs(rng, A, B))
    np.testing.assert_allclose(params.A, A, atol=1e-8)
    np.testing.assert_allclose(params.B, B, atol=1e-8)


def test_closed_form_rejects_underdetermined_systems(rng):
    A, B = np.zeros((3, 3)), np.zeros((3, 3))
    with pytest.raises(SingularSystemError):
        fit_probe_closed_form(_planted_pairs(rng, A, B, n=1, L=2))
    with pytest.raises(EmptyInputError):
        fit_probe_closed_form([])


def test_sgd_fit_agrees_with_closed_form(rng):
    A = rng.normal(size=(3, 3)) * 0.2
    B = rng.normal(size=(3, 3)) * 0.5
    pairs = _planted_pairs(rng, A, B, n=60)
    cfg = ProbeTrainConfig(steps=1500, lr=2e-2, warmup_steps=50, weight_decay=0.0, batch_pairs=None)
    sgd = fit_probe_sgd(pairs, cfg)
    exact = fit_probe_closed_form(pairs)
    r2_sgd = evaluate_probe(sgd, pairs)[0]
    assert r2_sgd >= 0.999
    assert abs(r2_sgd - evaluate_probe(exact, pairs)[0]) <= 1e-3
    np.testing.assert_allclose(sgd.A, exact.A, atol=1e-2)
    np.testing.assert_allclose(sgd.B, exact.B, atol=1e-2)


def test_sgd_fit_is_deterministic(rng):
    pairs = _planted_pairs(rng, np.eye(3) * 0.1, np.ones((3, 3)), n=20)
    cfg = ProbeTrainConfig(steps=50, batch_pairs=8, seed=4)
    first, second = fit_probe_sgd(pairs, cfg), fit_probe_sgd(pairs, cfg)
    np.testing.assert_array_equal(first.A, second.A)
    np.testing.assert_array_equal(first.B, second.B)


def test_r2_examples(rng):
    target = rng.normal(size=(5, 4))
    assert r2_global(target, target) == 1.0
    mean_pred = np.full_like(target, target.mean())
    assert r2_global(mean_pred, target) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ConstantTargetError):
        r2_global(target, np.ones_like(target))
    with pytest.raises(ShapeError):
        r2_global(target, target[:-1])


def test_r2_matches_naive_summation(rng):
    for _ in range(100):
        n = int(rng.integers(2, 40))
        pred, target = rng.normal(size=n), rng.normal(size=n)
        mean = sum(target) / n
        sse = sum((t - p) ** 2 for t, p in zip(target, pred))
        sst = sum((t - mean) ** 2 for t in target)
        r2, got_sse, got_sst = r2_components(pred, target)
        assert abs(r2 - (1.0 - sse / sst)) <= 1e-10
        assert got_sse == pytest.approx(sse, rel=1e-12)
        assert got_sst == pytest.approx(sst, rel=1e-12)


def test_aggregate_action_composes_unit_steps(small_corpus):
    episodes, _ = small_corpus
    episode = episodes[1]
    action = aggregate_action(episode, 2, 3)
    assert action.k == 3
    pose = apply_action(episode.poses[2], action.scaled(episode.action_scale))
    assert pose.as_array() == pytest.approx(episode.poses[5].as_array(), abs=1e-10)


def test_build_probe_pairs_counts(small_corpus, linear_spec):
    episodes, _ = small_corpus
    pairs = build_probe_pairs(episodes[:2], linear_spec, 3)
    assert len(pairs) == sum(len(ep) - 3 for ep in episodes[:2])
    assert all(p.k == 3 and p.action.k == 3 for p in pairs)


def test_split_corpus_is_trajectory_level(small_corpus):
    episodes, _ = small_corpus
    train, held_out = split_corpus(episodes, 0.34)
    assert len(train) == 4 and len(held_out) == 2
    assert held_out[0] is episodes[4]


def _linear_corpus(data_seed: int, n_episodes: int = 10, length: int = 40):
    world = generate_world(0, WorldConfig())
    episodes = [sample_trajectory(world, derive_seed(data_seed, "episode", e), length) for e in range(n_episodes)]
    return normalize_actions(episodes)[0]


def test_linear_renderer_probe_recovers_dynamics():
    corpus = _linear_corpus(0)
    spec = parse_encoder("linear", seed=0, grid_h=8, grid_w=8, d_raw=8, d=32)
    report = probe_sweep(corpus, [spec], [1], method=ProbeMethod.CLOSED_FORM)
    assert report.get("linear", 1).r2 >= 0.99


@pytest.mark.slow
def test_probe_acceptance_linear_space():
    corpus = _linear_corpus(0, n_episodes=20)
    spec = parse_encoder("linear", seed=0, grid_h=8, grid_w=8, d_raw=8, d=32)
    exact = probe_sweep(corpus, [spec], [1, 8], method=ProbeMethod.CLOSED_FORM)
    sgd = probe_sweep(corpus, [spec], [1], method=ProbeMethod.SGD)
    assert exact.get("linear", 1).r2 >= 0.99
    assert exact.get("linear", 8).r2 >= 0.95
    assert abs(sgd.get("linear", 1).r2 - exact.get("linear", 1).r2) <= 1e-3


@pytest.mark.slow
@pytest.mark.parametrize("data_seed", [0, 1, 2])
def test_shuffled_space_loses_linear_structure(data_seed):
    corpus = _linear_corpus(data_seed)
    specs = [
        parse_encoder(name, seed=0, grid_h=8, grid_w=8, d_raw=8, d=32) for name in ("linear", "shuffled")
    ]
    horizons = [1, 2, 4, 8]
    report = probe_sweep(corpus, specs, horizons, method=ProbeMethod.CLOSED_FORM)
    for k in horizons:
        assert report.get("linear", k).r2 > report.get("shuffled", k).r2


def test_experiment_scope_shuffle_keeps_probe_r2():
    corpus = _linear_corpus(3, n_episodes=6, length=20)
    linear = parse_encoder("linear", seed=0, grid_h=8, grid_w=8, d_raw=8, d=32)
    shuffled = parse_encoder("shuffled", seed=0, grid_h=8, grid_w=8, d_raw=8, d=32)
    shuffled = shuffled.model_copy(update={"shuffle_scope": "experiment"})
    report = probe_sweep(corpus, [linear, shuffled], [1], method=ProbeMethod.CLOSED_FORM)
    assert math.isclose(report.get("linear", 1).r2, report.get("shuffled", 1).r2, abs_tol=1e-9)


def test_closed_form_residuals_are_orthogonal_to_regressors(rng):
    A = rng.normal(size=(3, 3)) * 0.2
    B = rng.normal(size=(3, 3))
    pairs = _planted_pairs(rng, A, B, n=30, noise=0.5)
    params = fit_probe_closed_form(pairs)
    z = np.stack([pair.z_i.tokens for pair in pairs])
    target = np.stack([pair.z_target.tokens for pair in pairs])
    actions = np.stack([pair.action.as_array() for pair in pairs])

    regressors = np.concatenate([z, np.broadcast_to(actions[:, None, :], z.shape[:2] + (3,))], axis=-1).reshape(-1, 6)
    residuals = (target - (z + z @ params.A.T + (actions @ params.B)[:, None, :])).reshape(-1, 3)
    assert np.linalg.norm(residuals) > 1.0
    inner = regressors.T @ residuals
    bound = 1e-6 * np.outer(np.linalg.norm(regressors, axis=0), np.linalg.norm(residuals, axis=0))
    assert np.all(np.abs(inner) < bound)


@pytest.mark.slow
def test_nonlinear_renderer_probe_degrades_with_horizon():
    world = generate_world(0, WorldConfig(renderer=RendererKind.NONLINEAR))
    spec = parse_encoder("linear", seed=0, grid_h=8, grid_w=8, d_raw=8, d=32)
    horizons = [1, 2, 4, 8]
    curves = []
    for data_seed in (0, 1, 2):
        episodes = [sample_trajectory(world, derive_seed(data_seed, "episode", e), 40) for e in range(10)]
        corpus = normalize_actions(episodes)[0]
        report = probe_sweep(corpus, [spec], horizons, method=ProbeMethod.CLOSED_FORM)
        curves.append([report.get("linear", k).r2 for k in horizons])
    mean_curve = np.mean(curves, axis=0)
    assert np.all(np.diff(mean_curve) <= 0.01)
    assert mean_curve[-1] < mean_curve[0]
