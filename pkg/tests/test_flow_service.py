import numpy as np
import pytest
import torch

from app.core.exceptions import (
    ConfigError,
    DivergenceError,
    EmptyInputError,
    NumericError,
    OutOfBoundsError,
    RangeError,
    ShapeError,
)
from app.schema.encoder_schema import TokenGrid
from app.schema.model_schema import CondMode
from app.schema.train_schema import TrainConfig
from app.schema.world_schema import ActionDelta, Pose
from app.services.encoder_service import build_context, dino_distance, encode_episode
from app.services.flow_service import (
    FlowDynamics,
    TransitionCorpus,
    euler_integrate,
    euler_sample,
    eval_fm_loss,
    fm_loss,
    grad_fm_loss,
    interpolate,
    make_flow_batch,
    make_flow_sample,
    noise_grid,
    predict_direct,
    rollout,
    target_velocity,
    train,
)
from app.services.model_service import build_model, params_digest
from app.services.oracle_service import OracleDynamics
from app.services.probe_service import aggregate_action
from tests.conftest import TOKEN_DIM, randomize_zero_init, tiny_model_config

L = 16


def _batch(batch=2, dtype=torch.float64, seed=0):
    g = torch.Generator().manual_seed(seed)
    ctx = torch.randn(batch, 2, L, TOKEN_DIM, generator=g, dtype=dtype)
    z0 = torch.randn(batch, L, TOKEN_DIM, generator=g, dtype=dtype)
    z1 = torch.randn(batch, L, TOKEN_DIM, generator=g, dtype=dtype)
    action = torch.randn(batch, 3, generator=g, dtype=dtype)
    k = torch.arange(1, batch + 1, dtype=dtype)
    t = torch.rand(batch, generator=g, dtype=dtype)
    return make_flow_batch(ctx, z0, action, k, z1, t)


def _random_model(mode=CondMode.LEARNED_GATE, seed=0):
    model = build_model(tiny_model_config(mode)).double()
    randomize_zero_init(model, seed=seed)
    return model


def test_interpolation_examples():
    z0, z1 = np.array([0.0, 2.0]), np.array([4.0, -2.0])
    np.testing.assert_allclose(interpolate(z0, z1, 0.0), z0)
    np.testing.assert_allclose(interpolate(z0, z1, 1.0), z1)
    np.testing.assert_allclose(interpolate(z0, z1, 0.25), [1.0, 1.0])
    np.testing.assert_allclose(target_velocity(z0, z1), [4.0, -4.0])


def test_interpolation_errors():
    with pytest.raises(RangeError):
        interpolate(np.zeros(2), np.ones(2), 1.5)
    with pytest.raises(ShapeError):
        interpolate(np.zeros(2), np.ones(3), 0.5)
    with pytest.raises(ShapeError):
        target_velocity(np.zeros(2), np.ones(3))


def test_flow_sample_lies_on_the_path(rng):
    z0, z1 = rng.normal(size=(L, TOKEN_DIM)), rng.normal(size=(L, TOKEN_DIM))
    sample = make_flow_sample(z0, z1, 0.3)
    np.testing.assert_allclose(sample.z_t + (1 - sample.t) * sample.u, z1, atol=1e-12)


def test_zero_model_loss_is_mean_squared_target():
    model = build_model(tiny_model_config()).double()
    batch = _batch(batch=3)
    loss = fm_loss(model, batch)
    torch.testing.assert_close(loss, torch.mean(batch.u**2))


def test_batch_loss_averages_single_item_losses():
    model = _random_model()
    batch = _batch(batch=2)
    pair = fm_loss(model, batch)
    singles = [fm_loss(model, batch.select(slice(i, i + 1))) for i in range(2)]
    torch.testing.assert_close(pair, (singles[0] + singles[1]) / 2)


def test_empty_batch_is_rejected():
    model = build_model(tiny_model_config()).double()
    with pytest.raises(EmptyInputError):
        fm_loss(model, _batch(batch=2).select(slice(0, 0)))


@pytest.mark.parametrize("mode", list(CondMode))
def test_gradients_match_finite_differences(mode):
    model = _random_model(mode, seed=3)
    batch = _batch(batch=2, seed=1)
    grads = grad_fm_loss(model, batch)
    params = dict(model.named_parameters())
    names = sorted(name for name, p in params.items() if p.requires_grad)
    offsets = np.cumsum([0] + [params[name].numel() for name in names])
    g = torch.Generator().manual_seed(7)
    chosen = sorted(torch.randperm(int(offsets[-1]), generator=g)[:20].tolist())
    assert len(chosen) == 20
    eps = 1e-5
    for position in chosen:
        slot = int(np.searchsorted(offsets, position, side="right")) - 1
        name = names[slot]
        p = params[name]
        idx = tuple(int(i) for i in np.unravel_index(position - int(offsets[slot]), tuple(p.shape)))
        with torch.no_grad():
            original = p[idx].item()
            p[idx] = original + eps
            plus = fm_loss(model, batch).item()
            p[idx] = original - eps
            minus = fm_loss(model, batch).item()
            p[idx] = original
        numeric = (plus - minus) / (2 * eps)
        analytic = grads[name][idx].item()
        assert abs(numeric - analytic) <= 1e-4 * max(abs(numeric), abs(analytic)) + 1e-8, name


def test_scaled_target_scales_zero_model_gradient():
    model = _random_model(seed=2)
    with torch.no_grad():
        model.head.final_layer.linear.weight.zero_()
        model.head.final_layer.linear.bias.zero_()
    batch = _batch(batch=2, seed=4)
    scaled = type(batch)(z_t=batch.z_t, t=batch.t, ctx=batch.ctx, action=batch.action, k=batch.k, u=3.0 * batch.u)
    base = grad_fm_loss(model, batch)["head.final_layer.linear.bias"]
    triple = grad_fm_loss(model, scaled)["head.final_layer.linear.bias"]
    torch.testing.assert_close(triple, 3.0 * base)


def test_euler_constant_field():
    z1 = torch.zeros(3, dtype=torch.float64)
    z0 = euler_integrate(lambda z, t: torch.full_like(z, 2.0), z1, steps=7)
    torch.testing.assert_close(z0, torch.full_like(z1, -2.0))


def test_euler_recovers_straight_path_target():
    g = torch.Generator().manual_seed(0)
    target = torch.randn(L, TOKEN_DIM, generator=g, dtype=torch.float64)
    z1 = torch.randn(L, TOKEN_DIM, generator=g, dtype=torch.float64)
    for steps in (1, 5, 50):
        z0 = euler_integrate(lambda z, t: (z - target) / t, z1, steps)
        assert torch.max(torch.abs(z0 - target)) < 1e-5


def test_euler_errors():
    with pytest.raises(ConfigError):
        euler_integrate(lambda z, t: z, torch.zeros(2), steps=0)
    with pytest.raises(NumericError):
        euler_integrate(lambda z, t: torch.full_like(z, float("nan")), torch.zeros(2), steps=3)


def test_noise_grid_is_seeded():
    torch.testing.assert_close(noise_grid(5, L, TOKEN_DIM), noise_grid(5, L, TOKEN_DIM))
    assert not torch.allclose(noise_grid(5, L, TOKEN_DIM), noise_grid(6, L, TOKEN_DIM))


def test_untrained_model_sample_returns_noise(small_corpus, linear_spec):
    episodes, _ = small_corpus
    model = build_model(tiny_model_config())
    ctx = build_context(episodes[0], 3, 2, linear_spec)
    z1 = ctx.frames[-1].model_copy(update={"tokens": noise_grid(0, L, TOKEN_DIM).numpy()})
    out = euler_sample(model, ctx, episodes[0].actions[3], 1, z1, steps=4)
    np.testing.assert_allclose(out.tokens, z1.tokens, atol=1e-6)


def test_transition_corpus(small_corpus, linear_spec):
    episodes, _ = small_corpus
    corpus = TransitionCorpus(episodes, linear_spec, m=2)
    assert len(corpus) == sum(len(ep) - 2 for ep in episodes)
    triples = corpus.sample_triples(np.random.default_rng(0), 32, 8)
    assert triples.shape == (32, 3)
    lengths = np.array([len(episodes[e]) for e in triples[:, 0]])
    assert np.all(triples[:, 1] + triples[:, 2] <= lengths - 1)
    assert np.all(triples[:, 2] >= 1)
    e, i, k = triples[0]
    np.testing.assert_allclose(corpus.action(e, i, k), aggregate_action(episodes[e], i, k).as_array(), atol=1e-12)
    ctx, target, actions, ks = corpus.arrays(triples[:4])
    assert ctx.shape == (4, 2, L, TOKEN_DIM) and target.shape == (4, L, TOKEN_DIM)

    fixed = corpus.fixed(5)
    assert len(fixed) == 5
    assert np.all(fixed.sample_triples(np.random.default_rng(0), 16, 8)[:, 2] == 1)
    with pytest.raises(ConfigError):
        corpus.fixed(10_000)


def test_train_with_zero_steps_returns_initial_model(small_corpus, linear_spec):
    episodes, _ = small_corpus
    corpus = TransitionCorpus(episodes, linear_spec, m=2)
    mcfg = tiny_model_config()
    model, log = train(corpus, TrainConfig(steps=0), mcfg)
    assert log.losses == []
    assert params_digest(model) == params_digest(build_model(mcfg))


def test_train_rejects_context_mismatch(small_corpus, linear_spec):
    episodes, _ = small_corpus
    corpus = TransitionCorpus(episodes, linear_spec, m=3)
    with pytest.raises(ShapeError):
        train(corpus, TrainConfig(steps=1), tiny_model_config())


def test_training_is_deterministic(small_corpus, linear_spec):
    episodes, _ = small_corpus
    corpus = TransitionCorpus(episodes, linear_spec, m=2)
    cfg = TrainConfig(steps=5, batch_size=4, lr_initial=1e-3, lr_final=1e-4, seed=3)
    first_model, first = train(corpus, cfg, tiny_model_config())
    second_model, second = train(corpus, cfg, tiny_model_config())
    assert first.losses == second.losses
    assert first.params_digest == second.params_digest == params_digest(second_model)
    assert first.data_digest == second.data_digest
    assert first.lrs[0] == pytest.approx(1e-3)
    assert first.zero_model_loss == pytest.approx(first.losses[0])


def test_non_finite_velocity_is_a_divergence(small_corpus, linear_spec):
    episodes, _ = small_corpus
    corpus = TransitionCorpus(episodes, linear_spec, m=2)
    model = build_model(tiny_model_config())
    with torch.no_grad():
        model.head.final_layer.linear.bias.fill_(float("nan"))
    with pytest.raises(DivergenceError) as info:
        train(corpus, TrainConfig(steps=3, batch_size=2), tiny_model_config(), model=model)
    assert info.value.step == 0


@pytest.fixture(scope="module")
def overfit_run(small_corpus, linear_spec):
    """Model trained on the first 8 single-step transitions, with its corpus and config."""
    episodes, _ = small_corpus
    corpus = TransitionCorpus(episodes, linear_spec, m=2)
    mcfg = tiny_model_config(width_backbone=32, width_head=64, heads_head=4)
    cfg = TrainConfig(steps=5000, batch_size=8, lr_initial=2e-3, lr_final=1e-5, fixed_transitions=8, log_every=500)
    model, log = train(corpus, cfg, mcfg)
    return model, log, corpus, mcfg


@pytest.mark.slow
def test_overfits_fixed_transitions(overfit_run):
    model, log, corpus, _ = overfit_run
    triples = np.column_stack([corpus.anchors[:8], np.ones(8, dtype=np.int64)])
    loss, zero_model_loss = eval_fm_loss(model, corpus, triples, n_draws=32, seed=5)
    assert loss < 0.05 * zero_model_loss
    tenth = len(log.losses) // 10
    assert np.median(log.losses[-tenth:]) < np.median(log.losses[:tenth])


@pytest.mark.slow
def test_overfit_model_rolls_out_close_to_ground_truth(overfit_run, small_corpus, linear_spec):
    model, _, _, mcfg = overfit_run
    episodes, _ = small_corpus
    episode = episodes[0]
    i = 1
    truth = encode_episode(episode, linear_spec)
    ctx = build_context(episode, i, 2, linear_spec)
    plan = episode.actions[i : i + 4]
    seeds = [21, 22, 23, 24]

    def mean_distance(model_under_test):
        predicted = rollout(model_under_test, ctx, plan, seeds, euler_steps=50)
        return np.mean([dino_distance(z, TokenGrid.like(truth[i + j + 1], z)) for j, z in enumerate(predicted)])

    assert mean_distance(model) < 0.25 * mean_distance(build_model(mcfg))


def test_rollout_is_deterministic_and_keeps_window(small_corpus, linear_spec):
    episodes, _ = small_corpus
    model = build_model(tiny_model_config())
    randomize_zero_init(model, seed=5, std=0.05)
    ctx = build_context(episodes[0], 1, 2, linear_spec)
    plan = episodes[0].actions[1:5]
    seeds = [11, 12, 13, 14]
    first = rollout(model, ctx, plan, seeds, euler_steps=3)
    second = rollout(FlowDynamics(model, 3), ctx, plan, seeds, euler_steps=3)
    assert len(first) == 4
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.tokens, b.tokens)
        assert a.tokens.shape == (L, TOKEN_DIM)
    with pytest.raises(ConfigError):
        rollout(model, ctx, plan, seeds[:2])
    with pytest.raises(EmptyInputError):
        rollout(model, ctx, [], [])


def test_oracle_rollout_matches_ground_truth(small_world, small_corpus, linear_spec):
    episodes, scale = small_corpus
    episode = episodes[2]
    i = 1
    truth = encode_episode(episode, linear_spec)
    ctx = build_context(episode, i, 2, linear_spec)
    oracle = OracleDynamics(small_world, linear_spec, episode.poses[i], scale)
    plan = episode.actions[i : i + 6]
    predicted = rollout(oracle, ctx, plan, list(range(6)))
    for j, z in enumerate(predicted):
        assert dino_distance(z, TokenGrid.like(truth[i + j + 1], z)) <= 1e-12

    direct = predict_direct(oracle, ctx, aggregate_action(episode, i, 4), noise_seed=0)
    np.testing.assert_allclose(direct.tokens, truth[i + 4], atol=1e-9)


def test_oracle_rollout_leaving_the_world_is_out_of_bounds(small_world, small_corpus, linear_spec):
    episodes, _ = small_corpus
    ctx = build_context(episodes[0], 1, 2, linear_spec)
    oracle = OracleDynamics(small_world, linear_spec, Pose(x=7.5, y=0.0, theta=0.0), action_scale=1.0)
    plan = [ActionDelta(u_x=0.2), ActionDelta(u_x=1.0)]
    with pytest.raises(OutOfBoundsError, match="plan step 1"):
        rollout(oracle, ctx, plan, [0, 1])
