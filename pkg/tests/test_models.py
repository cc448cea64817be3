import numpy as np
import pytest
import torch

from app.core.exceptions import ConfigError, DegenerateEmbeddingError, RangeError, ShapeError
from app.models.blocks import CDiTBlock
from app.models.embedding import GaussianFourierEmbedding, sincos_2d_table
from app.schema.model_schema import CondMode, ModelConfig
from app.schema.world_schema import ActionDelta
from app.services.model_service import (
    adaln_modulate,
    build_condition,
    build_model,
    cdit_forward,
    ddt_head_forward,
    dynamics_ratios,
    fourier_embed,
    gate_report,
    gate_strength,
    model_forward,
    parameter_count,
    params_digest,
)
from tests.conftest import TOKEN_DIM, randomize_zero_init, tiny_model_config

L = 16


def _inputs(batch=3, dtype=torch.float32, seed=0):
    g = torch.Generator().manual_seed(seed)
    z_t = torch.randn(batch, L, TOKEN_DIM, generator=g, dtype=dtype)
    ctx = torch.randn(batch, 2, L, TOKEN_DIM, generator=g, dtype=dtype)
    a = torch.randn(batch, 3, generator=g, dtype=dtype)
    k = torch.ones(batch, dtype=dtype)
    t = torch.rand(batch, generator=g, dtype=dtype)
    return z_t, t, ctx, a, k


@pytest.mark.parametrize("mode", list(CondMode))
def test_untrained_model_predicts_zero_velocity(mode):
    model = build_model(tiny_model_config(mode))
    z_t, t, ctx, a, k = _inputs()
    out = model_forward(model, z_t, t, ctx, a, k)
    assert out.shape == (3, L, TOKEN_DIM)
    assert torch.count_nonzero(out) == 0


def test_model_rejects_bad_shapes(tiny_config):
    model = build_model(tiny_config)
    z_t, t, ctx, a, k = _inputs()
    with pytest.raises(ShapeError):
        model(z_t[:, :-1], t, ctx, a, k)
    with pytest.raises(ShapeError):
        model(z_t, t, ctx[:, :1], a, k)
    with pytest.raises(ShapeError):
        model(z_t, t, ctx, a[:, :2], k)


def test_model_rejects_flow_time_outside_unit_interval(tiny_config):
    model = build_model(tiny_config)
    z_t, _, ctx, a, k = _inputs(batch=2)
    with pytest.raises(RangeError):
        model(z_t, torch.tensor([0.5, 1.5]), ctx, a, k)
    with pytest.raises(RangeError):
        model(z_t, torch.tensor([-0.1, 0.5]), ctx, a, k)


def test_weights_are_a_function_of_the_seed():
    first = build_model(tiny_model_config(seed=5))
    second = build_model(tiny_model_config(seed=5))
    other = build_model(tiny_model_config(seed=6))
    assert params_digest(first) == params_digest(second)
    assert params_digest(first) != params_digest(other)


def test_conditioning_modes_change_parameter_count():
    counts = {mode: parameter_count(tiny_model_config(mode)) for mode in CondMode}
    assert counts[CondMode.SIMPLE_ADD] == counts[CondMode.SCHEDULED_GATE]
    assert counts[CondMode.LEARNED_GATE] > counts[CondMode.SIMPLE_ADD]
    assert counts[CondMode.MLP_FUSION] > counts[CondMode.SIMPLE_ADD]


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_model_config(width_backbone=18)
    with pytest.raises(ConfigError):
        tiny_model_config(fourier_dim=7)
    with pytest.raises(ConfigError):
        ModelConfig(width_backbone=64, heads_backbone=3)


def test_fourier_embedding_bounded_and_deterministic():
    torch.manual_seed(0)
    first = GaussianFourierEmbedding(3, 8)
    torch.manual_seed(0)
    second = GaussianFourierEmbedding(3, 8)
    x = torch.randn(5, 3)
    out = first(x)
    assert out.shape == (5, 8)
    assert torch.all(out.abs() <= 1.0)
    torch.testing.assert_close(out, second(x))


def test_sincos_table_shape():
    table = sincos_2d_table(16, 4, 4)
    assert table.shape == (16, 16)
    assert torch.all(table.abs() <= 1.0)
    assert not torch.allclose(table[0], table[1])


def test_learned_gate_lies_in_open_unit_interval():
    model = build_model(tiny_model_config(CondMode.LEARNED_GATE)).double()
    g = torch.Generator().manual_seed(3)
    t_emb = torch.randn(10_000, 16, generator=g, dtype=torch.float64) * 5
    gate = gate_strength(model, t_emb)
    assert torch.all(gate > 0) and torch.all(gate < 1)
    # SiLU is bounded below by about -0.278, so the gate never closes fully
    assert torch.all(gate > 0.43)


def test_zero_gate_weights_give_half_strength(tiny_config):
    model = build_model(tiny_config).double()
    with torch.no_grad():
        model.conditioning.gate.weight.zero_()
        model.conditioning.gate.bias.zero_()
    gate = gate_strength(model, torch.randn(4, 16, dtype=torch.float64))
    torch.testing.assert_close(gate, torch.full_like(gate, 0.5))


def test_gate_strength_needs_learned_gate():
    model = build_model(tiny_model_config(CondMode.SIMPLE_ADD))
    with pytest.raises(ConfigError):
        gate_strength(model, torch.zeros(1, 16))


def test_condition_modes_fuse_as_described():
    a = torch.randn(2, 3, dtype=torch.float64)
    k = torch.ones(2, dtype=torch.float64)
    t = torch.tensor([0.25, 0.75], dtype=torch.float64)

    simple = build_model(tiny_model_config(CondMode.SIMPLE_ADD)).double()
    cond = build_condition(simple, a, k, t)
    torch.testing.assert_close(cond.c, cond.t_emb + cond.c_dyn)
    assert cond.gate is None

    scheduled = build_model(tiny_model_config(CondMode.SCHEDULED_GATE)).double()
    cond = build_condition(scheduled, a, k, t)
    torch.testing.assert_close(cond.c, cond.t_emb + t[:, None] * cond.c_dyn)

    learned = build_model(tiny_model_config(CondMode.LEARNED_GATE)).double()
    forced = build_condition(learned, a, k, t, force_gate=0.0)
    torch.testing.assert_close(forced.c, forced.t_emb)


def test_backbone_and_head_compose_to_forward(tiny_config):
    model = build_model(tiny_config).double()
    randomize_zero_init(model, seed=2)
    z_t, t, ctx, a, k = _inputs(dtype=torch.float64)
    cond = build_condition(model, a, k, t)
    z_prime = cdit_forward(model, z_t, ctx, cond)
    assert z_prime.shape == (3, L, 16)
    v = ddt_head_forward(model, z_t, z_prime, cond.t_emb)
    torch.testing.assert_close(v, model_forward(model, z_t, t, ctx, a, k))
    assert torch.count_nonzero(v) > 0


def test_gate_report_ratios(tiny_config):
    model = build_model(tiny_config).double()
    randomize_zero_init(model, seed=1)
    rng = np.random.default_rng(0)
    samples = [ActionDelta.from_array(rng.normal(size=3)) for _ in range(64)]
    report = gate_report(model, [0.0, 0.5, 1.0], samples)
    assert [row.t for row in report.rows] == [0.0, 0.5, 1.0]
    for row in report.rows:
        assert 0.0 <= row.p_dyn_median < 1.0
        assert row.r_dyn_median >= 0.0
        assert row.p_dyn_iqr >= 0.0 and row.r_dyn_iqr >= 0.0


def test_gate_report_needs_learned_gate():
    model = build_model(tiny_model_config(CondMode.MLP_FUSION))
    with pytest.raises(ConfigError):
        gate_report(model, [0.5], [ActionDelta(u_x=1.0)])


def test_adaln_modulate_normalizes_each_token():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(2, 5, 16, generator=g, dtype=torch.float64) * 3 + 1
    zero = torch.zeros(2, 16, dtype=torch.float64)
    out = adaln_modulate(x, zero, zero)
    torch.testing.assert_close(out.mean(dim=-1), torch.zeros(2, 5, dtype=torch.float64), atol=1e-10, rtol=0)
    torch.testing.assert_close(out.var(dim=-1, unbiased=False), torch.ones(2, 5, dtype=torch.float64), atol=1e-5, rtol=0)

    shift = torch.randn(2, 16, generator=g, dtype=torch.float64)
    scale = torch.randn(2, 16, generator=g, dtype=torch.float64)
    torch.testing.assert_close(adaln_modulate(x, shift, scale), out * (1 + scale[:, None]) + shift[:, None])
    spatial_shift = shift[:, None].expand(-1, 5, -1)
    spatial_scale = scale[:, None].expand(-1, 5, -1)
    torch.testing.assert_close(adaln_modulate(x, spatial_shift, spatial_scale), adaln_modulate(x, shift, scale))


def test_block_with_zero_modulation_is_identity():
    block = CDiTBlock(16, 2, mlp_ratio=2.0).double()
    with torch.no_grad():
        block.adaLN_modulation[-1].weight.zero_()
        block.adaLN_modulation[-1].bias.zero_()
    g = torch.Generator().manual_seed(1)
    x = torch.randn(2, L, 16, generator=g, dtype=torch.float64)
    context = torch.randn(2, 2 * L, 16, generator=g, dtype=torch.float64)
    c = torch.randn(2, 16, generator=g, dtype=torch.float64)
    assert torch.equal(block(x, context, c), x)


def test_depth_zero_backbone_only_embeds_the_target():
    model = build_model(tiny_model_config(depth_backbone=0)).double()
    randomize_zero_init(model, seed=4)
    z_t, t, ctx, a, k = _inputs(dtype=torch.float64)
    cond = build_condition(model, a, k, t)
    torch.testing.assert_close(cdit_forward(model, z_t, ctx, cond), model.backbone.embed(z_t))
    torch.testing.assert_close(model_forward(model, z_t, t, ctx, a, k), model_forward(model, z_t, t, ctx * 3.0, a, k))


def test_context_slot_order_matters(tiny_config):
    model = build_model(tiny_config).double()
    randomize_zero_init(model, seed=6)
    z_t, t, ctx, a, k = _inputs(dtype=torch.float64)
    forward = model_forward(model, z_t, t, ctx, a, k)
    swapped = model_forward(model, z_t, t, ctx.flip(1), a, k)
    assert not torch.allclose(forward, swapped)


def test_head_without_attention_is_token_local():
    model = build_model(tiny_model_config(head_attention=False)).double()
    randomize_zero_init(model, seed=7)
    g = torch.Generator().manual_seed(2)
    z_t = torch.randn(2, L, TOKEN_DIM, generator=g, dtype=torch.float64)
    z_prime = torch.randn(2, L, 16, generator=g, dtype=torch.float64)
    t_emb = torch.randn(2, 16, generator=g, dtype=torch.float64)
    base = ddt_head_forward(model, z_t, z_prime, t_emb)

    def assert_only_token_5_moves(out):
        changed = (out - base).abs().amax(dim=(0, 2))
        assert changed[5] > 0
        others = torch.cat([changed[:5], changed[6:]])
        torch.testing.assert_close(others, torch.zeros(L - 1, dtype=torch.float64), atol=1e-12, rtol=0)

    moved = z_t.clone()
    moved[:, 5] += 1.0
    assert_only_token_5_moves(ddt_head_forward(model, moved, z_prime, t_emb))
    moved = z_prime.clone()
    moved[:, 5] += 1.0
    assert_only_token_5_moves(ddt_head_forward(model, z_t, moved, t_emb))


def test_fourier_identities():
    g = torch.Generator().manual_seed(3)
    table = torch.randn(4, 3, generator=g, dtype=torch.float64)
    at_zero = fourier_embed(torch.zeros(2, 3, dtype=torch.float64), table)
    torch.testing.assert_close(at_zero, torch.cat([torch.zeros(2, 4), torch.ones(2, 4)], dim=-1).double())
    out = fourier_embed(torch.randn(6, 3, generator=g, dtype=torch.float64), table)
    torch.testing.assert_close(out[:, :4] ** 2 + out[:, 4:] ** 2, torch.ones(6, 4, dtype=torch.float64))


def test_learned_gate_held_open_matches_simple_addition():
    simple = build_model(tiny_model_config(CondMode.SIMPLE_ADD)).double()
    learned = build_model(tiny_model_config(CondMode.LEARNED_GATE)).double()
    missing, unexpected = learned.load_state_dict(simple.state_dict(), strict=False)
    assert unexpected == [] and all(key.startswith("conditioning.gate.") for key in missing)
    a = torch.randn(3, 3, dtype=torch.float64)
    k = torch.tensor([1.0, 2.0, 4.0], dtype=torch.float64)
    t = torch.tensor([0.0, 0.4, 1.0], dtype=torch.float64)
    assert torch.equal(build_condition(learned, a, k, t, force_gate=1.0).c, build_condition(simple, a, k, t).c)


def test_mlp_fusion_condition():
    model = build_model(tiny_model_config(CondMode.MLP_FUSION)).double()
    a = torch.randn(2, 3, dtype=torch.float64)
    k = torch.ones(2, dtype=torch.float64)
    t = torch.tensor([0.2, 0.9], dtype=torch.float64)
    cond = build_condition(model, a, k, t)
    assert cond.gate is None
    torch.testing.assert_close(cond.c, model.conditioning.fusion(torch.cat([cond.t_emb, cond.c_dyn], dim=-1)))
    assert not torch.allclose(build_condition(model, a + 1.0, k, t).c, cond.c)


def test_gate_report_without_dynamics_feature(tiny_config):
    model = build_model(tiny_config).double()
    with torch.no_grad():
        model.conditioning.dyn_mlp[2].weight.zero_()
        model.conditioning.dyn_mlp[2].bias.zero_()
    report = gate_report(model, [0.0, 0.5, 1.0], [ActionDelta(u_x=1.0), ActionDelta(u_x=0.5, omega=0.3, k=2)])
    for row in report.rows:
        assert row.p_dyn_median == 0.0 and row.r_dyn_median == 0.0
        assert row.p_dyn_iqr == 0.0 and row.r_dyn_iqr == 0.0


def test_dynamics_ratios():
    p_dyn, r_dyn = dynamics_ratios(np.array([1.0, 3.0, 0.0]), 1.0)
    np.testing.assert_allclose(p_dyn, [0.5, 0.75, 0.0])
    np.testing.assert_allclose(r_dyn, [1.0, 3.0, 0.0])
    with pytest.raises(DegenerateEmbeddingError):
        dynamics_ratios(np.array([1.0]), 0.0)
