import torch
import torch.nn as nn

from app.core.exceptions import ShapeError
from app.models.blocks import CDiTBlock, FinalLayer, HeadBlock
from app.models.conditioning import ConditionVector, DynamicsConditioning
from app.models.embedding import sincos_2d_table
from app.schema.model_schema import ModelConfig


class CDiTBackbone(nn.Module):
    """Deep conditional transformer over the noisy target tokens, attending into the context frames."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        width = config.width_backbone
        self.x_embedder = nn.Linear(config.d, width)
        self.register_buffer("pos_embed", sincos_2d_table(width, config.grid_h, config.grid_w))
        # one learned offset per context slot, oldest first
        self.temporal_embed = nn.Parameter(torch.zeros(config.m, width))
        self.blocks = nn.ModuleList(
            [CDiTBlock(width, config.heads_backbone, config.mlp_ratio) for _ in range(config.depth_backbone)]
        )

    def embed(self, z_t: torch.Tensor) -> torch.Tensor:
        return self.x_embedder(z_t) + self.pos_embed

    def embed_context(self, ctx: torch.Tensor) -> torch.Tensor:
        B, m, L, _ = ctx.shape
        tokens = self.x_embedder(ctx) + self.pos_embed + self.temporal_embed[None, :, None, :]
        return tokens.reshape(B, m * L, -1)

    def forward(self, z_t: torch.Tensor, ctx: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        x = self.embed(z_t)
        context = self.embed_context(ctx)
        for block in self.blocks:
            x = block(x, context, c)
        return x


class DDTHead(nn.Module):
    """Shallow wide head: re-embeds z_t and modulates it token-wise from (z_prime, t_emb)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        width = config.width_head
        cond_dim = 2 * config.width_backbone
        self.x_embedder = nn.Linear(config.d, width)
        self.register_buffer("pos_embed", sincos_2d_table(width, config.grid_h, config.grid_w))
        self.blocks = nn.ModuleList(
            [
                HeadBlock(width, config.heads_head, cond_dim, config.mlp_ratio, attention=config.head_attention)
                for _ in range(config.depth_head)
            ]
        )
        self.final_layer = FinalLayer(width, cond_dim, config.d)

    def forward(self, z_t: torch.Tensor, z_prime: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        cond = torch.cat([z_prime, t_emb[:, None, :].expand(-1, z_prime.shape[1], -1)], dim=-1)
        x = self.x_embedder(z_t) + self.pos_embed
        for block in self.blocks:
            x = block(x, cond)
        return self.final_layer(x, cond)


class NavWorldModel(nn.Module):
    """
    Velocity-field network v(z_t, t | context, action, k).

    Initial weights are a pure function of ``config.seed``; adaLN output
    projections and the final un-embed start at zero, so the untrained model
    predicts zero velocity.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.conditioning = DynamicsConditioning(config)
            self.backbone = CDiTBackbone(config)
            self.head = DDTHead(config)
            self.initialize_weights()

    def initialize_weights(self) -> None:
        def _basic_init(module):
            if isinstance(module, nn.Linear):
                torch.nn.init.xavier_uniform_(module.weight)
                if module.bias is not None:
                    nn.init.constant_(module.bias, 0)

        self.apply(_basic_init)
        nn.init.normal_(self.backbone.temporal_embed, std=0.02)
        nn.init.normal_(self.conditioning.t_mlp[0].weight, std=0.02)
        nn.init.normal_(self.conditioning.t_mlp[2].weight, std=0.02)

        for block in [*self.backbone.blocks, *self.head.blocks, self.head.final_layer]:
            nn.init.constant_(block.adaLN_modulation[-1].weight, 0)
            nn.init.constant_(block.adaLN_modulation[-1].bias, 0)
        nn.init.constant_(self.head.final_layer.linear.weight, 0)
        nn.init.constant_(self.head.final_layer.linear.bias, 0)

    def check_shapes(self, z_t: torch.Tensor, ctx: torch.Tensor, action: torch.Tensor | None = None) -> None:
        cfg = self.config
        if z_t.dim() != 3 or tuple(z_t.shape[1:]) != (cfg.L, cfg.d):
            raise ShapeError(f"z_t must be (B, {cfg.L}, {cfg.d}), got {tuple(z_t.shape)}")
        if ctx.dim() != 4 or tuple(ctx.shape[1:]) != (cfg.m, cfg.L, cfg.d) or ctx.shape[0] != z_t.shape[0]:
            raise ShapeError(f"context must be (B, {cfg.m}, {cfg.L}, {cfg.d}), got {tuple(ctx.shape)}")
        if action is not None and tuple(action.shape) != (z_t.shape[0], 3):
            raise ShapeError(f"action must be (B, 3), got {tuple(action.shape)}")

    def condition(self, action: torch.Tensor, k: torch.Tensor, t: torch.Tensor) -> ConditionVector:
        return self.conditioning(action, k, t)

    def forward(
        self,
        z_t: torch.Tensor,
        t: torch.Tensor,
        ctx: torch.Tensor,
        action: torch.Tensor,
        k: torch.Tensor,
    ) -> torch.Tensor:
        self.check_shapes(z_t, ctx, action)
        cond = self.conditioning(action, k, t)
        z_prime = self.backbone(z_t, ctx, cond.c)
        return self.head(z_t, z_prime, cond.t_emb)
