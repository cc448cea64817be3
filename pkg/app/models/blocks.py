import torch
import torch.nn as nn
import torch.nn.functional as F
from timm.layers import Mlp

LN_EPS = 1e-6


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    # global modulation arrives as (B, C), spatial modulation as (B, L, C)
    if shift.dim() == 2:
        shift, scale = shift.unsqueeze(1), scale.unsqueeze(1)
    return x * (1 + scale) + shift


def adaln_modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """Per-token layer norm without affine weights, then condition-driven shift/scale."""
    return modulate(F.layer_norm(x, (x.shape[-1],), eps=LN_EPS), shift, scale)


def _approx_gelu() -> nn.Module:
    return nn.GELU(approximate="tanh")


class Attention(nn.Module):
    """Exact softmax multi-head attention; self-attention when no context is given."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        context = x if context is None else context
        B, N, C = x.shape
        M = context.shape[1]
        q = self.q(x).reshape(B, N, self.num_heads, self.head_dim).transpose(1, 2)
        k, v = self.kv(context).reshape(B, M, 2, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, N, C)
        return self.proj(out)


class CDiTBlock(nn.Module):
    """Self-attention over target tokens, cross-attention into context tokens, then MLP; adaLN-Zero on all three."""

    def __init__(self, width: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.attn = Attention(width, num_heads)
        self.cross_attn = Attention(width, num_heads)
        self.mlp = Mlp(in_features=width, hidden_features=int(width * mlp_ratio), act_layer=_approx_gelu, drop=0)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(width, 9 * width))

    def forward(self, x: torch.Tensor, context: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        (
            shift_msa, scale_msa, gate_msa,
            shift_mca, scale_mca, gate_mca,
            shift_mlp, scale_mlp, gate_mlp,
        ) = self.adaLN_modulation(c).chunk(9, dim=1)
        x = x + gate_msa.unsqueeze(1) * self.attn(adaln_modulate(x, shift_msa, scale_msa))
        x = x + gate_mca.unsqueeze(1) * self.cross_attn(adaln_modulate(x, shift_mca, scale_mca), context)
        x = x + gate_mlp.unsqueeze(1) * self.mlp(adaln_modulate(x, shift_mlp, scale_mlp))
        return x


class HeadBlock(nn.Module):
    """Wide head block driven by spatial (per-token) adaLN."""

    def __init__(self, width: int, num_heads: int, cond_dim: int, mlp_ratio: float = 4.0, attention: bool = True):
        super().__init__()
        self.attn = Attention(width, num_heads) if attention else None
        self.mlp = Mlp(in_features=width, hidden_features=int(width * mlp_ratio), act_layer=_approx_gelu, drop=0)
        self.n_chunks = 6 if attention else 3
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(cond_dim, self.n_chunks * width))

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        mods = self.adaLN_modulation(cond).chunk(self.n_chunks, dim=-1)
        if self.attn is not None:
            shift_msa, scale_msa, gate_msa = mods[:3]
            x = x + gate_msa * self.attn(adaln_modulate(x, shift_msa, scale_msa))
        shift_mlp, scale_mlp, gate_mlp = mods[-3:]
        return x + gate_mlp * self.mlp(adaln_modulate(x, shift_mlp, scale_mlp))


class FinalLayer(nn.Module):
    def __init__(self, width: int, cond_dim: int, out_channels: int):
        super().__init__()
        self.linear = nn.Linear(width, out_channels)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(cond_dim, 2 * width))

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        shift, scale = self.adaLN_modulation(cond).chunk(2, dim=-1)
        return self.linear(adaln_modulate(x, shift, scale))
