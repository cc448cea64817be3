import torch
import torch.nn as nn


class LinearDynamicsProbe(nn.Module):
    """z_next = z + A(z) + broadcast(B(a)); A is a bias-free 1x1 channel mixer, B a bias-free action projection."""

    def __init__(self, d: int):
        super().__init__()
        self.A = nn.Linear(d, d, bias=False)
        self.B = nn.Linear(3, d, bias=False)
        nn.init.zeros_(self.A.weight)
        nn.init.zeros_(self.B.weight)

    def forward(self, z: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        return z + self.A(z) + self.B(a)[:, None, :]
