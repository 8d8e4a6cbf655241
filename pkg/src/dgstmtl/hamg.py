"""Task-specific hybrid adjacency: gate * (prior + dynamic)."""
from __future__ import annotations

import torch
from torch import nn

from . import numeric as nx
from .config import ADJACENCY_MODES
from .errors import DimensionError, InputError


def hybrid(a_p: torch.Tensor, b: torch.Tensor, gates: torch.Tensor, k: int) -> torch.Tensor:
    """M_k * (A_P + B).  ``gates`` is (K, 3N, 3N); ``b`` may carry leading batch axes."""
    if not 0 <= k < gates.shape[0]:
        raise InputError(f"task index {k} out of range for {gates.shape[0]} gates")
    if a_p.shape != gates.shape[1:] or b.shape[-2:] != a_p.shape:
        raise DimensionError(f"prior {tuple(a_p.shape)}, dynamic {tuple(b.shape)}, gates {tuple(gates.shape)} disagree")
    return nx.elementwise_mul(gates[k], a_p + b)


def ablation_select(mode: str, a_p: torch.Tensor | None, b: torch.Tensor | None,
                    gates: torch.Tensor | None = None, k: int = 0) -> torch.Tensor:
    """Effective adjacency for one task under an adjacency ablation mode."""
    if mode == "static_only":
        return a_p
    if mode == "dynamic_only":
        return b
    if mode == "no_gate":
        return a_p + b
    if mode == "full":
        return hybrid(a_p, b, gates, k)
    raise InputError(f"unknown adjacency mode {mode!r}; choose from {ADJACENCY_MODES}")


class Gates(nn.Module):
    """One learnable 3N x 3N gate per task.

    With ``activation="none"`` the raw matrix is used and starts at all ones
    (training begins from the ungated hybrid).  ``"sigmoid"`` squashes the
    raw matrix into (0, 1); raw values start at 0.
    """

    def __init__(self, n_tasks: int, size: int, activation: str = "none"):
        super().__init__()
        self.activation = activation
        init = torch.ones if activation == "none" else torch.zeros
        self.raw = nn.Parameter(init(n_tasks, size, size, dtype=nx.DTYPE))

    def matrices(self) -> torch.Tensor:
        return torch.sigmoid(self.raw) if self.activation == "sigmoid" else self.raw

    def l1(self) -> torch.Tensor:
        return self.matrices().abs().sum()
