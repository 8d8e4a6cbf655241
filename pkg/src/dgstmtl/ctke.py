"""Cross-task dynamic adjacency: embed, pool over time, project, correlate, softmax.

All functions accept optional leading batch axes; a batch of samples yields
one dynamic matrix per sample.
"""
from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import nn

from . import numeric as nx
from .config import Dims
from .errors import DimensionError


def concat_tasks(task_inputs: Sequence[torch.Tensor]) -> torch.Tensor:
    """Stack K tensors shaped (..., N, T, C) into (..., N, T, K, C)."""
    if not task_inputs:
        raise DimensionError("concat_tasks needs at least one task")
    ref = task_inputs[0].shape
    for k, x in enumerate(task_inputs):
        if x.shape != ref:
            raise DimensionError(f"task {k} has shape {tuple(x.shape)}, task 0 has {tuple(ref)}")
    return torch.stack(list(task_inputs), dim=-2)


def embed(x: torch.Tensor, e_tk: torch.Tensor, e_sk: torch.Tensor) -> torch.Tensor:
    """x + E_TK + E_SK with E_TK: (1, T, K, 1), E_SK: (N, 1, K, 1)."""
    return nx.broadcast_add(nx.broadcast_add(x, e_tk), e_sk)


def split_chunks(x: torch.Tensor, m: int, order: str = "time_block") -> torch.Tensor:
    """Reshape (..., N, D) into (..., m*N, D/m).

    Node i's D-vector is cut into m consecutive chunks.  With
    ``order="time_block"`` chunk s of node i lands on row s*N + i, so row
    blocks line up with the prior's time blocks; ``"row_major"`` is the plain
    reshape (row i*m + s).
    """
    *lead, n, d = x.shape
    if d % m:
        raise DimensionError(f"feature width {d} not divisible by m={m}")
    if order == "row_major":
        return nx.reshape(x, (*lead, n * m, d // m))
    chunks = x.reshape(*lead, n, m, d // m).transpose(-3, -2)
    return chunks.reshape(*lead, m * n, d // m)


def dynamic_matrix(x_embedded: torch.Tensor, w: torch.Tensor, b: torch.Tensor, m: int,
                   order: str = "time_block") -> torch.Tensor:
    """B = softmax_rows(R R^T) where R = split_chunks(relu(flatten(max_T x) W + b))."""
    *lead, n, t, k, c = x_embedded.shape
    if w.shape != (k * c, w.shape[-1]):
        raise DimensionError(f"W has shape {tuple(w.shape)}, expected ({k * c}, D)")
    agg = nx.max_over_axis(x_embedded, axis=-3)           # (..., N, K, C)
    flat = agg.reshape(*lead, n, k * c)                    # task-major flattening
    transformed = nx.relu(nx.matmul(flat, w) + b)          # (..., N, D)
    r = split_chunks(transformed, m, order)                # (..., mN, D')
    corr = nx.matmul(r, r.transpose(-1, -2))
    return nx.softmax_rows(corr)


class CTKE(nn.Module):
    """Learnable task embeddings and projection for the dynamic matrix."""

    def __init__(self, dims: Dims, generator: torch.Generator | None = None, order: str = "time_block"):
        super().__init__()
        self.dims = dims
        self.order = order
        n, t, k, c, d = dims.n_nodes, dims.history, dims.n_tasks, dims.in_channels, dims.ctke_dim
        kw = dict(dtype=nx.DTYPE)
        self.e_tk = nn.Parameter(torch.empty(1, t, k, 1, **kw).uniform_(-0.04, 0.04, generator=generator))
        self.e_sk = nn.Parameter(torch.empty(n, 1, k, 1, **kw).uniform_(-0.04, 0.04, generator=generator))
        bound = 1.0 / math.sqrt(k * c)
        self.w = nn.Parameter(torch.empty(k * c, d, **kw).uniform_(-bound, bound, generator=generator))
        self.b = nn.Parameter(torch.zeros(d, **kw))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (..., N, T, K, C) raw concatenated inputs -> (..., mN, mN)."""
        return dynamic_matrix(embed(x, self.e_tk, self.e_sk), self.w, self.b, self.dims.block_steps, self.order)
