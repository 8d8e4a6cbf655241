"""Group-wise spatio-temporal graph convolution.

Stage 1 cuts the history into non-overlapping blocks of m steps, stacks each
block into an (mN, C) matrix whose row blocks follow the prior's time
blocks, and runs a stack of GCN layers with weighted dense residual fusion,
cropping back to the middle time block.  Stage 2 forms overlapping windows of
m consecutive stage-1 outputs, treats them as m pseudo time steps and runs
one more block per window; the window outputs are max-pooled.

Functions broadcast over leading axes, so the same code handles a single
group, a stack of groups, and a batch of samples.
"""
from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import nn

from . import numeric as nx
from .config import Dims, ModelConfig
from .errors import ConfigError, DimensionError


def temporal_group(x: torch.Tensor, m: int) -> list[torch.Tensor]:
    """(..., N, T, C) -> T/m tensors (..., N, m, C), in time order."""
    t = x.shape[-2]
    if t % m:
        raise ConfigError(f"history length {t} is not divisible by m={m}")
    return [x[..., s:s + m, :] for s in range(0, t, m)]


def stack_time(z: torch.Tensor) -> torch.Tensor:
    """(..., N, m, C) -> (..., mN, C); row t*N + i holds node i at step t."""
    *lead, n, m, c = z.shape
    return z.transpose(-3, -2).reshape(*lead, m * n, c)


def gcn_agg(h: torch.Tensor, a_star: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """ReLU(A* H W + b), bias broadcast over rows."""
    if a_star.shape[-1] != h.shape[-2]:
        raise DimensionError(f"adjacency {tuple(a_star.shape)} does not match features {tuple(h.shape)}")
    return nx.relu(nx.matmul(nx.matmul(a_star, h), w) + b.unsqueeze(-2))


def fusion_weights(raw: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis: nonnegative, sums to 1."""
    return torch.softmax(raw, dim=-1)


def crop_middle(h: torch.Tensor, n: int) -> torch.Tensor:
    """Keep the middle time block: rows [s*N, (s+1)*N) with s = m // 2."""
    m = h.shape[-2] // n
    s = m // 2
    return h[..., s * n:(s + 1) * n, :]


def group_block(h0: torch.Tensor, a_star: torch.Tensor, weights: Sequence[torch.Tensor],
                biases: Sequence[torch.Tensor], fusion: torch.Tensor, n: int) -> torch.Tensor:
    """Stacked GCN layers, weighted sum of [H_0, H_1, ..., H_L], middle crop.

    ``fusion`` holds already-normalized weights with L + 1 entries on its
    last axis.
    """
    if fusion.shape[-1] != len(weights) + 1:
        raise DimensionError(f"{fusion.shape[-1]} fusion weights for {len(weights)} layers")
    hs = [h0]
    for w, b in zip(weights, biases):
        hs.append(gcn_agg(hs[-1], a_star, w, b))
    if any(h.shape[-1] != h0.shape[-1] for h in hs[1:]):
        raise ConfigError(
            f"dense residual fusion needs equal channel counts, got input {h0.shape[-1]} and output "
            f"{hs[-1].shape[-1]}; enable the block's input projection"
        )
    fused = sum(fusion[..., i, None, None] * h for i, h in enumerate(hs))
    return crop_middle(fused, n)


def feature_group(outputs: Sequence[torch.Tensor], width: int = 3) -> list[torch.Tensor]:
    """Overlapping windows of ``width`` consecutive outputs, each (..., N, C', width)."""
    if len(outputs) < width:
        raise ConfigError(f"feature grouping needs at least {width} stage-1 outputs, got {len(outputs)}")
    f = torch.stack(list(outputs), dim=-1)
    return [f[..., s:s + width] for s in range(len(outputs) - width + 1)]


class GroupBlocks(nn.Module):
    """Independent parameters for ``groups`` group blocks, evaluated together.

    Weights carry a leading group axis so one call runs every block.  With
    ``dense_residual=False`` the fusion is fixed to the last layer.
    """

    def __init__(self, groups: int, c_in: int, c_out: int, layers: int = 3, dense_residual: bool = True,
                 input_projection: bool = False, gain: float = 1.0, generator: torch.Generator | None = None):
        super().__init__()
        if c_in != c_out and not input_projection:
            raise ConfigError(f"group block maps {c_in} -> {c_out} channels; dense residual fusion needs "
                              "equal widths, set input_projection=True")
        kw = dict(dtype=nx.DTYPE)
        self.layers = layers
        self.dense_residual = dense_residual
        self.in_proj = None
        if c_in != c_out:
            bound = 1.0 / math.sqrt(c_in)
            self.in_proj = nn.Parameter(torch.empty(groups, c_in, c_out, **kw).uniform_(-bound, bound, generator=generator))
        bound = gain / math.sqrt(c_out)
        self.weights = nn.ParameterList([
            nn.Parameter(torch.empty(groups, c_out, c_out, **kw).uniform_(-bound, bound, generator=generator))
            for _ in range(layers)
        ])
        self.biases = nn.ParameterList([nn.Parameter(torch.zeros(groups, c_out, **kw)) for _ in range(layers)])
        if dense_residual:
            self.res_raw = nn.Parameter(torch.zeros(groups, layers + 1, **kw))
        else:
            self.register_parameter("res_raw", None)
            fixed = torch.zeros(groups, layers + 1, **kw)
            fixed[:, -1] = 1.0
            self.register_buffer("fixed_fusion", fixed)

    def fusion(self) -> torch.Tensor:
        return fusion_weights(self.res_raw) if self.dense_residual else self.fixed_fusion

    def forward(self, h0: torch.Tensor, a_star: torch.Tensor, n: int) -> torch.Tensor:
        """h0: (..., mN, G, C_in), a_star: (..., mN, mN) -> (..., N, G, C_out).

        Groups sit on the second-to-last axis so that propagation over the
        graph is a single matmul against an (mN, G*C) view.  Matches
        ``group_block`` applied per group; the last layer only computes the
        rows the crop keeps.
        """
        if self.in_proj is not None:
            h0 = _mix(h0, self.in_proj)
        m = h0.shape[-3] // n
        mid = slice((m // 2) * n, (m // 2 + 1) * n)
        fusion = self.fusion()
        out = fusion[:, 0, None] * h0[..., mid, :, :]
        h = h0
        last = self.layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = a_star[..., mid, :] if i == last else a_star
            h = torch.relu(_mix(_propagate(a, h), w) + b)
            out = out + fusion[:, i + 1, None] * (h if i == last else h[..., mid, :, :])
        return out


def _propagate(a: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    """a (..., R', R) applied to every group of h (..., R, G, C) -> (..., R', G, C)."""
    *lead, r, g, c = h.shape
    out = nx.matmul(a, h.reshape(*lead, r, g * c))
    return out.reshape(*out.shape[:-1], g, c)


def _mix(h: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Per-group channel map: h (..., R, G, C), w (G, C, D) -> (..., R, G, D)."""
    *lead, g, c = h.shape
    rows = h.reshape(-1, g, c).transpose(0, 1)          # (G, rows, C) view
    out = torch.bmm(rows, w)                            # (G, rows, D)
    return out.transpose(0, 1).reshape(*lead, g, w.shape[-1])


class MLP(nn.Module):
    """Two affine maps with a ReLU between, acting on the last axis."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, generator: torch.Generator | None = None):
        super().__init__()
        kw = dict(dtype=nx.DTYPE)
        b1, b2 = 1.0 / math.sqrt(d_in), 1.0 / math.sqrt(d_hidden)
        self.w1 = nn.Parameter(torch.empty(d_in, d_hidden, **kw).uniform_(-b1, b1, generator=generator))
        self.b1 = nn.Parameter(torch.zeros(d_hidden, **kw))
        self.w2 = nn.Parameter(torch.empty(d_hidden, d_out, **kw).uniform_(-b2, b2, generator=generator))
        self.b2 = nn.Parameter(torch.zeros(d_out, **kw))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nx.matmul(nx.relu(nx.matmul(x, self.w1) + self.b1), self.w2) + self.b2


class GSTGC(nn.Module):
    """Per-task two-stage group-wise graph convolution, (..., N, T, C') -> (..., N, C')."""

    def __init__(self, dims: Dims, cfg: ModelConfig, gain: float = 1.0, generator: torch.Generator | None = None):
        super().__init__()
        self.dims = dims
        self.cfg = cfg
        m, c = dims.block_steps, dims.hidden
        self.n_groups = dims.n_time_groups
        self.n_windows = self.n_groups - m + 1
        if cfg.feature_grouping and self.n_windows < 1:
            raise ConfigError(f"{self.n_groups} temporal groups cannot form windows of {m}")
        if cfg.temporal_grouping:
            self.stage1 = GroupBlocks(self.n_groups, c, c, cfg.gcn_layers, cfg.dense_residual, gain=gain,
                                      generator=generator)
        else:
            self.stage1 = MLP(dims.history * c, c, self.n_groups * c, generator=generator)
        if cfg.feature_grouping:
            self.stage2 = GroupBlocks(self.n_windows, c, c, cfg.gcn_layers, cfg.dense_residual, gain=gain,
                                      generator=generator)
        else:
            self.stage2 = MLP(self.n_groups * c, c, c, generator=generator)

    def stage1_outputs(self, x: torch.Tensor, a_star: torch.Tensor) -> torch.Tensor:
        """Stage-1 feature stack F: (..., N, C', G)."""
        n, c = self.dims.n_nodes, self.dims.hidden
        if self.cfg.temporal_grouping:
            h0 = torch.stack([stack_time(z) for z in temporal_group(x, self.dims.block_steps)], dim=-2)
            return self.stage1(h0, a_star, n).transpose(-1, -2)
        *lead, _, t, _ = x.shape
        return self.stage1(x.reshape(*lead, n, t * c)).reshape(*lead, n, self.n_groups, c).transpose(-1, -2)

    def forward(self, x: torch.Tensor, a_star: torch.Tensor) -> torch.Tensor:
        n = self.dims.n_nodes
        f = self.stage1_outputs(x, a_star)
        if not self.cfg.feature_grouping:
            return self.stage2(f.flatten(-2))
        windows = feature_group(f.unbind(-1), self.dims.block_steps)
        h0 = torch.stack([stack_time(win.transpose(-1, -2)) for win in windows], dim=-2)
        return nx.max_over_axis(self.stage2(h0, a_star, n), axis=-2)
