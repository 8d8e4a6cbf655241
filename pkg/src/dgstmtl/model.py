"""Full multi-task network, multi-task Smooth-L1 loss and error metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import numeric as nx
from .config import Dims, LossConfig, ModelConfig
from .ctke import CTKE
from .errors import ConfigError, DimensionError, InputError
from .gstgc import GSTGC
from .hamg import Gates, ablation_select


def _uniform(shape, bound, generator):
    return nn.Parameter(torch.empty(*shape, dtype=nx.DTYPE).uniform_(-bound, bound, generator=generator))


class DGSTMTL(nn.Module):
    """Input layers -> dynamic matrix -> gated hybrid adjacency -> per-task GSTGC -> integration head.

    ``prior`` is the 3N x 3N static matrix; it is required unless the
    adjacency mode is ``dynamic_only``.  Inputs are (B, N, T, K, C), outputs
    (B, N, K).
    """

    def __init__(self, dims: Dims, cfg: ModelConfig | None = None, prior: np.ndarray | None = None,
                 seed: int = 0):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.dims, self.cfg = dims, cfg
        n, k, c, h = dims.n_nodes, dims.n_tasks, dims.in_channels, dims.hidden
        m = dims.block_steps
        g = torch.Generator().manual_seed(int(seed))

        bound = 1.0 / math.sqrt(c)
        n_in = k if cfg.task_input_layer else 1
        self.in_w = _uniform((n_in, c, h), bound, g)
        self.in_b = _uniform((n_in, h), bound, g)

        if cfg.uses_prior:
            if prior is None:
                raise ConfigError(f"adjacency mode {cfg.adjacency!r} needs a prior matrix")
            prior = np.asarray(prior, dtype=np.float64)
            if prior.shape != (m * n, m * n):
                raise DimensionError(f"prior has shape {prior.shape}, expected {(m * n, m * n)}")
            self.register_buffer("a_p", torch.tensor(prior, dtype=nx.DTYPE))
        else:
            self.register_buffer("a_p", None)
        self.ctke = CTKE(dims, g, cfg.reshape_order) if cfg.uses_ctke else None
        self.gates = Gates(k, m * n, cfg.gate_activation) if cfg.uses_gates else None

        # Raw adjacencies are unnormalized; scale GCN weights at init by the
        # mean row sum of the starting adjacency (B rows sum to 1, gates start at 1).
        degree = (float(prior.sum(axis=1).mean()) if cfg.uses_prior else 0.0) + (1.0 if cfg.uses_ctke else 0.0)
        gain = 1.0 / max(degree, 1.0)
        self.gstgc = nn.ModuleList([GSTGC(dims, cfg, gain, g) for _ in range(k)])

        if cfg.output_layer:
            hh = cfg.head_hidden
            b1, b2 = 1.0 / math.sqrt(h * k), 1.0 / math.sqrt(hh)
            self.head_w1 = _uniform((h * k, hh), b1, g)
            self.head_b1 = _uniform((hh,), b1, g)
            self.head_w2 = _uniform((hh, k), b2, g)
            self.head_b2 = _uniform((k,), b2, g)
            self.res_w = _uniform((h * k, k), b1, g)
            self.res_b = _uniform((k,), b1, g)
        else:
            bo = 1.0 / math.sqrt(h)
            self.out_w = _uniform((k, h), bo, g)
            self.out_b = _uniform((k,), bo, g)

    def dynamic(self, x: torch.Tensor) -> torch.Tensor | None:
        return self.ctke(x) if self.ctke is not None else None

    def adjacency(self, k: int, b: torch.Tensor | None) -> torch.Tensor:
        gates = self.gates.matrices() if self.gates is not None else None
        return ablation_select(self.cfg.adjacency, self.a_p, b, gates, k)

    def task_hidden(self, x: torch.Tensor, k: int) -> torch.Tensor:
        """Affine projection of task k's (B, N, T, C) input to (B, N, T, C')."""
        i = k if self.cfg.task_input_layer else 0
        return nx.matmul(x[..., k, :], self.in_w[i]) + self.in_b[i]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        d = self.dims
        expected = (d.n_nodes, d.history, d.n_tasks, d.in_channels)
        if x.dim() != 5 or tuple(x.shape[1:]) != expected:
            raise DimensionError(f"batch has shape {tuple(x.shape)}, expected (B, {', '.join(map(str, expected))})")
        if x.shape[0] == 0:
            raise InputError("empty batch")
        b = self.dynamic(x)
        outs = [self.gstgc[k](self.task_hidden(x, k), self.adjacency(k, b)) for k in range(d.n_tasks)]
        if not self.cfg.output_layer:
            return torch.stack([o @ self.out_w[k] + self.out_b[k] for k, o in enumerate(outs)], dim=-1)
        merged = torch.cat(outs, dim=-1)  # (B, N, C'K), task-major
        hidden = nx.relu(nx.matmul(merged, self.head_w1) + self.head_b1)
        res = nx.matmul(merged, self.res_w) + self.res_b
        return nx.matmul(hidden, self.head_w2) + self.head_b2 + res

    def gate_penalty(self) -> torch.Tensor:
        if self.gates is None:
            return torch.zeros((), dtype=nx.DTYPE)
        return self.gates.l1()

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def smooth_l1(err: torch.Tensor, alpha: float, delta: float) -> torch.Tensor:
    """0.5*alpha*e^2 where |e| < delta, else alpha*(|e| - 0.5).

    The linear branch keeps the constant 0.5 for every delta, so the loss is
    continuous only at delta = 1.
    """
    a = err.abs()
    return torch.where(a < delta, 0.5 * alpha * err * err, alpha * (a - 0.5))


def task_losses(y: torch.Tensor, y_hat: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Per-task mean Smooth-L1 over all leading axes; returns a K-vector."""
    if y.shape != y_hat.shape:
        raise DimensionError(f"targets {tuple(y.shape)} and predictions {tuple(y_hat.shape)} differ")
    k = y.shape[-1]
    if len(cfg.beta) != k:
        raise DimensionError(f"loss config has {len(cfg.beta)} tasks, data has {k}")
    err = (y - y_hat).reshape(-1, k)
    return torch.stack([smooth_l1(err[:, j], cfg.alpha[j], cfg.delta[j]).mean() for j in range(k)])


def mtl_loss(y: torch.Tensor, y_hat: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    beta = torch.tensor(cfg.beta, dtype=nx.DTYPE)
    return (beta * task_losses(y, y_hat, cfg)).sum()


# -- metrics -------------------------------------------------------------

def mse(y, y_hat) -> float:
    e = np.asarray(y, dtype=np.float64) - np.asarray(y_hat, dtype=np.float64)
    return float(np.mean(e * e))


def rmse(y, y_hat) -> float:
    return math.sqrt(mse(y, y_hat))


def mae(y, y_hat) -> float:
    return float(np.mean(np.abs(np.asarray(y, dtype=np.float64) - np.asarray(y_hat, dtype=np.float64))))


def mape(y, y_hat, eps: float = 1e-8) -> float:
    """Mean |e| / |y| over entries with |y| > eps; 0 when no entry qualifies."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    mask = np.abs(y) > eps
    if not mask.any():
        return 0.0
    return float(np.mean(np.abs(y[mask] - y_hat[mask]) / np.abs(y[mask])))


@dataclass
class TaskMetrics:
    task: str
    mse: float
    rmse: float
    mae: float
    mape: float


def task_metrics(name: str, y, y_hat) -> TaskMetrics:
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.size == 0:
        raise InputError("cannot compute metrics on an empty split")
    return TaskMetrics(name, mse(y, y_hat), rmse(y, y_hat), mae(y, y_hat), mape(y, y_hat))
