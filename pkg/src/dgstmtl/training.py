"""Experiment setup, minibatch Adam training with early stopping, evaluation."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from . import numeric as nx
from .config import Dims, LossConfig, ModelConfig, TrainConfig, derive_seed
from .data import TaskDataset, WindowedSplit, train_columns, window_and_split
from .errors import InputError, NumericError
from .graph import BasicMatrices, GraphPrior, assemble_prior, basic_matrices, build_physical
from .model import DGSTMTL, TaskMetrics, mtl_loss, task_metrics

log = logging.getLogger(__name__)


@dataclass
class Experiment:
    """Everything derived from the raw data before any training."""

    task_names: list[str]
    splits: dict[str, WindowedSplit]
    basic: BasicMatrices
    prior: GraphPrior


def prepare(tasks: Sequence[TaskDataset], edges, history: int = 12, ratios=(0.6, 0.2, 0.2),
            threshold: float = 0.7, corr_mode: str = "abs", layout: str = "P1",
            scaler=None) -> Experiment:
    """Window the tasks and build the static prior from training-split columns only."""
    splits = window_and_split(tasks, history, ratios, scaler)
    n = tasks[0].n_nodes
    cols = train_columns(tasks[0].length, history, ratios)
    basic = basic_matrices(build_physical(edges, n), [t.series[:, :cols] for t in tasks], threshold, corr_mode)
    return Experiment([t.name for t in tasks], splits, basic, assemble_prior(basic, layout))


def build_model(exp: Experiment, cfg: ModelConfig, hidden: int = 64, ctke_dim: int = 24, seed: int = 0) -> DGSTMTL:
    x = exp.splits["train"].inputs
    dims = Dims(n_nodes=x.shape[1], n_tasks=x.shape[3], history=x.shape[2], in_channels=x.shape[4],
                hidden=hidden, ctke_dim=ctke_dim)
    prior = assemble_prior(exp.basic, cfg.prior_layout).a_p
    return DGSTMTL(dims, cfg, prior, seed=derive_seed(seed, "init"))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    model: DGSTMTL
    trace: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf


def _tensor(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float64))


def predict(model: DGSTMTL, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Normalized-scale predictions (S, N, K)."""
    model.eval()
    out = []
    with torch.no_grad():
        x = _tensor(inputs)
        for lo in range(0, x.shape[0], batch_size):
            out.append(model(x[lo:lo + batch_size]))
    return torch.cat(out).numpy()


def split_loss(model: DGSTMTL, split: WindowedSplit, loss_cfg: LossConfig, batch_size: int = 256) -> float:
    y_hat = _tensor(predict(model, split.inputs, batch_size))
    return float(mtl_loss(_tensor(split.targets), y_hat, loss_cfg))


def train(model: DGSTMTL, splits: dict[str, WindowedSplit], cfg: TrainConfig, loss_cfg: LossConfig,
          on_epoch: Callable[[EpochRecord], bool] | None = None) -> TrainResult:
    """Minibatch Adam with early stopping on total validation loss.

    The returned model carries the parameters of the best validation epoch.
    ``on_epoch`` may return True to stop after the current epoch.
    """
    train_split, val_split = splits["train"], splits["val"]
    if len(train_split) == 0:
        raise InputError("training split is empty")
    if len(val_split) == 0:
        raise InputError("validation split is empty; early stopping needs one")
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas, eps=cfg.adam_eps)
    rng = np.random.default_rng(derive_seed(cfg.seed, "shuffle"))
    x, y = _tensor(train_split.inputs), _tensor(train_split.targets)
    n = x.shape[0]

    result = TrainResult(model)
    best_state = copy.deepcopy(model.state_dict())
    since_best = 0
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        perm = torch.from_numpy(rng.permutation(n))
        total = 0.0
        for bi, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[lo:lo + cfg.batch_size]
            opt.zero_grad(set_to_none=True)
            loss = mtl_loss(y[idx], model(x[idx]), loss_cfg)
            objective = loss + cfg.gate_l1 * model.gate_penalty() if cfg.gate_l1 else loss
            if not torch.isfinite(objective):
                raise NumericError(f"non-finite loss {objective.item()} at epoch {epoch}, batch {bi}")
            objective.backward()
            opt.step()
            total += loss.item() * len(idx)
        rec = EpochRecord(epoch, total / n, split_loss(model, val_split, loss_cfg))
        if not math.isfinite(rec.val_loss):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        result.trace.append(rec)
        log.info("epoch %d train %.6g val %.6g", epoch, rec.train_loss, rec.val_loss)
        if rec.val_loss < result.best_val:
            result.best_val, result.best_epoch = rec.val_loss, epoch
            best_state = copy.deepcopy(model.state_dict())
            since_best = 0
        else:
            since_best += 1
        if since_best >= cfg.patience or (on_epoch is not None and on_epoch(rec)):
            break
    model.load_state_dict(best_state)
    return result


def evaluate(model: DGSTMTL, split: WindowedSplit, task_names: Sequence[str]) -> list[TaskMetrics]:
    """Per-task MSE/RMSE/MAE/MAPE on the original scale."""
    if len(split) == 0:
        raise InputError(f"{split.split} split is empty")
    y_hat = split.scaler.denormalize(predict(model, split.inputs))
    y = split.scaler.denormalize(split.targets)
    return [task_metrics(name, y[..., k], y_hat[..., k]) for k, name in enumerate(task_names)]


def model_grad_check(n_nodes: int = 4, n_tasks: int = 2, hidden: int = 8, samples: int = 3,
                     sample: float | int = 0.01, eps: float = 1e-6, seed: int = 0,
                     cfg: ModelConfig | None = None) -> float:
    """Finite-difference check of the full model loss on a random toy problem."""
    dims = Dims(n_nodes=n_nodes, n_tasks=n_tasks, hidden=hidden, ctke_dim=6)
    rng = np.random.default_rng(derive_seed(seed, "gradcheck"))
    a_s = np.triu((rng.random((n_nodes, n_nodes)) < 0.5).astype(float), 1)
    a_st = np.triu((rng.random((n_nodes, n_nodes)) < 0.5).astype(float), 1)
    basic = BasicMatrices(a_s + a_s.T, np.eye(n_nodes), a_st + a_st.T)
    cfg = cfg or ModelConfig(head_hidden=hidden)
    model = DGSTMTL(dims, cfg, assemble_prior(basic, cfg.prior_layout).a_p, seed=derive_seed(seed, "init"))
    # move gates and residual logits off their symmetric starting points
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "raw" in name:
                p.add_(torch.from_numpy(rng.normal(0, 0.1, p.shape)))
    x = torch.from_numpy(rng.standard_normal((samples, n_nodes, 12, n_tasks, 1)))
    y = torch.from_numpy(rng.standard_normal((samples, n_nodes, n_tasks)))
    loss_cfg = LossConfig.uniform(n_tasks)
    params = [p for p in model.parameters()]
    return nx.grad_check(lambda: mtl_loss(y, model(x), loss_cfg), params, eps=eps, sample=sample, seed=seed)
