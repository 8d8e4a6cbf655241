"""Dense float64 tensor ops and a finite-difference gradient checker.

Tensors are ``torch.Tensor`` in float64; reverse-mode gradients come from
torch autograd.  The wrappers here add the shape checks and error contract
the rest of the package relies on.  ``grad_check`` is deliberately
independent of autograd: it perturbs parameters and takes central
differences of the scalar loss.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import DimensionError, NumericError

DTYPE = torch.float64


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    """Build a float64 tensor from nested lists or arrays."""
    return torch.tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE, requires_grad=requires_grad)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return a @ b


def softmax_rows(a: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax with max subtraction."""
    shifted = a - a.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def relu(a: torch.Tensor) -> torch.Tensor:
    return torch.clamp_min(a, 0.0)


def max_over_axis(a: torch.Tensor, axis: int) -> torch.Tensor:
    return a.max(dim=axis).values


def concat(parts: Sequence[torch.Tensor], axis: int) -> torch.Tensor:
    ref = parts[0].shape
    nd = len(ref)
    ax = axis % nd
    for i, p in enumerate(parts):
        if p.dim() != nd or any(p.shape[d] != ref[d] for d in range(nd) if d != ax):
            raise DimensionError(f"concat: part {i} has shape {tuple(p.shape)}, expected {tuple(ref)} off axis {axis}")
    return torch.cat(list(parts), dim=ax)


def reshape(a: torch.Tensor, shape: Sequence[int]) -> torch.Tensor:
    """Row-major reshape."""
    if math.prod(shape) != a.numel():
        raise DimensionError(f"reshape: {tuple(a.shape)} has {a.numel()} elements, target {tuple(shape)}")
    return a.reshape(tuple(shape))


def _broadcast_shape(sa, sb):
    try:
        return torch.broadcast_shapes(sa, sb)
    except RuntimeError as exc:
        raise DimensionError(f"cannot broadcast {tuple(sa)} with {tuple(sb)}") from exc


def broadcast_add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast_shape(a.shape, b.shape)
    return a + b


def elementwise_mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast_shape(a.shape, b.shape)
    return a * b


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-6,
    sample: float | int | None = None,
    seed: int = 0,
) -> float:
    """Compare autograd gradients of ``f()`` against central differences.

    ``sample`` selects which coordinates are checked: ``None`` checks all of
    them, a float in (0, 1] checks that fraction (at least one coordinate),
    an int checks that many.  Coordinates are drawn uniformly over the
    concatenation of all parameters.

    Returns the max over checked coordinates of
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    # eps outside [1e-7, 1e-4] is allowed; results are then only indicative
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    loss = f()
    if loss.numel() != 1:
        raise DimensionError(f"grad_check needs a scalar loss, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss):
        raise NumericError(f"grad_check aborted: loss is {loss.item()}")
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, analytic)]

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    if sample is None:
        flat_idx = np.arange(total)
    else:
        if isinstance(sample, float):
            if not 0 < sample <= 1:
                raise ValueError("sample fraction must be in (0, 1]")
            count = max(1, int(round(sample * total)))
        else:
            if sample < 1:
                raise ValueError("sample count must be >= 1")
            count = min(int(sample), total)
        flat_idx = np.sort(np.random.default_rng(seed).choice(total, size=count, replace=False))
    offsets = np.cumsum([0] + sizes)

    worst = 0.0
    with torch.no_grad():
        for idx in flat_idx:
            pi = int(np.searchsorted(offsets, idx, side="right") - 1)
            local = int(idx - offsets[pi])
            flat = params[pi].view(-1)
            orig = flat[local].item()
            flat[local] = orig + eps
            up = f().item()
            flat[local] = orig - eps
            down = f().item()
            flat[local] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError(f"grad_check aborted: non-finite loss perturbing param {pi}[{local}]")
            numeric = (up - down) / (2 * eps)
            a = analytic[pi].view(-1)[local].item()
            worst = max(worst, abs(a - numeric) / max(1.0, abs(numeric)))
    return worst
