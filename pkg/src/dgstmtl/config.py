"""Dimensions, model/training/loss configuration and ablation variants."""
from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ConfigError

LAYOUTS = ("P1", "P2", "P3", "P4")
ADJACENCY_MODES = ("full", "static_only", "dynamic_only", "no_gate")

# Ablation variants 1-11: each maps to a set of ModelConfig overrides.
VARIANTS: dict[int, dict[str, Any]] = {
    1: {"adjacency": "static_only"},
    2: {"adjacency": "dynamic_only"},
    3: {"adjacency": "no_gate"},
    4: {"output_layer": False},
    5: {"task_input_layer": False},
    6: {"prior_layout": "P2"},
    7: {"prior_layout": "P3"},
    8: {"prior_layout": "P4"},
    9: {"dense_residual": False},
    10: {"temporal_grouping": False},
    11: {"feature_grouping": False},
}

# Named aliases accepted by the CLI's --ablation flag.
ABLATION_NAMES: dict[str, dict[str, Any]] = {
    "full": {},
    "static_only": VARIANTS[1],
    "dynamic_only": VARIANTS[2],
    "no_gate": VARIANTS[3],
    "no_output_layer": VARIANTS[4],
    "shared_input": VARIANTS[5],
    "no_residual": VARIANTS[9],
    "mlp_temporal": VARIANTS[10],
    "mlp_feature": VARIANTS[11],
}


def derive_seed(seed: int, label: str) -> int:
    """Mix the run seed with a stream label into an independent 32-bit seed.

    ``SeedSequence([seed, crc32(label)])`` drawn once; stable across
    platforms and Python hash randomization.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode())])
    return int(ss.generate_state(1)[0])


@dataclass(frozen=True)
class Dims:
    """Problem sizes.

    n_nodes (N), history (T), n_tasks (K), in_channels (C), hidden (C'),
    block_steps (m), ctke_dim (D).
    """

    n_nodes: int
    n_tasks: int
    history: int = 12
    in_channels: int = 1
    hidden: int = 64
    block_steps: int = 3
    ctke_dim: int = 24

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{f.name} must be a positive integer, got {v!r}")
        if self.ctke_dim % self.block_steps:
            raise ConfigError(f"ctke_dim={self.ctke_dim} is not divisible by block_steps={self.block_steps}")
        if self.history % self.block_steps:
            raise ConfigError(f"history={self.history} is not divisible by block_steps={self.block_steps}")

    @property
    def ctke_chunk(self) -> int:
        """D' = D / m."""
        return self.ctke_dim // self.block_steps

    @property
    def n_time_groups(self) -> int:
        return self.history // self.block_steps


@dataclass
class ModelConfig:
    prior_layout: str = "P1"
    adjacency: str = "full"
    output_layer: bool = True
    task_input_layer: bool = True
    dense_residual: bool = True
    temporal_grouping: bool = True
    feature_grouping: bool = True
    gcn_layers: int = 3
    head_hidden: int = 64
    gate_activation: str = "none"  # "none" | "sigmoid"
    reshape_order: str = "time_block"  # "time_block" (row s*N+i) | "row_major" (row i*m+s)

    def __post_init__(self):
        if self.prior_layout not in LAYOUTS:
            raise ConfigError(f"prior_layout must be one of {LAYOUTS}, got {self.prior_layout!r}")
        if self.adjacency not in ADJACENCY_MODES:
            raise ConfigError(f"adjacency must be one of {ADJACENCY_MODES}, got {self.adjacency!r}")
        if self.gate_activation not in ("none", "sigmoid"):
            raise ConfigError(f"gate_activation must be 'none' or 'sigmoid', got {self.gate_activation!r}")
        if self.reshape_order not in ("time_block", "row_major"):
            raise ConfigError(f"unknown reshape_order {self.reshape_order!r}")
        if self.gcn_layers < 1 or self.head_hidden < 1:
            raise ConfigError("gcn_layers and head_hidden must be positive")

    @property
    def uses_ctke(self) -> bool:
        return self.adjacency != "static_only"

    @property
    def uses_prior(self) -> bool:
        return self.adjacency != "dynamic_only"

    @property
    def uses_gates(self) -> bool:
        return self.adjacency == "full"

    @classmethod
    def for_variant(cls, variant: int | None, **overrides) -> "ModelConfig":
        kw = {}
        if variant:
            if variant not in VARIANTS:
                raise ConfigError(f"unknown variant {variant}; choose from {sorted(VARIANTS)}")
            kw.update(VARIANTS[variant])
        kw.update(overrides)
        return cls(**kw)


@dataclass
class TrainConfig:
    batch_size: int = 24
    learning_rate: float = 0.003
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    gate_l1: float = 0.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be positive")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.gate_l1 < 0:
            raise ConfigError("gate_l1 must be >= 0")
        self.adam_betas = tuple(self.adam_betas)


@dataclass
class LossConfig:
    """Per-task Smooth-L1 weights: beta (simplex), alpha (scale), delta (threshold)."""

    beta: list[float]
    alpha: list[float] = field(default_factory=list)
    delta: list[float] = field(default_factory=list)

    def __post_init__(self):
        k = len(self.beta)
        if k == 0:
            raise ConfigError("beta must have one entry per task")
        self.alpha = list(self.alpha) or [1.0] * k
        self.delta = list(self.delta) or [1.0] * k
        if len(self.alpha) != k or len(self.delta) != k:
            raise ConfigError("beta, alpha and delta must have the same length")
        if any(b < 0 for b in self.beta) or sum(self.beta) <= 0:
            raise ConfigError(f"beta must be nonnegative with positive sum, got {self.beta}")
        if any(a <= 0 for a in self.alpha) or any(d <= 0 for d in self.delta):
            raise ConfigError("alpha and delta must be positive")
        s = float(sum(self.beta))
        self.beta = [float(b) / s for b in self.beta]

    @classmethod
    def uniform(cls, n_tasks: int) -> "LossConfig":
        return cls(beta=[1.0 / n_tasks] * n_tasks)
