"""Static adjacency matrices and the 3N x 3N spatio-temporal prior."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import LAYOUTS
from .errors import DimensionError, InputError, LoadError

# Block placement per layout for the off-diagonal adjacent pairs
# (t1,t2)/(t2,t1) and (t2,t3)/(t3,t2).  Diagonal blocks are always A_S,
# (t1,t3)/(t3,t1) always zero.
_LAYOUT_BLOCKS = {
    "P1": ("a_t", "a_st"),
    "P2": ("a_st", "a_t"),
    "P3": ("a_t", "a_t"),
    "P4": ("a_st", "a_st"),
}


class ConstantSeriesWarning(UserWarning):
    pass


@dataclass
class BasicMatrices:
    a_s: np.ndarray
    a_t: np.ndarray
    a_st: np.ndarray
    threshold: float = 0.7

    def __post_init__(self):
        n = self.a_s.shape[0]
        for name in ("a_s", "a_t", "a_st"):
            m = getattr(self, name)
            if m.ndim != 2 or m.shape != (n, n):
                raise DimensionError(f"{name} has shape {m.shape}, expected ({n}, {n})")

    @property
    def n(self) -> int:
        return self.a_s.shape[0]


@dataclass
class GraphPrior:
    layout: str
    a_p: np.ndarray
    n: int
    m: int = 3

    def block(self, i: int, j: int) -> np.ndarray:
        n = self.n
        return self.a_p[i * n:(i + 1) * n, j * n:(j + 1) * n]


def build_physical(edges: Iterable[Sequence[int]], n: int) -> np.ndarray:
    a = np.zeros((n, n))
    for pair in edges:
        i, j = int(pair[0]), int(pair[1])
        if not (0 <= i < n and 0 <= j < n):
            raise InputError(f"edge {(i, j)} out of range for {n} nodes")
        if i != j:
            a[i, j] = a[j, i] = 1.0
    return a


def pearson_matrix(series: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise Pearson r between rows; returns (r, constant_row_mask).

    Rows with zero variance get r = 0 against everything.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"series must be N x L, got shape {x.shape}")
    if x.shape[1] < 3:
        raise InputError(f"need at least 3 time steps for correlation, got {x.shape[1]}")
    xc = x - x.mean(axis=1, keepdims=True)
    norms = np.sqrt((xc * xc).sum(axis=1))
    constant = norms <= 1e-12 * np.maximum(1.0, np.abs(x).max(axis=1))
    safe = np.where(constant, 1.0, norms)
    z = xc / safe[:, None]
    r = np.clip(z @ z.T, -1.0, 1.0)
    r[constant, :] = 0.0
    r[:, constant] = 0.0
    return r, constant


def build_st_correlation(series: np.ndarray, threshold: float = 0.7, mode: str = "abs") -> np.ndarray:
    """Binary correlation graph: edge iff |r| >= threshold (``mode="abs"``) or r >= threshold (``"signed"``)."""
    if mode not in ("abs", "signed"):
        raise InputError(f"correlation mode must be 'abs' or 'signed', got {mode!r}")
    r, constant = pearson_matrix(series)
    if constant.any():
        warnings.warn(
            f"constant series at nodes {np.flatnonzero(constant).tolist()}; their correlation edges are dropped",
            ConstantSeriesWarning,
            stacklevel=2,
        )
    score = np.abs(r) if mode == "abs" else r
    # tolerate rounding in exact-correlation cases (r = +-1 computed as 0.9999999999)
    a = (score >= threshold - 1e-12).astype(np.float64)
    a[constant, :] = 0.0
    a[:, constant] = 0.0
    np.fill_diagonal(a, 0.0)
    return np.maximum(a, a.T)


def build_st_from_tasks(task_series: Sequence[np.ndarray], threshold: float = 0.7, mode: str = "abs") -> np.ndarray:
    """OR-combine per-task correlation graphs (callers pass train-split columns only)."""
    out = None
    for s in task_series:
        a = build_st_correlation(s, threshold, mode)
        out = a if out is None else np.maximum(out, a)
    return out


def basic_matrices(a_s: np.ndarray, task_series: Sequence[np.ndarray], threshold: float = 0.7,
                   mode: str = "abs") -> BasicMatrices:
    n = a_s.shape[0]
    return BasicMatrices(a_s=a_s, a_t=np.eye(n), a_st=build_st_from_tasks(task_series, threshold, mode),
                         threshold=threshold)


def assemble_prior(b: BasicMatrices, layout: str = "P1") -> GraphPrior:
    if layout not in LAYOUTS:
        raise InputError(f"unknown layout {layout!r}; choose from {LAYOUTS}")
    n = b.n
    first, second = (getattr(b, name) for name in _LAYOUT_BLOCKS[layout])
    zero = np.zeros((n, n))
    a_p = np.block([
        [b.a_s, first, zero],
        [first, b.a_s, second],
        [zero, second, b.a_s],
    ])
    return GraphPrior(layout=layout, a_p=a_p, n=n, m=3)


def read_edge_list(path: str | Path) -> list[tuple[int, int]]:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["src", "dst"]:
                raise LoadError(f"{path}: expected header 'src,dst', got {header}")
            edges = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 2:
                    raise LoadError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
                try:
                    edges.append((int(row[0]), int(row[1])))
                except ValueError as exc:
                    raise LoadError(f"{path}:{lineno}: non-integer node id in {row}") from exc
    except OSError as exc:
        raise LoadError(f"cannot read edge list {path}: {exc}") from exc
    return edges


def write_edge_list(path: str | Path, edges: Iterable[Sequence[int]]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src", "dst"])
        for i, j in edges:
            w.writerow([int(i), int(j)])


def write_matrix_csv(path: str | Path, a: np.ndarray, fmt: str = "%.17g") -> None:
    """Dump a matrix as headerless CSV (0/1 matrices come out as integers)."""
    if np.all((a == 0) | (a == 1)):
        fmt = "%d"
    np.savetxt(path, a, delimiter=",", fmt=fmt)
