"""Time-series CSV ingestion, windowing/splitting, z-score scaling, synthetic data."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError, LoadError
from .graph import read_edge_list, write_edge_list

SPLITS = ("train", "val", "test")


@dataclass
class TaskDataset:
    name: str
    series: np.ndarray  # (N, L), rows are nodes
    interval_minutes: int = 5
    start: str | None = None

    @property
    def n_nodes(self) -> int:
        return self.series.shape[0]

    @property
    def length(self) -> int:
        return self.series.shape[1]


@dataclass
class Scaler:
    """Per-task z-score parameters (one mean/std per task, pooled over nodes)."""

    mean: np.ndarray
    std: np.ndarray

    def normalize(self, x: np.ndarray) -> np.ndarray:
        """x has tasks on its last axis."""
        return (x - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean


@dataclass
class WindowedSplit:
    split: str
    inputs: np.ndarray    # (S, N, T, K, C), normalized
    targets: np.ndarray   # (S, N, K), normalized
    scaler: Scaler
    sample_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self) -> int:
        return self.inputs.shape[0]


# -- CSV ------------------------------------------------------------------

def _parse_time(text: str, path: Path, lineno: int) -> datetime | int:
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return datetime.fromisoformat(text)
    except ValueError as exc:
        raise LoadError(f"{path}:{lineno}: unparseable timestamp {text!r}") from exc


def _minutes(delta) -> float:
    return delta.total_seconds() / 60.0 if isinstance(delta, timedelta) else float(delta)


def load_csv(path: str | Path, name: str | None = None) -> TaskDataset:
    """Read ``timestamp,node_0,...,node_{N-1}``; timestamps are ISO-8601 or integer minutes."""
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise LoadError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "timestamp" or len(header) < 2:
            raise LoadError(f"{path}: header must start with 'timestamp' followed by node columns")
        n = len(header) - 1
        times, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n + 1:
                raise LoadError(f"{path}:{lineno}: expected {n + 1} fields, got {len(row)}")
            times.append(_parse_time(row[0], path, lineno))
            vals = []
            for cell in row[1:]:
                cell = cell.strip()
                try:
                    v = float(cell)
                except ValueError:
                    v = math.nan
                if not math.isfinite(v):
                    raise LoadError(f"{path}:{lineno}: missing or non-numeric value {cell!r}")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise LoadError(f"{path}: no data rows")
    if len({type(t) for t in times}) > 1:
        raise LoadError(f"{path}: mixed timestamp formats")
    interval = None
    for i in range(1, len(times)):
        gap = _minutes(times[i] - times[i - 1])
        if gap <= 0:
            raise LoadError(f"{path}:{i + 2}: timestamps not strictly increasing")
        if interval is None:
            interval = gap
        elif gap != interval:
            raise LoadError(f"{path}:{i + 2}: gap of {gap:g} min differs from interval {interval:g} min")
    start = times[0].isoformat() if isinstance(times[0], datetime) else str(times[0])
    return TaskDataset(name=name or path.stem, series=np.array(rows, dtype=np.float64).T,
                       interval_minutes=int(interval) if interval else 1, start=start)


def write_csv(path: str | Path, ds: TaskDataset) -> None:
    start = datetime.fromisoformat(ds.start) if ds.start else datetime(2018, 1, 1)
    step = timedelta(minutes=ds.interval_minutes)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp"] + [f"node_{i}" for i in range(ds.n_nodes)])
        for j in range(ds.length):
            w.writerow([(start + j * step).isoformat()] + [repr(float(v)) for v in ds.series[:, j]])


# -- manifest -------------------------------------------------------------

@dataclass
class Manifest:
    tasks: list[Path]
    task_names: list[str]
    edges: Path
    interval_minutes: int = 5
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)

    @classmethod
    def read(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        try:
            lines = path.read_text().splitlines()
        except OSError as exc:
            raise LoadError(f"cannot read manifest {path}: {exc}") from exc
        kv = {}
        for lineno, line in enumerate(lines, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise LoadError(f"{path}:{lineno}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            kv[k] = v
        missing = {"tasks", "edges"} - kv.keys()
        if missing:
            raise LoadError(f"{path}: missing keys {sorted(missing)}")
        base = path.parent
        tasks = [base / t.strip() for t in kv["tasks"].split(",")]
        names = [s.strip() for s in kv.get("task_names", "").split(",") if s.strip()] or [t.stem for t in tasks]
        if len(names) != len(tasks):
            raise LoadError(f"{path}: {len(names)} task names for {len(tasks)} task files")
        try:
            split = tuple(float(s) for s in kv.get("split", "0.6,0.2,0.2").split(","))
            interval = int(kv.get("interval_minutes", "5"))
        except ValueError as exc:
            raise LoadError(f"{path}: bad numeric value: {exc}") from exc
        if len(split) != 3:
            raise LoadError(f"{path}: split needs three ratios")
        return cls(tasks=tasks, task_names=names, edges=base / kv["edges"], interval_minutes=interval, split=split)

    def write(self, path: str | Path) -> None:
        path = Path(path)
        rel = lambda p: Path(p).name if Path(p).parent == path.parent else str(p)  # noqa: E731
        text = (
            f"tasks = {','.join(rel(t) for t in self.tasks)}\n"
            f"task_names = {','.join(self.task_names)}\n"
            f"edges = {rel(self.edges)}\n"
            f"interval_minutes = {self.interval_minutes}\n"
            f"split = {','.join(repr(float(r)) for r in self.split)}\n"
        )
        path.write_text(text)

    def load(self) -> tuple[list[TaskDataset], list[tuple[int, int]]]:
        tasks = [load_csv(p, name) for p, name in zip(self.tasks, self.task_names)]
        check_compatible(tasks)
        if tasks[0].length > 1 and tasks[0].interval_minutes != self.interval_minutes:
            raise LoadError(f"manifest says {self.interval_minutes} min between samples, "
                            f"data has {tasks[0].interval_minutes}")
        return tasks, read_edge_list(self.edges)


def check_compatible(tasks: Sequence[TaskDataset]) -> None:
    if not tasks:
        raise InputError("no tasks given")
    ref = tasks[0]
    for t in tasks[1:]:
        if t.series.shape != ref.series.shape or t.interval_minutes != ref.interval_minutes:
            raise InputError(
                f"task {t.name!r} has shape {t.series.shape} at {t.interval_minutes} min, "
                f"task {ref.name!r} has {ref.series.shape} at {ref.interval_minutes} min"
            )


# -- windowing --------------------------------------------------------------

def split_sizes(n_samples: int, ratios: Sequence[float] = (0.6, 0.2, 0.2)) -> tuple[int, int, int]:
    """Val/test sizes are ratio * n rounded half-up; train takes the rest."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InputError(f"split ratios must be three nonnegative numbers summing to 1, got {ratios}")
    n_val = int(math.floor(ratios[1] * n_samples + 0.5))
    n_test = int(math.floor(ratios[2] * n_samples + 0.5))
    return n_samples - n_val - n_test, n_val, n_test


def train_columns(length: int, history: int, ratios: Sequence[float] = (0.6, 0.2, 0.2)) -> int:
    """Number of leading columns touched by training samples (inputs and targets)."""
    n_train, _, _ = split_sizes(length - history, ratios)
    return n_train + history


def fit_scaler(tasks: Sequence[TaskDataset], n_columns: int) -> Scaler:
    means, stds = [], []
    for t in tasks:
        block = t.series[:, :n_columns]
        mu = float(block.mean())
        sd = float(block.std())
        if not sd > 0:
            warnings.warn(f"task {t.name!r} has zero variance in the training split; using scale 1", stacklevel=2)
            sd = 1.0
        means.append(mu)
        stds.append(sd)
    return Scaler(np.array(means), np.array(stds))


def window_and_split(tasks: Sequence[TaskDataset], history: int = 12,
                     ratios: Sequence[float] = (0.6, 0.2, 0.2), scaler: Scaler | None = None
                     ) -> dict[str, WindowedSplit]:
    """Horizon-1 windows: sample j reads columns [j, j+T) and predicts column j+T.

    The scaler is fitted on the training columns unless one is given (as when
    evaluating a checkpoint, which carries its own).
    """
    check_compatible(tasks)
    length = tasks[0].length
    if length < history + 1:
        raise InputError(f"series of length {length} is too short for history {history}")
    n_samples = length - history
    sizes = split_sizes(n_samples, ratios)
    if scaler is None:
        scaler = fit_scaler(tasks, sizes[0] + history)
    stacked = np.stack([t.series for t in tasks], axis=-1)    # (N, L, K)
    z = scaler.normalize(stacked)
    idx = np.arange(n_samples)
    windows = np.lib.stride_tricks.sliding_window_view(z, history, axis=1)  # (N, L-T+1, K, T)
    inputs = windows[:, :n_samples].transpose(1, 0, 3, 2)[..., None]     # (S, N, T, K, 1)
    targets = z[:, history:].transpose(1, 0, 2)                          # (S, N, K)
    out, lo = {}, 0
    for name, size in zip(SPLITS, sizes):
        sl = slice(lo, lo + size)
        out[name] = WindowedSplit(name, np.ascontiguousarray(inputs[sl]), np.ascontiguousarray(targets[sl]),
                                  scaler, idx[sl])
        lo += size
    return out


# -- synthetic data ----------------------------------------------------------

def ring_edges(n: int) -> list[tuple[int, int]]:
    if n == 2:
        return [(0, 1)]
    return [(i, (i + 1) % n) for i in range(n)]


def _diffused_ar(rng: np.random.Generator, n: int, length: int, rho: float, sigma: float,
                 diffusion: np.ndarray, burn_in: int = 200) -> np.ndarray:
    z = np.zeros(n)
    out = np.empty((n, length))
    for j in range(burn_in + length):
        z = rho * z + sigma * rng.standard_normal(n)
        if j >= burn_in:
            out[:, j - burn_in] = diffusion @ z
    return out


def synth_coupled(n_nodes: int, length: int, coupling: float = 0.8, seed: int = 0,
                  interval_minutes: int = 5) -> tuple[TaskDataset, TaskDataset, list[tuple[int, int]]]:
    """Two coupled traffic-like tasks on a ring graph.

    Flow: daily sinusoid (per-node phase and amplitude) plus AR(1) noise
    diffused over the ring.  Speed: ``c * g(flow) + (1 - c) * eta`` where g
    is a decreasing affine map into a speed-like range and eta is an
    independent diffused AR(1) process with the same mean and spread as
    g(flow).
    """
    if n_nodes < 2:
        raise InputError(f"need at least 2 nodes, got {n_nodes}")
    if length < 2:
        raise InputError(f"length must be at least 2, got {length}")
    if not 0.0 <= coupling <= 1.0:
        raise InputError(f"coupling must be in [0, 1], got {coupling}")
    rng = np.random.default_rng(seed)
    edges = ring_edges(n_nodes)
    ring = np.zeros((n_nodes, n_nodes))
    for i, j in edges:
        ring[i, j] = ring[j, i] = 1.0
    diffusion = np.eye(n_nodes) + 0.5 * ring
    diffusion /= diffusion.sum(axis=1, keepdims=True)

    steps_per_day = 24 * 60 // interval_minutes
    t = np.arange(length)
    phase = 2 * np.pi * (np.arange(n_nodes) / n_nodes) * 0.25 + rng.uniform(-0.2, 0.2, n_nodes)
    amp = rng.uniform(150.0, 250.0, n_nodes)
    base = rng.uniform(40.0, 80.0, n_nodes)
    daily = 0.5 * (1 - np.cos(2 * np.pi * t[None, :] / steps_per_day + phase[:, None]))
    flow = base[:, None] + amp[:, None] * daily
    flow += _diffused_ar(rng, n_nodes, length, rho=0.95, sigma=3.0, diffusion=diffusion)

    speed_of_flow = 75.0 - 0.12 * flow
    eta = _diffused_ar(rng, n_nodes, length, rho=0.98, sigma=1.0, diffusion=diffusion)
    eta = (eta - eta.mean(axis=1, keepdims=True)) / eta.std(axis=1, keepdims=True)
    eta = speed_of_flow.mean(axis=1, keepdims=True) + speed_of_flow.std(axis=1, keepdims=True) * eta
    speed = coupling * speed_of_flow + (1.0 - coupling) * eta

    start = datetime(2018, 1, 1).isoformat()
    return (TaskDataset("flow", flow, interval_minutes, start),
            TaskDataset("speed", speed, interval_minutes, start),
            edges)


def write_synthetic(out_dir: str | Path, n_nodes: int, length: int, coupling: float, seed: int,
                    interval_minutes: int = 5) -> Path:
    """Write flow.csv, speed.csv, edges.csv and manifest.txt; return the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    a, b, edges = synth_coupled(n_nodes, length, coupling, seed, interval_minutes)
    write_csv(out / "flow.csv", a)
    write_csv(out / "speed.csv", b)
    write_edge_list(out / "edges.csv", edges)
    manifest = Manifest([out / "flow.csv", out / "speed.csv"], ["flow", "speed"], out / "edges.csv",
                        interval_minutes)
    manifest.write(out / "manifest.txt")
    return out / "manifest.txt"
