"""Versioned checkpoint container.

A zip archive (fixed member timestamps, so identical contents give
identical bytes) holding ``meta.json`` and one ``.npy`` member per named
tensor.  ``meta.json`` records the format tag, dims, every config block,
task names, scaler and the shape of each tensor.
"""
from __future__ import annotations

import dataclasses
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import Dims, ModelConfig
from .data import Scaler
from .errors import LoadError
from .model import DGSTMTL

FORMAT = "dgstmtl-checkpoint/1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    model: DGSTMTL
    task_names: list[str]
    scaler: Scaler
    extra: dict = field(default_factory=dict)


def _member(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, payload)


def save(path: str | Path, ckpt: Checkpoint) -> None:
    model = ckpt.model
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {
        "format": FORMAT,
        "dims": dataclasses.asdict(model.dims),
        "model_config": dataclasses.asdict(model.cfg),
        "task_names": list(ckpt.task_names),
        "scaler": {"mean": ckpt.scaler.mean.tolist(), "std": ckpt.scaler.std.tolist()},
        "tensors": {k: list(v.shape) for k, v in state.items()},
        "extra": ckpt.extra,
    }
    with zipfile.ZipFile(path, "w") as zf:
        _member(zf, "meta.json", json.dumps(meta, indent=1, sort_keys=True).encode())
        for name, arr in sorted(state.items()):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            _member(zf, f"tensors/{name}.npy", buf.getvalue())


def load(path: str | Path) -> Checkpoint:
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise LoadError(f"cannot open checkpoint {path}: {exc}") from exc
    with zf:
        try:
            meta = json.loads(zf.read("meta.json"))
        except KeyError as exc:
            raise LoadError(f"{path}: no meta.json member") from exc
        if meta.get("format") != FORMAT:
            raise LoadError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        state = {}
        for name, shape in meta["tensors"].items():
            arr = np.lib.format.read_array(io.BytesIO(zf.read(f"tensors/{name}.npy")), allow_pickle=False)
            if list(arr.shape) != shape:
                raise LoadError(f"{path}: tensor {name} has shape {arr.shape}, header says {shape}")
            state[name] = torch.from_numpy(arr)
    dims = Dims(**meta["dims"])
    cfg = ModelConfig(**meta["model_config"])
    prior = state["a_p"].numpy() if "a_p" in state else None
    model = DGSTMTL(dims, cfg, prior)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise LoadError(f"{path}: parameters do not match the recorded configuration: {exc}") from exc
    scaler = Scaler(np.array(meta["scaler"]["mean"]), np.array(meta["scaler"]["std"]))
    return Checkpoint(model, meta["task_names"], scaler, meta.get("extra", {}))
