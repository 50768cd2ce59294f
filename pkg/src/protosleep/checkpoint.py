"""Self-describing single-file checkpoints.

Layout::

    PROTOSLEEP-CKPT\\n
    version 1\\n
    header <n>\\n
    <n bytes of UTF-8 JSON header>
    <array data>

The JSON header carries the model/data/loss configuration, derived dimensions,
prototype metadata, a training summary and an ``arrays`` directory of
``{name, dtype, shape, offset, nbytes}``. Offsets are relative to the first byte
after the header. Arrays are little-endian (``<f4``, ``<f8`` or ``<i8``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import DatasetConfig
from .errors import FormatError, LoadError
from .losses import LossWeights
from .model import ModelConfig, PrototypeSleepNet, model_dims
from .sensing import PrototypeMeta

MAGIC = b"PROTOSLEEP-CKPT\n"
VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}


@dataclass
class Checkpoint:
    model_config: ModelConfig
    data_config: DatasetConfig
    state: dict[str, np.ndarray]
    prototype_meta: list[PrototypeMeta]
    loss_weights: LossWeights = field(default_factory=LossWeights)
    training: dict = field(default_factory=dict)
    seed: int = 0

    def header(self, dims: dict) -> dict:
        return {
            "version": VERSION,
            "model": self.model_config.to_dict(),
            "data": vars(self.data_config).copy(),
            "loss_weights": vars(self.loss_weights).copy(),
            "dims": dims,
            "seed": self.seed,
            "prototype_meta": [m.to_dict() for m in self.prototype_meta],
            "training": self.training,
        }


def from_model(model: PrototypeSleepNet, loss_weights=None, training=None, seed: int = 0) -> Checkpoint:
    state = {}
    for name, t in model.state_dict().items():
        if t.dtype not in _DTYPES:
            raise FormatError(f"unsupported dtype {t.dtype} for {name}")
        state[name] = t.detach().cpu().numpy().astype(_DTYPES[t.dtype], copy=True)
    return Checkpoint(
        model.cfg,
        model.data_cfg,
        state,
        [PrototypeMeta.from_dict(m.to_dict()) for m in model.bank.meta],
        loss_weights or LossWeights(),
        dict(training or {}),
        seed,
    )


def to_model(ckpt: Checkpoint) -> PrototypeSleepNet:
    model = PrototypeSleepNet(ckpt.model_config, ckpt.data_config, seed=ckpt.seed)
    ref = model.state_dict()
    state = {}
    for k, v in ckpt.state.items():
        t = torch.from_numpy(np.array(v, copy=True))
        state[k] = t.to(ref[k].dtype) if k in ref else t
    if any(v.dtype == torch.float64 for v in state.values()):
        model = model.double()
    model.load_state_dict(state)
    model.bank.meta = [PrototypeMeta.from_dict(m.to_dict()) for m in ckpt.prototype_meta]
    model.eval()
    return model


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    arrays, blobs, offset = [], [], 0
    for name in sorted(ckpt.state):
        a = np.ascontiguousarray(ckpt.state[name])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        arrays.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = ckpt.header(model_dims(ckpt.model_config, ckpt.data_config))
    header["arrays"] = arrays
    hbytes = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(f"version {VERSION}\n".encode())
        f.write(f"header {len(hbytes)}\n".encode())
        f.write(hbytes)
        for raw in blobs:
            f.write(raw)
    return path


def read_header(path) -> tuple[dict, int]:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        if f.readline() != MAGIC:
            raise FormatError(f"{path}: not a checkpoint (bad magic)")
        vline = f.readline().decode().split()
        if len(vline) != 2 or vline[0] != "version":
            raise FormatError(f"{path}: missing version tag")
        if int(vline[1]) != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {vline[1]}")
        hline = f.readline().decode().split()
        if len(hline) != 2 or hline[0] != "header":
            raise FormatError(f"{path}: missing header length")
        header = json.loads(f.read(int(hline[1])))
        return header, f.tell()


def load_checkpoint(path) -> Checkpoint:
    header, start = read_header(path)
    data = Path(path).read_bytes()[start:]
    state = {}
    for a in header["arrays"]:
        raw = data[a["offset"] : a["offset"] + a["nbytes"]]
        if len(raw) != a["nbytes"]:
            raise FormatError(f"{path}: array {a['name']} truncated")
        state[a["name"]] = np.frombuffer(raw, dtype=np.dtype(a["dtype"])).reshape(a["shape"])
    return Checkpoint(
        ModelConfig.from_dict(header["model"]),
        DatasetConfig(**header["data"]),
        state,
        [PrototypeMeta.from_dict(m) for m in header["prototype_meta"]],
        LossWeights(**header["loss_weights"]),
        header.get("training", {}),
        int(header.get("seed", 0)),
    )


def load_model(path) -> PrototypeSleepNet:
    return to_model(load_checkpoint(path))


def save_model(model: PrototypeSleepNet, path, **kw) -> Path:
    return save_checkpoint(from_model(model, **kw), path)
