"""Versioned parameter archive shared by every module.

Layout (little-endian)::

    magic b"CTXC" | u32 version | u32 meta_len | meta (UTF-8 JSON, sorted keys)
    u32 n_arrays
    per array: u32 name_len | name | u32 ndim | u32 dims[ndim] | float32 data

Non-float buffers are stored as float32 and cast back on load.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from .corpus.types import SpeakerPitchStats
from .errors import InvalidInputError
from .model import ContextTTS, ModelConfig
from .text_context import make_provider

MAGIC = b"CTXC"
VERSION = 1


def write_arrays(path, meta: dict, arrays: Dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<4sII", MAGIC, VERSION, len(meta_raw)))
    buf.write(meta_raw)
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)) + raw)
        buf.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_arrays(path):
    data = Path(path).read_bytes()
    magic, version, meta_len = struct.unpack_from("<4sII", data, 0)
    if magic != MAGIC:
        raise InvalidInputError(f"{path}: not a checkpoint")
    if version != VERSION:
        raise InvalidInputError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    arrays = {}
    for _ in range(n):
        (name_len,) = struct.unpack_from("<I", data, pos)
        name = data[pos + 4:pos + 4 + name_len].decode("utf-8")
        pos += 4 + name_len
        (ndim,) = struct.unpack_from("<I", data, pos)
        shape = struct.unpack_from(f"<{ndim}I", data, pos + 4)
        pos += 4 + 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
        pos += 4 * count
    return meta, arrays


@dataclass
class Bundle:
    """A model together with everything needed to feed it and read its output."""

    model: ContextTTS
    vocab: List[str]
    speakers: List[str]
    stats: Dict[str, SpeakerPitchStats]
    step: int = 0
    train_config: dict = field(default_factory=dict)
    optimizer_state: Optional[dict] = None

    @property
    def config(self) -> ModelConfig:
        return self.model.cfg


def save_checkpoint(bundle: Bundle, path, optimizer: Optional[torch.optim.Optimizer] = None) -> Path:
    model = bundle.model
    meta = {
        "model_config": model.cfg.to_dict(),
        "vocab": bundle.vocab,
        "speakers": bundle.speakers,
        "stats": {k: [s.mu, s.sigma, s.degenerate] for k, s in bundle.stats.items()},
        "step": bundle.step,
        "train_config": bundle.train_config,
    }
    arrays = {f"model.{k}": v.detach().cpu().float().numpy() for k, v in model.state_dict().items()}
    state = optimizer.state_dict() if optimizer is not None else bundle.optimizer_state
    if state is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        ordered = [p for g in (optimizer.param_groups if optimizer else []) for p in g["params"]]
        meta["optimizer_steps"] = {}
        if optimizer is not None:
            for idx, p in enumerate(ordered):
                s = state["state"].get(idx)
                if not s:
                    continue
                name = names[id(p)]
                arrays[f"optim.{name}.exp_avg"] = s["exp_avg"].detach().float().numpy()
                arrays[f"optim.{name}.exp_avg_sq"] = s["exp_avg_sq"].detach().float().numpy()
                meta["optimizer_steps"][name] = int(s["step"])
        else:
            arrays.update(state["arrays"])
            meta["optimizer_steps"] = state["steps"]
    write_arrays(path, meta, arrays)
    return Path(path)


def load_checkpoint(path) -> Bundle:
    if not Path(path).exists():
        raise InvalidInputError(f"checkpoint not found: {path}")
    meta, arrays = read_arrays(path)
    cfg = ModelConfig.from_dict(meta["model_config"])
    model = ContextTTS(cfg, make_provider(cfg.provider))
    own = model.state_dict()
    state = {}
    for name, ref in own.items():
        key = f"model.{name}"
        if key not in arrays:
            raise InvalidInputError(f"checkpoint is missing parameter {name!r}")
        if tuple(arrays[key].shape) != tuple(ref.shape):
            raise InvalidInputError(f"shape mismatch for {name!r}: {arrays[key].shape} vs {tuple(ref.shape)}")
        state[name] = torch.from_numpy(arrays[key]).to(ref.dtype)
    model.load_state_dict(state)
    model.eval()
    stats = {k: SpeakerPitchStats(k, v[0], v[1], bool(v[2])) for k, v in meta["stats"].items()}
    optimizer_state = None
    if "optimizer_steps" in meta:
        optimizer_state = {"steps": meta["optimizer_steps"],
                           "arrays": {k: v for k, v in arrays.items() if k.startswith("optim.")}}
    return Bundle(model=model, vocab=meta["vocab"], speakers=meta["speakers"], stats=stats, step=meta["step"],
                  train_config=meta["train_config"], optimizer_state=optimizer_state)


def restore_optimizer(bundle: Bundle, optimizer: torch.optim.Optimizer) -> None:
    """Load saved Adam moments into a freshly built optimizer."""
    if not bundle.optimizer_state:
        return
    params = dict(bundle.model.named_parameters())
    arrays, steps = bundle.optimizer_state["arrays"], bundle.optimizer_state["steps"]
    for name, step in steps.items():
        p = params[name]
        optimizer.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": torch.from_numpy(arrays[f"optim.{name}.exp_avg"]).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(arrays[f"optim.{name}.exp_avg_sq"]).to(p.dtype),
        }
