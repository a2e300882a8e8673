"""Checkpoint files: an 8-byte little-endian header length, a JSON manifest,
then raw little-endian float32 arrays in manifest order."""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, Transformer
from .numerics import DTYPE

MAGIC = "treekv-checkpoint"
VERSION = 1


class CheckpointError(IOError):
    pass


def _arrays(model: Transformer, opt_state=None) -> list[tuple[str, torch.Tensor]]:
    out = [(n, p.detach()) for n, p in model.named_parameters()]
    if opt_state is not None:
        out += [(f"adam.m.{n}", t) for n, t in sorted(opt_state.m.items())]
        out += [(f"adam.v.{n}", t) for n, t in sorted(opt_state.v.items())]
    return out


def save_checkpoint(model: Transformer, path, train_config: dict | None = None,
                    extra: dict | None = None, opt_state=None) -> dict:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blobs, entries, offset = [], [], 0
    for name, t in _arrays(model, opt_state):
        data = t.cpu().numpy().astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": "float32",
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    manifest = {
        "format": MAGIC, "version": VERSION,
        "model_config": model.cfg.to_dict(),
        "train_config": train_config or {},
        "extra": extra or {},
        "adam_step": opt_state.step if opt_state is not None else None,
        "params": entries,
        "data_bytes": offset,
    }
    header = json.dumps(manifest).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)
    return manifest


def read_manifest(path) -> tuple[dict, bytes]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 8:
        raise CheckpointError("checkpoint truncated before header")
    (n,) = struct.unpack("<Q", raw[:8])
    if 8 + n > len(raw):
        raise CheckpointError("checkpoint truncated inside header")
    try:
        manifest = json.loads(raw[8: 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    if not isinstance(manifest, dict) or manifest.get("format") != MAGIC:
        raise CheckpointError("not a treekv checkpoint")
    data = raw[8 + n:]
    if len(data) != manifest.get("data_bytes"):
        raise CheckpointError(f"checkpoint data has {len(data)} bytes, manifest says "
                              f"{manifest.get('data_bytes')}")
    return manifest, data


def load_checkpoint(path, with_optimizer: bool = False):
    """Returns (model, manifest) or (model, manifest, AdamState)."""
    from .trainer import AdamState

    manifest, data = read_manifest(path)
    try:
        cfg = ModelConfig(**manifest["model_config"])
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"bad model config in checkpoint: {e}") from None
    model = Transformer(cfg)
    params = dict(model.named_parameters())
    state = AdamState(step=manifest.get("adam_step") or 0)
    seen = set()
    for e in manifest["params"]:
        name, shape = e["name"], tuple(e["shape"])
        start, nbytes = e["offset"], e["nbytes"]
        if start + nbytes > len(data) or nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"array {name} does not fit its manifest entry")
        arr = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=start).reshape(shape)
        t = torch.from_numpy(arr.astype(np.float64))
        if name.startswith("adam."):
            _, kind, pname = name.split(".", 2)
            getattr(state, kind)[pname] = t.to(DTYPE)
            continue
        if name not in params:
            raise CheckpointError(f"unexpected parameter {name}")
        if tuple(params[name].shape) != shape:
            raise CheckpointError(f"shape mismatch for {name}: {shape} vs {tuple(params[name].shape)}")
        with torch.no_grad():
            params[name].copy_(t)
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)}")
    if with_optimizer:
        return model, manifest, state
    return model, manifest
