"""Versioned checkpoint container.

    magic  b"WRISCKPT"
    u32    format version (little-endian)
    u64    header length
    bytes  UTF-8 JSON header: kind, config snapshot, extra metadata and a tensor
           table [{name, shape, offset}], offsets relative to the payload start
    bytes  payload: every tensor as little-endian float32, in table order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch

MAGIC = b"WRISCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    path: str | Path,
    tensors: dict[str, torch.Tensor],
    config: dict[str, Any],
    kind: str,
    extra: dict[str, Any] | None = None,
) -> None:
    table, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")  # 0-d comes back as 1-d
        table.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(
        {"kind": kind, "config": config, "extra": extra or {}, "tensors": table}, sort_keys=True
    ).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    """Returns (tensors, header) where header has kind/config/extra."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    data = path.read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = len(MAGIC) + struct.calcsize("<IQ")
    header = json.loads(data[start : start + hlen])
    payload = memoryview(data)[start + hlen :]
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        tensors[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).astype(np.float32))
    return tensors, header


def pack_training_state(model: torch.nn.Module, optimizer: torch.optim.Optimizer | None) -> dict[str, torch.Tensor]:
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for p, state in optimizer.state.items():
            for key, value in state.items():
                tensors[f"optim/{names[id(p)]}/{key}"] = torch.as_tensor(value, dtype=torch.float32)
    return tensors


def unpack_training_state(
    tensors: dict[str, torch.Tensor], model: torch.nn.Module, optimizer: torch.optim.Optimizer | None
) -> None:
    state = {k[len("model/") :]: v for k, v in tensors.items() if k.startswith("model/")}
    try:
        missing, unexpected = model.load_state_dict(state, strict=False)
    except RuntimeError as exc:
        raise CheckpointError(f"parameter mismatch: {exc}") from None
    if missing or unexpected:
        raise CheckpointError(f"parameter mismatch: missing={missing} unexpected={unexpected}")
    if optimizer is None:
        return
    params = dict(model.named_parameters())
    for key, value in tensors.items():
        if not key.startswith("optim/"):
            continue
        name, field = key[len("optim/") :].rsplit("/", 1)
        optimizer.state[params[name]][field] = value.clone()
