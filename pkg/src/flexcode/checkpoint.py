"""Flat named-tensor container: a JSON header with shapes, then raw little-endian bytes."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

MAGIC = b"FLEXCKPT1"


def save_tensors(path: str | Path, tensors: dict[str, torch.Tensor | np.ndarray], meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = tensors[name]
        arr = arr.detach().cpu().numpy() if torch.is_tensor(arr) else np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        # tobytes is C-ordered for any layout; 0-d arrays keep their shape
        raw = arr.astype(dtype).tobytes(order="C")
        entries.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(MAGIC + b" " + str(len(header)).encode() + b"\n")
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    first, rest = data.split(b"\n", 1)
    magic, length = first.split(b" ")
    if magic != MAGIC:
        raise ValueError(f"{path}: not a checkpoint container")
    n = int(length)
    header = json.loads(rest[:n])
    body = rest[n:]
    out = {}
    for e in header["tensors"]:
        raw = body[e["offset"]: e["offset"] + e["nbytes"]]
        out[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return out, header["meta"]


def module_tensors(prefix: str, module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module(prefix: str, module: torch.nn.Module, tensors: dict[str, np.ndarray]) -> None:
    own = module.state_dict()
    state = {}
    for k, ref in own.items():
        key = f"{prefix}.{k}"
        if key not in tensors:
            raise KeyError(f"checkpoint lacks {key}")
        state[k] = torch.as_tensor(tensors[key]).to(ref.dtype)
    module.load_state_dict(state)
