"""Versioned binary container for named tensors, and training checkpoints.

Layout: 8 magic bytes, a little-endian u32 format version, a u64 header
length, a JSON header, then the raw tensor payloads concatenated in header
order. The header carries a caller-supplied metadata dict plus the tensor
manifest (name, dtype, shape). Writing is deterministic: the same state
always produces the same bytes, so save -> load -> save round-trips
byte-identically.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"MDETCKPT"
VERSION = 1

_OPTIM_PREFIX = "optim."
_MODEL_PREFIX = "model."


def write_tensor_container(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays plus a JSON-serializable metadata dict."""
    manifest = []
    payloads = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        manifest.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape)})
        payloads.append(arr.tobytes())
    header = json.dumps({"meta": meta or {}, "tensors": manifest},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for p in payloads:
            f.write(p)


def read_tensor_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container; returns (meta, tensors). Raises CheckpointError
    with a distinct message for bad magic, unsupported version, or a
    truncated payload."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 12 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a tensor container (bad magic bytes)")
    version = struct.unpack_from("<I", raw, len(MAGIC))[0]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}, "
                              f"expected {VERSION}")
    header_len = struct.unpack_from("<Q", raw, len(MAGIC) + 4)[0]
    start = len(MAGIC) + 12
    if len(raw) < start + header_len:
        raise CheckpointError(f"{path}: truncated container header")
    header = json.loads(raw[start:start + header_len].decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    offset = start + header_len
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = dtype.itemsize * count
        if offset + nbytes > len(raw):
            raise CheckpointError(
                f"{path}: truncated container payload at tensor '{entry['name']}'")
        arr = np.frombuffer(raw[offset:offset + nbytes], dtype=dtype).reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: container has {len(raw) - offset} trailing bytes")
    return header["meta"], tensors


@dataclass
class CheckpointData:
    """Deserialized checkpoint: config echo, step counter, and raw states.

    `optim_state` has the layout torch optimizers expect from
    `Optimizer.state_dict()`, or is None when the checkpoint carried none.
    """

    step: int
    config_echo: dict
    model_state: dict[str, torch.Tensor]
    optim_state: dict | None = None


def save_checkpoint(path, *, step: int, config_echo: dict,
                    model_state: dict[str, torch.Tensor],
                    optim_state_dict: dict | None = None) -> None:
    """Serialize model parameters/buffers and (optionally) optimizer state.

    `config_echo` must be JSON-serializable; it is stored verbatim so a
    checkpoint suffices to rebuild the model it came from.
    """
    tensors: dict[str, np.ndarray] = {}
    for name, t in model_state.items():
        tensors[_MODEL_PREFIX + name] = t.detach().cpu().numpy()
    meta = {"step": step, "config": config_echo, "optim_groups": []}
    if optim_state_dict is not None:
        meta["optim_groups"] = optim_state_dict["param_groups"]
        for idx, state in optim_state_dict["state"].items():
            for key, val in state.items():
                name = f"{_OPTIM_PREFIX}{idx}.{key}"
                if isinstance(val, torch.Tensor):
                    tensors[name] = val.detach().cpu().numpy()
                else:
                    tensors[name] = np.asarray(val)
    write_tensor_container(path, tensors, meta)


def load_checkpoint(path) -> CheckpointData:
    meta, tensors = read_tensor_container(path)
    model_state: dict[str, torch.Tensor] = {}
    optim_state: dict[int, dict] = {}
    for name, arr in tensors.items():
        if name.startswith(_MODEL_PREFIX):
            model_state[name[len(_MODEL_PREFIX):]] = torch.from_numpy(arr.copy())
        elif name.startswith(_OPTIM_PREFIX):
            idx_str, key = name[len(_OPTIM_PREFIX):].split(".", 1)
            optim_state.setdefault(int(idx_str), {})[key] = torch.from_numpy(arr.copy())
        else:
            raise CheckpointError(f"{path}: unexpected tensor '{name}' in checkpoint")
    optim = None
    if optim_state or meta.get("optim_groups"):
        optim = {"state": optim_state, "param_groups": meta.get("optim_groups", [])}
    return CheckpointData(step=int(meta["step"]), config_echo=meta["config"],
                          model_state=model_state, optim_state=optim)
