"""FCFT checkpoint container.

Layout (little-endian)::

    b"FCFT"  u16 version  u32 header_len  header (canonical JSON, UTF-8)
    u32 n_entries
    repeated: u32 path_len  path (UTF-8)  u32 ndim  u32 dims[ndim]  f32 data[prod(dims)]

The header carries the model config, seed, freeze plan, LoRA config and
optimizer hyper-parameters; optimizer moments are stored as entries named
``optim.m.<path>`` and ``optim.v.<path>``.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .model import FreezePlan, LoraConfig, Model, ModelConfig, apply_freeze_plan, attach_lora, build_model
from .objectives import AdamWState

MAGIC = b"FCFT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def encode(header: dict, entries: dict[str, np.ndarray]) -> bytes:
    head = canonical_json(header).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(head)), head, struct.pack("<I", len(entries))]
    for path, arr in entries.items():
        name = path.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4", order="C")
        parts.append(struct.pack("<I", len(name)))
        parts.append(name)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError(f"bad magic {bytes(view[:4])!r}, expected {MAGIC!r}")
    pos = 4

    def take(fmt: str) -> tuple:
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise CheckpointError("checkpoint truncated")
        out = struct.unpack_from(fmt, view, pos)
        pos += size
        return out

    version, head_len = take("<HI")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if pos + head_len > len(view):
        raise CheckpointError("checkpoint truncated in header")
    header = json.loads(bytes(view[pos : pos + head_len]).decode("utf-8"))
    pos += head_len
    (count,) = take("<I")
    entries = {}
    for _ in range(count):
        (name_len,) = take("<I")
        if pos + name_len > len(view):
            raise CheckpointError("checkpoint truncated in entry name")
        name = bytes(view[pos : pos + name_len]).decode("utf-8")
        pos += name_len
        (ndim,) = take("<I")
        dims = take(f"<{ndim}I") if ndim else ()
        size = int(np.prod(dims)) * 4
        if pos + size > len(view):
            raise CheckpointError(f"checkpoint truncated in entry {name}")
        entries[name] = np.frombuffer(view[pos : pos + size], dtype="<f4").reshape(dims).astype(np.float32)
        pos += size
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last entry")
    return header, entries


def model_header(model: Model) -> dict:
    return {
        "config": model.config.to_dict(),
        "seed": model.seed,
        "plan": {"mode": model.plan.mode, "n": model.plan.n},
        "lora": None
        if model.lora is None
        else {"rank": model.lora.rank, "alpha": model.lora.alpha, "dropout": model.lora.dropout,
              "targets": list(model.lora.targets)},
    }


def save_checkpoint(path: Path | str, model: Model, state: AdamWState | None = None, metadata: dict | None = None) -> bytes:
    header = model_header(model)
    header["metadata"] = metadata or {}
    entries = {p: t.data for p, t in model.params.items()}
    if state is not None:
        header["optimizer"] = state.hyper()
        for p in sorted(state.m):
            entries[f"optim.m.{p}"] = state.m[p]
            entries[f"optim.v.{p}"] = state.v[p]
    blob = encode(header, entries)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return blob


def load_checkpoint(path: Path | str) -> tuple[Model, AdamWState | None, dict]:
    header, entries = decode(Path(path).read_bytes())
    config = ModelConfig.from_dict(header["config"])
    model = build_model(config, header["seed"])
    if header.get("lora"):
        lora = header["lora"]
        attach_lora(model, LoraConfig(lora["rank"], lora["alpha"], lora["dropout"], tuple(lora["targets"])))
    plan = header["plan"]
    apply_freeze_plan(model, FreezePlan(plan["mode"], plan["n"]))
    model.load_arrays({p: a for p, a in entries.items() if not p.startswith("optim.")})
    state = None
    if "optimizer" in header:
        state = AdamWState(**header["optimizer"])
        for name, arr in entries.items():
            if name.startswith("optim.m."):
                state.m[name[len("optim.m.") :]] = arr
            elif name.startswith("optim.v."):
                state.v[name[len("optim.v.") :]] = arr
    return model, state, header.get("metadata", {})
