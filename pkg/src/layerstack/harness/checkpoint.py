"""Single-file checkpoint container.

Layout: the magic line ``LAYERDIFF-CKPT-1\\n``, an unsigned 64-bit little-endian
header length, a UTF-8 JSON header, then raw little-endian tensor bytes at the
offsets listed in the header. The header carries the model config, schedule,
vocabulary and free-form metadata.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ..denoiser import DenoiserConfig, LayerDenoiser
from ..schedule import NoiseSchedule, build_schedule
from ..textcond import Vocabulary

MAGIC = b"LAYERDIFF-CKPT-1"

_DTYPES = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.float16: "float16",
    torch.int64: "int64",
}


class CheckpointError(ValueError):
    pass


def write_container(path: str | Path, header: dict, tensors: dict[str, torch.Tensor]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index, blobs, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(t.numpy().dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = json.dumps({**header, "format": MAGIC.decode(), "tensors": index}).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + b"\n")
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)
    return path


def read_container(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if not data.startswith(MAGIC + b"\n"):
        raise CheckpointError(f"{path} is not a {MAGIC.decode()} file")
    pos = len(MAGIC) + 1
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos : pos + hlen])
    base = pos + hlen
    tensors = {}
    for entry in header.pop("tensors"):
        dt = np.dtype(entry["dtype"]).newbyteorder("<")
        start = base + entry["offset"]
        arr = np.frombuffer(data, dtype=dt, count=entry["nbytes"] // dt.itemsize, offset=start)
        tensors[entry["name"]] = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True).reshape(entry["shape"]))
    return header, tensors


@dataclass
class Checkpoint:
    model: LayerDenoiser
    schedule: NoiseSchedule
    vocab: Vocabulary
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, model: LayerDenoiser, sched: NoiseSchedule, vocab: Vocabulary, meta: dict | None = None) -> Path:
    header = {
        "kind": "denoiser",
        "config": model.config.to_dict(),
        "schedule": sched.to_dict(),
        "vocab": vocab.ids,
        "meta": meta or {},
    }
    path = write_container(path, header, dict(model.state_dict()))
    vocab.save(Path(path).with_name("vocab.json"))
    return path


def load_checkpoint(path) -> Checkpoint:
    header, tensors = read_container(path)
    if header.get("kind") != "denoiser":
        raise CheckpointError(f"{path} holds a {header.get('kind')!r}, not a denoiser")
    model = LayerDenoiser(DenoiserConfig.from_dict(header["config"]))
    model.load_state_dict(tensors, strict=True)
    model.eval()
    s = header["schedule"]
    sched = build_schedule(s["T"], s["beta_start"], s["beta_end"])
    vocab = Vocabulary.from_json(json.dumps(header["vocab"]))
    return Checkpoint(model, sched, vocab, header.get("meta", {}))


def save_module(path, module: nn.Module, kind: str, config: dict, meta: dict | None = None) -> Path:
    return write_container(path, {"kind": kind, "config": config, "meta": meta or {}}, dict(module.state_dict()))
