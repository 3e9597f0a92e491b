"""
Model checkpoints: versioned binary file + human-readable YAML sidecar

Layout (little-endian):
    magic      4 bytes   b"PATN"
    version    uint16
    spec_len   uint32    followed by spec_len bytes of UTF-8 JSON (kind, model spec, per-layer specs)
    n_tensors  uint32
    per tensor: name_len uint16, name, ndim uint8, dims uint32 * ndim, float32 data
"""

import json
import os
import struct
from typing import Any, Dict, Tuple

import numpy as np
import torch
import torch.nn as nn
import yaml
from loguru import logger

from pipeline_errors import CheckpointFormatError
from spiking_layers import ConvLayerSpec

MAGIC = b"PATN"
VERSION = 1


def sidecar_path(path: str) -> str:
    return f"{path}.yaml"


def layer_specs(model: nn.Module) -> Dict[str, Dict[str, Any]]:
    """Conv layer specs keyed by module name"""
    return {
        name: module.spec.to_dict()
        for name, module in model.named_modules()
        if isinstance(getattr(module, "spec", None), ConvLayerSpec)
    }


def save_checkpoint(model: nn.Module, path: str, kind: str, spec: Dict[str, Any]) -> None:
    layers = layer_specs(model)
    header = json.dumps({"kind": kind, "spec": spec, "layers": layers}, sort_keys=True).encode("utf-8")
    state = model.state_dict()
    chunks = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(header)), header,
              struct.pack("<I", len(state))]
    shapes = {}
    for name, tensor in state.items():
        data = tensor.detach().cpu().numpy().astype("<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes(order="C"))
        shapes[name] = list(data.shape)

    with open(path, "wb") as f:
        f.write(b"".join(chunks))
    with open(sidecar_path(path), "w", encoding="utf-8") as f:
        yaml.safe_dump({"format": "PATN", "version": VERSION, "kind": kind, "spec": spec, "layers": layers,
                        "tensors": shapes},
                       f, sort_keys=True)
    logger.debug(f"Saved {kind} checkpoint with {len(state)} tensors to {path}")


class _Reader:
    def __init__(self, payload: bytes, path: str):
        self.payload = payload
        self.offset = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.payload):
            raise CheckpointFormatError(f"{self.path}: truncated checkpoint")
        chunk = self.payload[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str) -> Tuple[str, Dict[str, Any], Dict[str, torch.Tensor]]:
    """Returns (kind, spec, state_dict)"""
    if not os.path.exists(path):
        raise CheckpointFormatError(f"Checkpoint not found: {path}")
    with open(path, "rb") as f:
        reader = _Reader(f.read(), path)

    if reader.take(4) != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    (version,) = reader.unpack("<H")
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    (spec_len,) = reader.unpack("<I")
    header = json.loads(reader.take(spec_len).decode("utf-8"))
    (n_tensors,) = reader.unpack("<I")

    state: Dict[str, torch.Tensor] = {}
    for _ in range(n_tensors):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        dims = reader.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(dims)
        state[name] = torch.from_numpy(data.astype(np.float32))
    return header["kind"], header["spec"], state
