"""Weight files: 8-byte magic, uint64 header length, JSON header, then the
parameters as little-endian float32 blobs in header order."""

from __future__ import annotations

import json
import struct

import numpy as np
import torch

from .unet import GroupUNet

MAGIC = b"GSEGWTS1"
FORMAT_VERSION = 1


def save_weights(net: GroupUNet, path, protocol_ids=None, grid: dict | None = None) -> None:
    state = net.state_dict()
    header = {
        "version": FORMAT_VERSION,
        "architecture": "group-unet",
        **net.config(),
        "protocol": list(protocol_ids) if protocol_ids is not None else None,
        "grid": grid,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
    }
    text = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(text)))
        f.write(text)
        for tensor in state.values():
            f.write(tensor.detach().cpu().numpy().astype("<f4").tobytes())


def read_header(path) -> dict:
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise ValueError(f"{path}: not a weights file")
        (size,) = struct.unpack("<Q", f.read(8))
        return json.loads(f.read(size))


def load_weights(path) -> tuple[GroupUNet, dict]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a weights file")
    (size,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + size])
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported weights version {header.get('version')}")
    net = GroupUNet(
        header["levels"], header["features"], header["first_features"], header["n_classes"], header["in_channels"], header.get("seed", 0)
    )
    offset = 16 + size
    state = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"]))
        blob = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        state[entry["name"]] = torch.from_numpy(blob.astype(np.float32).reshape(entry["shape"]))
        offset += 4 * count
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    net.load_state_dict(state)
    return net, header
