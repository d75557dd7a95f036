"""Binary model checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes  b"SBGANCK\\x00"
    version    u16
    hdr_len    u32
    hdr_crc    u32      CRC-32 of the header bytes
    header     hdr_len bytes of UTF-8 JSON (sorted keys)
    payload    float32 '<f4' arrays, in header["arrays"] order

The header carries the GAN config, per-layer architecture descriptors, the
ordered array list with shapes, parameter counts and a SHA-256 of the payload.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import zlib
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .gan import GanConfig, GanModel
from .manifest import atomic_write_bytes

MAGIC = b"SBGANCK\x00"
VERSION = 1
_PREAMBLE = struct.Struct("<8sHII")


class CheckpointError(ValueError):
    pass


def _named_arrays(model: GanModel) -> List[Tuple[str, np.ndarray]]:
    out = []
    for net_name in ("generator", "discriminator"):
        net = getattr(model, net_name)
        for i, p in enumerate(net.parameters()):
            out.append((f"{net_name}.param{i}.weights", p.weights))
            out.append((f"{net_name}.param{i}.biases", p.biases))
        for i, b in enumerate(net.buffers()):
            out.append((f"{net_name}.buffer{i}", b))
    return out


def parameter_count(net) -> int:
    """Trainable scalars: conv/linear weights and biases plus batch-norm scale and shift."""
    return sum(p.weights.size + p.biases.size for p in net.parameters())


def checkpoint_header(model: GanModel) -> Dict:
    arrays = _named_arrays(model)
    return {
        "config": dataclasses.asdict(model.config),
        "architecture": {
            "generator": model.generator.describe(),
            "discriminator": model.discriminator.describe(),
        },
        "arrays": [[name, list(a.shape)] for name, a in arrays],
        "parameter_count": {
            "generator": parameter_count(model.generator),
            "discriminator": parameter_count(model.discriminator),
        },
        "payload_values": sum(a.size for _, a in arrays),
    }


def save_model(model: GanModel, path) -> None:
    header = checkpoint_header(model)
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in _named_arrays(model))
    header["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    atomic_write_bytes(path, _PREAMBLE.pack(MAGIC, VERSION, len(hdr), zlib.crc32(hdr)) + hdr + payload)


def read_header(path) -> Tuple[Dict, bytes]:
    data = Path(path).read_bytes()
    if len(data) < _PREAMBLE.size:
        raise CheckpointError(f"{path}: truncated preamble")
    magic, version, hdr_len, crc = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREAMBLE.size
    hdr = data[start : start + hdr_len]
    if len(hdr) != hdr_len or zlib.crc32(hdr) != crc:
        raise CheckpointError(f"{path}: header corrupted")
    return json.loads(hdr), data[start + hdr_len :]


def load_model(path) -> GanModel:
    header, payload = read_header(path)
    if len(payload) != 4 * header["payload_values"]:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, expected {4 * header['payload_values']}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    cfg = {k: tuple(v) if isinstance(v, list) else v for k, v in header["config"].items()}
    model = GanModel(GanConfig(**cfg))
    expected = checkpoint_header(model)
    if expected["architecture"] != header["architecture"] or expected["arrays"] != header["arrays"]:
        raise CheckpointError(f"{path}: architecture descriptor does not match its config")
    offset = 0
    for _, target in _named_arrays(model):
        n = target.size
        target[...] = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(target.shape)
        offset += 4 * n
    return model.eval()
