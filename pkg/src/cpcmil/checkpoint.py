"""Portable binary checkpoints.

Layout (all integers little-endian):

    magic   7 bytes  b"CPCMIL\\0"
    version u32
    profile u16 length + utf-8 name
    count   u32 number of sections
    per section:
        name    u16 length + utf-8
        count   u32 number of tensors
        per tensor (in the owning module's state-dict order):
            name  u16 length + utf-8
            ndim  u32, then u32 dims
            data  float64 little-endian, C order

Tensors are written in declared order with no padding or timestamps, so two
files are byte-identical exactly when they store identical parameters. Both
parameters and persistent buffers are stored.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError

MAGIC = b"CPCMIL\x00"
VERSION = 1


def _write_str(out: list[bytes], text: str) -> None:
    raw = text.encode("utf-8")
    out.append(struct.pack("<H", len(raw)))
    out.append(raw)


def _read_str(buf: memoryview, pos: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    return bytes(buf[pos : pos + n]).decode("utf-8"), pos + n


def save_checkpoint(path: str | Path, sections: dict[str, nn.Module], profile: str) -> None:
    out: list[bytes] = [MAGIC, struct.pack("<I", VERSION)]
    _write_str(out, profile)
    out.append(struct.pack("<I", len(sections)))
    for name, module in sections.items():
        _write_str(out, name)
        state = module.state_dict()
        out.append(struct.pack("<I", len(state)))
        for key, tensor in state.items():
            _write_str(out, key)
            array = tensor.detach().cpu().numpy().astype("<f8")
            out.append(struct.pack("<I", array.ndim))
            out.append(struct.pack(f"<{array.ndim}I", *array.shape) if array.ndim else b"")
            out.append(np.ascontiguousarray(array).tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path: str | Path) -> tuple[str, dict[str, dict[str, np.ndarray]]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigurationError(f"cannot read checkpoint {path}: {exc}") from exc
    buf = memoryview(raw)
    if bytes(buf[: len(MAGIC)]) != MAGIC:
        raise ConfigurationError(f"{path} is not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if version != VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {version}")
    try:
        profile, pos = _read_str(buf, pos)
        (n_sections,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        sections: dict[str, dict[str, np.ndarray]] = {}
        for _ in range(n_sections):
            name, pos = _read_str(buf, pos)
            (n_tensors,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            tensors: dict[str, np.ndarray] = {}
            for _ in range(n_tensors):
                key, pos = _read_str(buf, pos)
                (ndim,) = struct.unpack_from("<I", buf, pos)
                pos += 4
                shape = struct.unpack_from(f"<{ndim}I", buf, pos) if ndim else ()
                pos += 4 * ndim
                count = int(np.prod(shape)) if ndim else 1
                array = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape)
                pos += 8 * count
                tensors[key] = array.copy()
            sections[name] = tensors
        if pos != len(raw):
            raise ConfigurationError(f"{path}: {len(raw) - pos} trailing bytes")
    except (struct.error, ValueError) as exc:
        raise ConfigurationError(f"{path} is truncated or corrupt: {exc}") from exc
    return profile, sections


def load_into(module: nn.Module, tensors: dict[str, np.ndarray]) -> None:
    """Copy a checkpoint section into a module, shape-checked, casting dtype."""
    state = module.state_dict()
    if set(state) != set(tensors):
        missing = sorted(set(state) - set(tensors))
        extra = sorted(set(tensors) - set(state))
        raise ConfigurationError(f"checkpoint section mismatch: missing={missing} extra={extra}")
    for key, tensor in state.items():
        src = tensors[key]
        if tuple(src.shape) != tuple(tensor.shape):
            raise ConfigurationError(
                f"checkpoint tensor {key}: shape {src.shape} != expected {tuple(tensor.shape)}"
            )
        with torch.no_grad():
            tensor.copy_(torch.from_numpy(src).to(tensor.dtype))


def state_checksum(module: nn.Module) -> str:
    """SHA-256 over the state dict serialized exactly as the checkpoint stores it."""
    digest = hashlib.sha256()
    for key, tensor in module.state_dict().items():
        digest.update(key.encode("utf-8"))
        digest.update(np.ascontiguousarray(tensor.detach().cpu().numpy().astype("<f8")).tobytes())
    return digest.hexdigest()


def file_hash(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
