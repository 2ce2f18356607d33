"""Binary checkpoint container.

Layout (little endian)::

    b"FDCKPT1" | u32 version | u32 config_len | config text (utf-8)
    u32 block_count
    per block: u16 name_len | name | u8 dtype | u8 ndim | u64 * ndim shape | payload
    sha256 of everything above (32 bytes)
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"FDCKPT1"
VERSION = 1
_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float64"): 1, np.dtype("int64"): 2}


class CheckpointError(ValueError):
    pass


class VersionMismatch(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


def encode(config_text: str, blocks: dict[str, np.ndarray]) -> bytes:
    cfg = config_text.encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for block {name!r}")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode(data: bytes) -> tuple[str, dict[str, np.ndarray]]:
    if len(data) < len(MAGIC) + 32 or not data.startswith(MAGIC):
        raise ChecksumError("not a framediff checkpoint (bad magic)")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checkpoint checksum mismatch")
    pos = len(MAGIC)
    version, cfg_len = struct.unpack_from("<II", body, pos)
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {VERSION}")
    pos += 8
    cfg = body[pos : pos + cfg_len].decode()
    pos += cfg_len
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    blocks = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + nlen].decode()
        pos += nlen
        code, ndim = struct.unpack_from("<BB", body, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}Q", body, pos)
        pos += 8 * ndim
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        blocks[name] = np.frombuffer(body[pos : pos + size], dtype=dt).reshape(shape).copy()
        pos += size
    return cfg, blocks


def save(path, config_text: str, model: torch.nn.Module, optimizer: torch.optim.Optimizer | None = None,
         step: int = 0, extra: dict[str, np.ndarray] | None = None) -> None:
    blocks = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for p, st in optimizer.state.items():
            for key, val in st.items():
                blocks[f"opt/{names[id(p)]}/{key}"] = torch.as_tensor(val).detach().cpu().numpy().astype(np.float64)
    blocks["meta/step"] = np.array([step], dtype=np.int64)
    for k, v in (extra or {}).items():
        blocks[f"extra/{k}"] = np.asarray(v)
    Path(path).write_bytes(encode(config_text, blocks))


def load(path) -> tuple[str, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())


def restore(blocks: dict[str, np.ndarray], model: torch.nn.Module, optimizer: torch.optim.Optimizer | None = None) -> int:
    state = {k[len("param/"):]: torch.from_numpy(v) for k, v in blocks.items() if k.startswith("param/")}
    model.load_state_dict(state)
    if optimizer is not None:
        params = dict(model.named_parameters())
        for key, v in blocks.items():
            if not key.startswith("opt/"):
                continue
            pname, field = key[len("opt/"):].rsplit("/", 1)
            optimizer.state[params[pname]][field] = torch.from_numpy(v)
    return int(blocks["meta/step"][0])
