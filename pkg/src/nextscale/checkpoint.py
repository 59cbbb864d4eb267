"""Checkpoint container: text header, tensor index, raw float32 blob.

Layout, byte for byte:

    NEXTSCALE-CKPT 1\n
    meta <key> <value>\n          (sorted by key; value is str(value))
    tensor <name> <d0,d1,...> <byte_offset> <byte_length>\n
    ...                            (one line per tensor, in saved order)
    blob <total_bytes> <crc32 as 8 hex digits>\n
    <raw blob>

The header is UTF-8. Every tensor is serialized as little-endian float32
in C order at the stated offset inside the blob; integer-valued state
(step counters, optimizer time step, the root seed) travels in ``meta``
entries. The ``blob`` line states the total byte length and the CRC32 of
the raw blob; loading verifies both plus the format version and refuses
mismatches. Saving a loaded checkpoint reproduces the original bytes.

Random streams are derived statelessly from (root seed, stream name,
step), so ``meta seed`` and ``meta step`` are the complete RNG state; no
generator internals need to be stored.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import IntegrityError, UsageError

MAGIC = "NEXTSCALE-CKPT"
VERSION = 1


@dataclass
class Checkpoint:
    meta: dict[str, str]
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    def require(self, key: str) -> str:
        if key not in self.meta:
            raise IntegrityError(f"checkpoint missing meta key {key!r}")
        return self.meta[key]


def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    lines = [f"{MAGIC} {VERSION}"]
    for key in sorted(ckpt.meta):
        value = _format_value(ckpt.meta[key])
        if "\n" in key or "\n" in value or " " in key:
            raise UsageError(f"meta key/value may not contain spaces in keys or newlines: {key!r}")
        lines.append(f"meta {key} {value}")
    chunks = []
    offset = 0
    for name, tensor in ckpt.tensors.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        raw = arr.tobytes(order="C")
        dims = ",".join(str(d) for d in arr.shape) if arr.ndim else ""
        lines.append(f"tensor {name} {dims} {offset} {len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    crc = zlib.crc32(blob) & 0xFFFFFFFF
    lines.append(f"blob {len(blob)} {crc:08x}")
    header = "\n".join(lines) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(blob)


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from exc

    meta: dict[str, str] = {}
    index: list[tuple[str, tuple[int, ...], int, int]] = []
    pos = 0

    def next_line() -> str:
        nonlocal pos
        end = data.find(b"\n", pos)
        if end < 0:
            raise IntegrityError("checkpoint header truncated")
        line = data[pos:end].decode("utf-8")
        pos = end + 1
        return line

    first = next_line().split(" ")
    if len(first) != 2 or first[0] != MAGIC:
        raise IntegrityError(f"not a checkpoint file: {path}")
    if first[1] != str(VERSION):
        raise IntegrityError(f"unsupported checkpoint version {first[1]} (expected {VERSION})")

    blob_len = crc_expect = None
    while True:
        line = next_line()
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif kind == "tensor":
            parts = rest.split(" ")
            if len(parts) != 4:
                raise IntegrityError(f"malformed tensor line: {line!r}")
            name, dims, offset, length = parts
            shape = tuple(int(d) for d in dims.split(",")) if dims else ()
            index.append((name, shape, int(offset), int(length)))
        elif kind == "blob":
            parts = rest.split(" ")
            if len(parts) != 2:
                raise IntegrityError(f"malformed blob line: {line!r}")
            blob_len = int(parts[0])
            crc_expect = int(parts[1], 16)
            break
        else:
            raise IntegrityError(f"unknown header line kind {kind!r}")

    blob = data[pos:]
    if len(blob) != blob_len:
        raise IntegrityError(f"blob length {len(blob)} does not match header {blob_len}")
    if (zlib.crc32(blob) & 0xFFFFFFFF) != crc_expect:
        raise IntegrityError("blob checksum mismatch")

    tensors: dict[str, torch.Tensor] = {}
    for name, shape, offset, length in index:
        expected = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if length != expected or offset + length > blob_len:
            raise IntegrityError(f"tensor {name!r} extent is inconsistent with its shape")
        arr = np.frombuffer(blob, dtype="<f4", count=length // 4, offset=offset)
        tensors[name] = torch.from_numpy(arr.reshape(shape).copy())
    return Checkpoint(meta=meta, tensors=tensors)
