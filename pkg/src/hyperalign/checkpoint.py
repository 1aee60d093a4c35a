"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"HMVA" | version: u32 | header_len: u32 | header: UTF-8 JSON
    | payload: float64 LE | crc32(payload): u32

The header holds ``config`` (the TrainConfig echo), ``feature_dim`` and a
``params`` manifest of ``{name, shape, offset}`` entries, with byte offsets into
the payload.
"""
from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import CheckpointError, ConfigError
from .fileio import atomic_write_bytes
from .trainer import Model, TrainConfig

MAGIC = b"HMVA"
FORMAT_VERSION = 1
# fields whose mismatch makes a checkpoint unusable under a given config
ARCH_FIELDS = ("M", "embed_dim", "activation")


def dumps_checkpoint(model: Model) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, arr in model.params.items():
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    header = json.dumps(
        {"config": model.config.to_dict(), "feature_dim": model.feature_dim, "params": manifest},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    payload = b"".join(chunks)
    return (
        MAGIC
        + struct.pack("<II", FORMAT_VERSION, len(header))
        + header
        + payload
        + struct.pack("<I", zlib.crc32(payload))
    )


def save_checkpoint(model: Model, path) -> None:
    atomic_write_bytes(path, dumps_checkpoint(model))


def loads_checkpoint(blob: bytes, expect: TrainConfig | None = None, feature_dim: int | None = None) -> Model:
    if len(blob) < 12:
        raise CheckpointError("checkpoint truncated before header")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version} (expected {FORMAT_VERSION})", field="version")
    body = blob[12:]
    if len(body) < header_len + 4:
        raise CheckpointError("checkpoint truncated inside header")
    try:
        header = json.loads(body[:header_len].decode("utf-8"))
        cfg = TrainConfig.from_dict(header["config"])
        manifest = header["params"]
        fdim = int(header["feature_dim"])
    except (ValueError, KeyError, TypeError, ConfigError) as e:
        raise CheckpointError(f"malformed checkpoint header: {e}") from e
    payload = body[header_len:-4]
    expected_len = sum(8 * int(np.prod(p["shape"], dtype=np.int64)) for p in manifest)
    if len(payload) != expected_len:
        raise CheckpointError(f"payload is {len(payload)} bytes, manifest describes {expected_len} (truncated?)")
    (crc,) = struct.unpack("<I", body[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError("payload checksum mismatch")
    params = {}
    for p in manifest:
        n = int(np.prod(p["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=p["offset"]).astype(np.float64)
        params[p["name"]] = arr.reshape(p["shape"])
    if expect is not None:
        for name in ARCH_FIELDS:
            have, want = getattr(cfg, name), getattr(expect, name)
            if have != want:
                raise CheckpointError(f"{name}: checkpoint has {have!r}, config expects {want!r}", field=name)
    if feature_dim is not None and feature_dim != fdim:
        raise CheckpointError(f"feature_dim: checkpoint has {fdim}, data has {feature_dim}", field="feature_dim")
    return Model(cfg, fdim, params)


def load_checkpoint(path, expect: TrainConfig | None = None, feature_dim: int | None = None) -> Model:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from e
    return loads_checkpoint(blob, expect, feature_dim)
