"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"LGCKPT\\x00\\n"
    u32       format version
    u32       header length, then the header as canonical JSON (sorted keys)
    u32       CRC32 of the header bytes
    blobs     raw float32 arrays, concatenated in header order

The header carries the config snapshot, step counter, RNG states, free-form
metadata and one entry per blob with its name, shape, byte length and CRC32.
Serialization is canonical, so save -> load -> save reproduces the file
byte for byte.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"LGCKPT\x00\n"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    step: int
    arrays: dict[str, np.ndarray]
    rng_states: dict[str, dict] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    entries, blobs = [], []
    for name, arr in ckpt.arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "nbytes": len(data),
                        "crc32": zlib.crc32(data)})
        blobs.append(data)
    header = _canonical({"config": ckpt.config, "step": int(ckpt.step), "rng": ckpt.rng_states,
                         "meta": ckpt.meta, "blobs": entries})
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", zlib.crc32(header)))
        for data in blobs:
            fh.write(data)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", raw, pos)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads version {FORMAT_VERSION}")
    pos += 8
    header = raw[pos:pos + hlen]
    if len(header) != hlen or len(raw) < pos + hlen + 4:
        raise CheckpointError(f"{path}: truncated header")
    pos += hlen
    (crc,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if zlib.crc32(header) != crc:
        raise CheckpointError(f"{path}: header checksum mismatch")
    meta = json.loads(header)
    arrays = {}
    for entry in meta["blobs"]:
        data = raw[pos:pos + entry["nbytes"]]
        if len(data) != entry["nbytes"]:
            raise CheckpointError(f"{path}: blob {entry['name']!r} truncated "
                                  f"({len(data)} of {entry['nbytes']} bytes)")
        if zlib.crc32(data) != entry["crc32"]:
            raise CheckpointError(f"{path}: blob {entry['name']!r} failed its integrity check")
        arrays[entry["name"]] = np.frombuffer(data, dtype="<f4").reshape(entry["shape"]).astype(np.float32)
        pos += entry["nbytes"]
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return Checkpoint(meta["config"], meta["step"], arrays, meta["rng"], meta["meta"])


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)
