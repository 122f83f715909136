"""Binary named-tensor checkpoints.

Layout (all integers little-endian)::

    b"ABTK"  u32 version  u32 tensor_count
    per tensor: u16 name_len, name (UTF-8), u8 dtype, u8 rank, u32 dims[rank], payload
    u64 FNV-1a over every preceding byte

Dtype codes: 0 float32, 1 int64, 2 uint8.  Besides parameters and head
batch-norm statistics, a checkpoint stores each compact layer's kept index
sets (int64) and a ``__meta__`` tensor holding UTF-8 JSON with the phase,
configuration text and hash, and the gating policy.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import loads as load_config
from .model import PHASES, TrackerModel
from .pruning import compact

MAGIC = b"ABTK"
VERSION = 1
META = "__meta__"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8"), 2: np.dtype("u1")}
CODES = {np.dtype(np.float32): 0, np.dtype(np.int64): 1, np.dtype(np.uint8): 2}

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


class CheckpointError(IOError):
    """Malformed, truncated, corrupted or incompatible checkpoint."""


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    """Serialise an ordered name -> array mapping."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated at offset {self.pos}: need {n} bytes for {what}, "
                                  f"{len(self.buf) - self.pos} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> dict[str, np.ndarray]:
    """Parse and verify a checkpoint image; errors name the failing byte offset."""
    if len(buf) < 8 + len(MAGIC) + 8:
        raise CheckpointError(f"truncated at offset {len(buf)}: file shorter than header and checksum")
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic at offset 0: {buf[:4]!r} != {MAGIC!r}")
    body, tail = buf[:-8], buf[-8:]
    r = _Reader(body)
    r.take(4, "magic")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} at offset 4 (expected {VERSION})")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = r.pos
        (n,) = r.unpack("<H", "name length")
        try:
            name = r.take(n, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"invalid tensor name at offset {start + 2}") from exc
        code, rank = r.unpack("<BB", f"{name}: dtype and rank")
        if code not in DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code} at offset {r.pos - 2}")
        dims = r.unpack(f"<{rank}I", f"{name}: dims")
        dt = DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        payload = r.take(size, f"{name}: payload")
        if name in out:
            raise CheckpointError(f"duplicate tensor {name!r} at offset {start}")
        out[name] = np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} unexpected bytes at offset {r.pos}")
    (stored,) = struct.unpack("<Q", tail)
    actual = fnv1a64(body)
    if stored != actual:
        raise CheckpointError(f"checksum mismatch at offset {len(body)}: stored {stored:016x}, "
                              f"computed {actual:016x} over bytes [0, {len(body)})")
    return out


def _meta_bytes(meta: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def model_tensors(model: TrackerModel, config_text: str) -> dict[str, np.ndarray]:
    cfg = load_config(config_text)
    tensors: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters():
        tensors[name] = p.data
    tensors.update(model.buffers())
    for i, layer in enumerate(model.layers):
        if layer.is_compact:
            tensors[f"layers.{i}.kept1"] = layer.kept1.astype(np.int64)
            tensors[f"layers.{i}.kept2"] = layer.kept2.astype(np.int64)
    meta = {
        "phase": model.phase,
        "config": config_text,
        "config_hash": cfg.hash(),
        "relaxed": any(layer.dr1 is not None for layer in model.layers),
        "policy": None if model.policy is None else {"rho": model.policy.rho, "n_enf": model.policy.n_enf},
    }
    tensors[META] = _meta_bytes(meta)
    return tensors


def save_checkpoint(model: TrackerModel, path: str | Path, config) -> None:
    """Write ``model``; ``config`` is the run's ``Config`` (or its text)."""
    text = config if isinstance(config, str) else config.to_text()
    Path(path).write_bytes(encode(model_tensors(model, text)))


def load_checkpoint(path: str | Path, expect_hash: str | None = None):
    """Return ``(model, config)`` rebuilt from ``path``."""
    from .bypass import GatingPolicy

    tensors = decode(Path(path).read_bytes())
    if META not in tensors:
        raise CheckpointError("missing metadata tensor")
    meta = json.loads(tensors.pop(META).tobytes().decode("utf-8"))
    cfg = load_config(meta["config"])
    if cfg.hash() != meta["config_hash"]:
        raise CheckpointError(f"config hash mismatch: stored {meta['config_hash']}, recomputed {cfg.hash()}")
    if expect_hash is not None and expect_hash != meta["config_hash"]:
        raise CheckpointError(f"config hash mismatch: checkpoint {meta['config_hash']}, expected {expect_hash}")
    if meta["phase"] not in PHASES:
        raise CheckpointError(f"unknown phase {meta['phase']!r}")
    model = TrackerModel(cfg.model, seed=cfg.train.seed)
    for i, layer in enumerate(model.layers):
        k1, k2 = tensors.pop(f"layers.{i}.kept1", None), tensors.pop(f"layers.{i}.kept2", None)
        if k1 is not None:
            masks = [np.zeros(layer.dim, bool), np.zeros(layer.dim, bool)]
            masks[0][k1] = True
            masks[1][k2] = True
            model.layers[i] = compact(layer, masks)
        elif meta["relaxed"]:
            layer.set_relaxed()
    if meta["policy"] is not None:
        model.attach_bdms(GatingPolicy(meta["policy"]["rho"], meta["policy"]["n_enf"]))
    model.phase = meta["phase"]
    model.name_parameters()
    for name, p in model.named_parameters():
        if name not in tensors:
            raise CheckpointError(f"missing tensor {name!r}")
        arr = tensors.pop(name)
        if arr.shape != p.shape:
            raise CheckpointError(f"{name}: stored shape {arr.shape} != model shape {p.shape}")
        p.data = arr.astype(np.float32)
    for i, stage in enumerate(model.head.stages):
        for field in ("running_mean", "running_var"):
            key = f"head.stages.{i}.{field}"
            if key not in tensors:
                raise CheckpointError(f"missing tensor {key!r}")
            setattr(stage, field, tensors.pop(key).astype(np.float32))
    if tensors:
        raise CheckpointError(f"unexpected tensors: {', '.join(sorted(tensors))}")
    return model, cfg
