"""Seeding, hashing, and small I/O helpers used across modules."""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch


def derive_seed(master_seed: int, stream: str) -> int:
    """Derive an independent 63-bit seed for a named RNG stream.

    One master seed governs every module; each consumer (model init,
    pretraining, finetuning, synthetic generation, probes) pulls its own
    stream so that adding a consumer never shifts the others.
    """
    digest = hashlib.sha256(f"{master_seed}:{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def seed_torch(seed: int) -> None:
    torch.manual_seed(seed)


def canonical_json(obj) -> str:
    """Deterministic JSON encoding (sorted keys, no whitespace jitter)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_of_json(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def sha256_of_file(path: str | Path, chunk_size: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while True:
            chunk = f.read(chunk_size)
            if not chunk:
                break
            h.update(chunk)
    return h.hexdigest()


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: str | Path):
    return json.loads(Path(path).read_text())


# struct helpers for the little-endian binary containers (feature matrices,
# batch cache, checkpoints)

def pack_u32(value: int) -> bytes:
    return struct.pack("<I", value)


def pack_u64(value: int) -> bytes:
    return struct.pack("<Q", value)


def read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise EOFError(f"expected {n} bytes, got {len(data)}")
    return data


def unpack_u32(f) -> int:
    return struct.unpack("<I", read_exact(f, 4))[0]


def unpack_u64(f) -> int:
    return struct.unpack("<Q", read_exact(f, 8))[0]


def require_finite(array: np.ndarray, what: str) -> None:
    if not np.isfinite(array).all():
        from dygnrole.exceptions import NumericError

        raise NumericError(f"non-finite values in {what}")
