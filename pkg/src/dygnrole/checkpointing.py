"""Versioned binary checkpoint container.

Layout (all integers little-endian):
    magic 'DGNC', version u32, seed u64,
    config JSON: length u64 + UTF-8 bytes,
    tensor count u64, then per tensor:
        name length u64 + UTF-8 bytes, ndim u64, dims u64 each,
        row-major float32 data.

Tensors are written in state-dict order, which is deterministic for a
fixed architecture, so identical training runs produce byte-identical
files.
"""

import json
import struct
from pathlib import Path

import numpy as np
import torch

from dygnrole.exceptions import DataIOError
from dygnrole.utils import pack_u32, pack_u64, read_exact, unpack_u32, unpack_u64

CHECKPOINT_MAGIC = b"DGNC"
CHECKPOINT_VERSION = 1


def save_checkpoint(
    path: str | Path, module: torch.nn.Module, config: dict, seed: int
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config_bytes = json.dumps(config, sort_keys=True).encode()
    state = module.state_dict()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(pack_u32(CHECKPOINT_VERSION))
        f.write(pack_u64(seed))
        f.write(pack_u64(len(config_bytes)))
        f.write(config_bytes)
        f.write(pack_u64(len(state)))
        for name, tensor in state.items():
            data = tensor.detach().cpu().to(torch.float32).numpy()
            data = np.ascontiguousarray(data, dtype="<f4")
            name_bytes = name.encode()
            f.write(pack_u64(len(name_bytes)))
            f.write(name_bytes)
            f.write(pack_u64(data.ndim))
            for dim in data.shape:
                f.write(pack_u64(dim))
            f.write(data.tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict, int]:
    """Returns (named arrays, config echo, seed)."""
    path = Path(path)
    if not path.exists():
        raise DataIOError(f"checkpoint not found: {path}")
    try:
        with open(path, "rb") as f:
            if read_exact(f, 4) != CHECKPOINT_MAGIC:
                raise DataIOError(f"{path}: not a checkpoint file")
            version = unpack_u32(f)
            if version != CHECKPOINT_VERSION:
                raise DataIOError(f"{path}: unsupported checkpoint version {version}")
            seed = unpack_u64(f)
            config = json.loads(read_exact(f, unpack_u64(f)).decode())
            tensors: dict[str, np.ndarray] = {}
            for _ in range(unpack_u64(f)):
                name = read_exact(f, unpack_u64(f)).decode()
                ndim = unpack_u64(f)
                shape = tuple(unpack_u64(f) for _ in range(ndim))
                count = int(np.prod(shape)) if shape else 1
                data = np.frombuffer(read_exact(f, count * 4), dtype="<f4")
                tensors[name] = data.reshape(shape).copy()
    except (EOFError, struct.error, json.JSONDecodeError) as exc:
        raise DataIOError(f"{path}: corrupt checkpoint ({exc})")
    return tensors, config, seed


def load_into_module(path: str | Path, module: torch.nn.Module) -> tuple[dict, int]:
    """Load a checkpoint into an already-built module (strict key match)."""
    tensors, config, seed = load_checkpoint(path)
    state = {k: torch.from_numpy(v) for k, v in tensors.items()}
    missing = set(module.state_dict()) - set(state)
    extra = set(state) - set(module.state_dict())
    if missing or extra:
        raise DataIOError(
            f"{path}: state mismatch (missing={sorted(missing)}, extra={sorted(extra)})"
        )
    module.load_state_dict(state)
    return config, seed
