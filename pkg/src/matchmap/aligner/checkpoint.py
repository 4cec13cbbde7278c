"""Binary model checkpoints.

Layout (little-endian throughout):

    bytes 0-3    magic ``LUMA``
    u32          format version (1)
    u32 x 6      dim, grid, blocks, ffn_mult, heads, use_positional (0/1)
    f32 payload  parameter tensors, row-major, in declaration order

Parameters are stored as 32-bit floats, so save -> load -> save is
byte-identical even though the in-memory model uses 64-bit floats.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import AlignerConfig, AlignerModel, param_shapes

MAGIC = b"LUMA"
VERSION = 1
_HEADER = struct.Struct("<4s7I")


class CheckpointError(ValueError):
    """Raised for malformed or truncated checkpoint files."""


def save_checkpoint(model: AlignerModel, path: str | Path) -> None:
    cfg = model.config
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        cfg.dim,
        cfg.grid,
        cfg.blocks,
        cfg.ffn_mult,
        cfg.heads,
        int(cfg.use_positional),
    )
    chunks = [header]
    for name, _ in param_shapes(cfg):
        chunks.append(model.params[name].astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> AlignerModel:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, dim, grid, blocks, ffn_mult, heads, use_pos = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    cfg = AlignerConfig(
        dim=dim,
        grid=grid,
        blocks=blocks,
        ffn_mult=ffn_mult,
        heads=heads,
        use_positional=bool(use_pos),
    )
    offset = _HEADER.size
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg):
        n = int(np.prod(shape))
        end = offset + 4 * n
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated tensor {name}")
        flat = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
        params[name] = flat.astype(np.float64).reshape(shape)
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return AlignerModel(cfg, params)
