"""Versioned binary model checkpoints with bit-exact round-trips.

Layout (all integers little-endian):

    magic "TPRN" | version u32 | config: 7 x u32 + seed u64
    num_params u32
      per parameter: name_len u16, name utf-8, ndim u8, dims u32 each,
                     raw float32 values in C order
    num_groups u32
      per group: layer_number u32, is_skip u8, rows u32, cols u32,
                 row-major packed mask bits

Parameters are written in the model's stable enumeration order, so a
file is byte-deterministic for a given model state.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError
from .model import MiniViT, ViTConfig

MAGIC = b"TPRN"
VERSION = 1

_CONFIG_FIELDS = ("image_size", "patch_size", "embed_dim", "num_heads",
                  "depth", "mlp_ratio", "num_classes")


def save_checkpoint(model: MiniViT, path) -> None:
    cfg = model.config
    parts = [MAGIC, struct.pack("<I", VERSION)]
    parts.append(struct.pack("<7I", *(getattr(cfg, f) for f in _CONFIG_FIELDS)))
    parts.append(struct.pack("<Q", cfg.seed))

    named = model.named_parameters()
    parts.append(struct.pack("<I", len(named)))
    for name, p in named:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", p.values.ndim))
        parts.append(struct.pack(f"<{p.values.ndim}I", *p.values.shape))
        parts.append(np.ascontiguousarray(p.values, dtype="<f4").tobytes())

    groups = model.linear_groups()
    parts.append(struct.pack("<I", len(groups)))
    for g in groups:
        rows, cols = g.mask.shape
        parts.append(struct.pack("<IBII", g.layer_number, int(g.is_skip), rows, cols))
        parts.append(np.packbits(g.mask.reshape(-1)).tobytes())

    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("checkpoint truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> MiniViT:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    fields = r.unpack("<7I")
    (seed,) = r.unpack("<Q")
    config = ViTConfig(**dict(zip(_CONFIG_FIELDS, fields)), seed=seed)
    model = MiniViT(config)

    (num_params,) = r.unpack("<I")
    named = model.named_parameters()
    if num_params != len(named):
        raise FormatError(f"checkpoint has {num_params} parameters, model expects {len(named)}")
    for name, p in named:
        (name_len,) = r.unpack("<H")
        stored = r.take(name_len).decode("utf-8")
        if stored != name:
            raise FormatError(f"parameter order mismatch: {stored!r} vs {name!r}")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        if shape != p.values.shape:
            raise FormatError(f"{name}: stored shape {shape} vs model {p.values.shape}")
        raw = r.take(4 * int(np.prod(shape, dtype=np.int64)))
        p.values[...] = np.frombuffer(raw, dtype="<f4").reshape(shape)

    (num_groups,) = r.unpack("<I")
    groups = model.linear_groups()
    if num_groups != len(groups):
        raise FormatError(f"checkpoint has {num_groups} groups, model expects {len(groups)}")
    for g in groups:
        number, skip, rows, cols = r.unpack("<IBII")
        if number != g.layer_number or (rows, cols) != g.mask.shape:
            raise FormatError(f"group record mismatch at layer {g.layer_number}")
        nbytes = (rows * cols + 7) // 8
        bits = np.unpackbits(np.frombuffer(r.take(nbytes), dtype=np.uint8))
        g.mask[...] = bits[: rows * cols].astype(bool).reshape(rows, cols)
        g.is_skip = bool(skip)
    if r.pos != len(r.blob):
        raise FormatError(f"{len(r.blob) - r.pos} trailing bytes after checkpoint payload")
    model.apply_masks()
    return model
