"""Writer (and verifying reader) for the engine's checkpoint container.

Layout, all integers little-endian:

    magic        4 bytes   b"FFWD"
    version      u32       1
    config_len   u32
    config       UTF-8 JSON (the engine's model-config schema, sorted keys)
    n_tensors    u32
    directory, one entry per tensor:
        name_len u16, name UTF-8
        dtype    4 bytes    b"f32 "
        ndim     u8
        dims     u32 * ndim
        offset   u64        byte offset into the payload
        nbytes   u64
    payload_len  u64
    payload      raw row-major float32 data

The engine addresses tensors by name, so directory order carries no meaning
to readers — but this writer emits a fixed canonical order (embedding,
final norm, output head, then per-layer fields) so that exporting the same
source twice yields byte-identical files.
"""

import io
import json
import struct

import numpy as np

from .errors import ValidationError
from .namemap import CONFIG_KEYS, LAYER_FIELDS

MAGIC = b"FFWD"
VERSION = 1
DTYPE_F32 = b"f32 "


def canonical_tensor_order(names, n_layers: int) -> list[str]:
    """Model tensors in the fixed serialization order; rejects strays."""
    ordered = [n for n in ("tok_emb", "final_norm", "out_head") if n in names]
    for i in range(n_layers):
        ordered.extend(f"layers.{i}.{field}" for field in LAYER_FIELDS)
    stray = set(names) - set(ordered)
    if stray:
        raise ValidationError(f"tensors outside the model inventory: {sorted(stray)}")
    missing = [n for n in ordered if n not in names]
    if missing:
        raise ValidationError(f"model inventory incomplete, missing: {missing}")
    return ordered


def write_engine_checkpoint(path, config: dict,
                            tensors: dict[str, np.ndarray]) -> None:
    config_blob = json.dumps({k: int(config[k]) for k in CONFIG_KEYS},
                             sort_keys=True).encode("utf-8")
    order = canonical_tensor_order(tensors, config["n_layers"])
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(config_blob)))
    buf.write(config_blob)
    buf.write(struct.pack("<I", len(order)))
    payload = io.BytesIO()
    for name in order:
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        raw = arr.astype("<f4").tobytes()
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(DTYPE_F32)
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(struct.pack("<Q", payload.tell()))
        buf.write(struct.pack("<Q", len(raw)))
        payload.write(raw)
    raw_payload = payload.getvalue()
    buf.write(struct.pack("<Q", len(raw_payload)))
    buf.write(raw_payload)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class _Cursor:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise ValidationError(
                f"{self.path}: truncated while reading {what} "
                f"(need {n} bytes at offset {self.pos})"
            )
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))[0]


def read_engine_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint back into (config dict, name -> float32 array).

    Used to verify round trips without involving the engine itself.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    c = _Cursor(blob, path)
    if c.take(4, "magic") != MAGIC:
        raise ValidationError(f"{path} is not an engine checkpoint")
    version = c.unpack("<I", "version")
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported version {version}")
    config_len = c.unpack("<I", "config length")
    try:
        config = json.loads(c.take(config_len, "config JSON").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: embedded config is not valid JSON: {exc}") from exc
    n_tensors = c.unpack("<I", "tensor count")
    entries = []
    for t in range(n_tensors):
        name_len = c.unpack("<H", f"tensor {t} name length")
        name = c.take(name_len, f"tensor {t} name").decode("utf-8")
        dtype = c.take(4, f"tensor {name} dtype")
        if dtype != DTYPE_F32:
            raise ValidationError(f"{path}: tensor {name} has dtype {dtype!r}")
        ndim = c.unpack("<B", f"tensor {name} ndim")
        shape = tuple(c.unpack("<I", f"tensor {name} dim") for _ in range(ndim))
        offset = c.unpack("<Q", f"tensor {name} offset")
        nbytes = c.unpack("<Q", f"tensor {name} size")
        entries.append((name, shape, offset, nbytes))
    payload_len = c.unpack("<Q", "payload length")
    payload = c.take(payload_len, "payload")
    tensors = {}
    for name, shape, offset, nbytes in entries:
        if offset + nbytes > payload_len:
            raise ValidationError(f"{path}: tensor {name} extends past the payload")
        flat = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=offset)
        tensors[name] = flat.reshape(shape).astype(np.float32)
    return config, tensors
