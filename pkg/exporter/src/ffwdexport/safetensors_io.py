"""Reader/writer for the community single-file tensor-serialization format.

Layout: an 8-byte little-endian u64 header length, a UTF-8 JSON header, then
the raw little-endian tensor payload. The header maps each tensor name to
``{"dtype", "shape", "data_offsets": [begin, end]}`` with offsets relative
to the start of the payload; an optional ``"__metadata__"`` entry carries
free-form strings and is not a tensor.

The reader is lazy: the header is parsed eagerly, tensor bytes are decoded
only when requested, and every decoded tensor is returned as float32 (the
only dtype downstream consumers accept). Half-precision and bfloat16
sources widen losslessly; float64 narrows.
"""

import json
import struct

import numpy as np

from .errors import ValidationError

METADATA_KEY = "__metadata__"

# dtype tag -> bytes per element; decoding for BF16 is special-cased below
_ITEMSIZE = {"F64": 8, "F32": 4, "F16": 2, "BF16": 2}


def _decode(raw: bytes, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
    if dtype == "BF16":
        # bfloat16 is the top half of a float32; widen by shifting back up
        bits = np.frombuffer(raw, dtype="<u2").astype(np.uint32)
        arr = (bits << 16).view(np.float32)
    elif dtype == "F16":
        arr = np.frombuffer(raw, dtype="<f2").astype(np.float32)
    elif dtype == "F32":
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    else:  # F64
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float32)
    return arr.reshape(shape)


def _encode(arr: np.ndarray, dtype: str) -> bytes:
    if dtype == "BF16":
        # round-to-nearest-even truncation of the float32 mantissa
        bits = np.ascontiguousarray(arr, dtype="<f4").view(np.uint32)
        rounded = (bits + 0x7FFF + ((bits >> 16) & 1)) >> 16
        return rounded.astype("<u2").tobytes()
    if dtype == "F16":
        return np.ascontiguousarray(arr, dtype="<f2").tobytes()
    if dtype == "F32":
        return np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


class SafetensorsFile:
    """One parsed checkpoint file: directory up front, tensors on demand."""

    def __init__(self, path):
        self.path = path
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) < 8:
            raise ValidationError(
                f"{path}: too short ({len(blob)} bytes) to hold a header length"
            )
        (header_len,) = struct.unpack("<Q", blob[:8])
        if 8 + header_len > len(blob):
            raise ValidationError(
                f"{path}: header claims {header_len} bytes but the file ends "
                f"after {len(blob) - 8}"
            )
        try:
            header = json.loads(blob[8:8 + header_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValidationError(f"{path}: header is not valid JSON: {exc}") from exc
        if not isinstance(header, dict):
            raise ValidationError(f"{path}: header must be a JSON object")

        self.metadata: dict = header.get(METADATA_KEY, {}) or {}
        self._payload = blob[8 + header_len:]
        self._entries: dict[str, tuple[str, tuple[int, ...], int, int]] = {}
        for name, info in header.items():
            if name == METADATA_KEY:
                continue
            try:
                dtype = info["dtype"]
                shape = tuple(int(d) for d in info["shape"])
                begin, end = (int(o) for o in info["data_offsets"])
            except (TypeError, KeyError, ValueError) as exc:
                raise ValidationError(
                    f"{path}: tensor {name!r} has a malformed header entry ({exc})"
                ) from exc
            if begin > end or end > len(self._payload):
                raise ValidationError(
                    f"{path}: tensor {name!r} offsets [{begin}, {end}) fall "
                    f"outside the {len(self._payload)}-byte payload"
                )
            self._entries[name] = (dtype, shape, begin, end)

    @property
    def names(self) -> list[str]:
        return list(self._entries)

    def dtype(self, name: str) -> str:
        return self._entry(name)[0]

    def shape(self, name: str) -> tuple[int, ...]:
        return self._entry(name)[1]

    def _entry(self, name: str):
        if name not in self._entries:
            raise ValidationError(f"{self.path}: no tensor named {name!r}")
        return self._entries[name]

    def tensor(self, name: str) -> np.ndarray:
        """Decode one tensor to float32."""
        dtype, shape, begin, end = self._entry(name)
        if dtype not in _ITEMSIZE:
            raise ValidationError(
                f"{self.path}: tensor {name!r} has unsupported dtype {dtype!r} "
                f"(supported: {sorted(_ITEMSIZE)})"
            )
        n_elems = int(np.prod(shape, dtype=np.int64)) if shape else 1
        expected = n_elems * _ITEMSIZE[dtype]
        if end - begin != expected:
            raise ValidationError(
                f"{self.path}: tensor {name!r} shape {shape} as {dtype} wants "
                f"{expected} bytes, offsets give {end - begin}"
            )
        return _decode(self._payload[begin:end], dtype, shape)

    def read_all(self) -> dict[str, np.ndarray]:
        return {name: self.tensor(name) for name in self._entries}


def write_safetensors(path, tensors: dict[str, np.ndarray],
                      dtypes: dict[str, str] | None = None,
                      metadata: dict[str, str] | None = None) -> None:
    """Serialize float arrays; ``dtypes`` selects the stored format per tensor.

    Tensors are laid out in sorted-name order with a canonical JSON header,
    so identical inputs produce identical bytes.
    """
    if not tensors:
        raise ValidationError("refusing to write a file with no tensors")
    dtypes = dtypes or {}
    header: dict = {}
    if metadata:
        header[METADATA_KEY] = {str(k): str(v) for k, v in metadata.items()}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        dtype = dtypes.get(name, "F32")
        if dtype not in _ITEMSIZE:
            raise ValidationError(f"unsupported dtype {dtype!r} for tensor {name!r}")
        raw = _encode(np.asanyarray(tensors[name]), dtype)
        header[name] = {
            "dtype": dtype,
            "shape": list(np.asanyarray(tensors[name]).shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        chunks.append(raw)
        offset += len(raw)
    header_blob = json.dumps(header, sort_keys=True,
                             separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header_blob)))
        fh.write(header_blob)
        for raw in chunks:
            fh.write(raw)
