"""Single-file binary checkpoints for model weights and auxiliary nets.

Layout (all integers little-endian):

    magic        4 bytes   b"FFWD"
    version      u32       currently 1
    config_len   u32
    config       UTF-8 JSON (the model-config schema)
    n_tensors    u32
    directory, one entry per tensor:
        name_len u16, name UTF-8
        dtype    4 bytes    b"f32 " (the only v1 dtype)
        ndim     u8
        dims     u32 * ndim
        offset   u64        byte offset into the payload
        nbytes   u64
    payload_len  u64
    payload      raw row-major float32 data

Readers address tensors by name only — directory order carries no meaning.
The config JSON also travels as a standalone file in some workflows; on
disagreement the checkpoint's embedded copy wins (with a warning).
"""

import io
import json
import struct
import warnings

import numpy as np

from .compensator import CompensatorParams
from .errors import ValidationError
from .model import LayerWeights, ModelConfig, ModelWeights
from .predictor import PredictorParams

MAGIC = b"FFWD"
VERSION = 1
DTYPE_F32 = b"f32 "


def _model_tensors(weights: ModelWeights) -> dict[str, np.ndarray]:
    out = {"tok_emb": weights.tok_emb, "final_norm": weights.final_norm}
    if weights.w_out is not None:
        out["out_head"] = weights.w_out
    for i, lw in enumerate(weights.layers):
        for name in LayerWeights.FIELDS:
            out[f"layers.{i}.{name}"] = getattr(lw, name)
    return out


def _predictor_tensors(predictors: list[PredictorParams]) -> dict[str, np.ndarray]:
    out = {}
    for i, p in enumerate(predictors):
        out[f"predictor.{i}.query"] = p.query
        out[f"predictor.{i}.w1"] = p.w1
        out[f"predictor.{i}.w2"] = p.w2
    return out


def _compensator_tensors(comps: list[CompensatorParams]) -> dict[str, np.ndarray]:
    out = {}
    for i, c in enumerate(comps):
        out[f"compensator.{i}.w1"] = c.w1
        out[f"compensator.{i}.w2"] = c.w2
    return out


def write_checkpoint(path, config: ModelConfig,
                     weights: ModelWeights | None = None,
                     predictors: list[PredictorParams] | None = None,
                     compensators: list[CompensatorParams] | None = None) -> None:
    """Serialize any subset of {weights, predictors, compensators} plus config."""
    tensors: dict[str, np.ndarray] = {}
    if weights is not None:
        weights.validate()
        tensors.update(_model_tensors(weights))
    if predictors is not None:
        if len(predictors) != config.n_layers:
            raise ValidationError("need one predictor per layer")
        tensors.update(_predictor_tensors(predictors))
    if compensators is not None:
        if len(compensators) != config.n_layers:
            raise ValidationError("need one compensator per layer")
        tensors.update(_compensator_tensors(compensators))
    if not tensors:
        raise ValidationError("refusing to write a checkpoint with no tensors")

    config_blob = json.dumps(config.to_json_dict(), sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(config_blob)))
    buf.write(config_blob)
    buf.write(struct.pack("<I", len(tensors)))
    payload = io.BytesIO()
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
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


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise ValidationError(
                f"checkpoint {self.path} truncated while reading {what} "
                f"(need {n} bytes at offset {self.pos}, have {len(self.blob)})"
            )
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))[0]


class Checkpoint:
    """Parsed checkpoint: config plus whichever parameter groups were stored."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        self.tensors = tensors
        self.weights = self._build_weights()
        self.predictors = self._build_predictors()
        self.compensators = self._build_compensators()

    def _build_weights(self) -> ModelWeights | None:
        if "tok_emb" not in self.tensors:
            return None
        cfg = self.config
        layers = []
        for i in range(cfg.n_layers):
            fields = {}
            for name in LayerWeights.FIELDS:
                key = f"layers.{i}.{name}"
                if key not in self.tensors:
                    raise ValidationError(f"checkpoint missing tensor {key}")
                fields[name] = self.tensors[key]
            layers.append(LayerWeights(**fields))
        if "final_norm" not in self.tensors:
            raise ValidationError("checkpoint missing tensor final_norm")
        weights = ModelWeights(
            config=cfg,
            tok_emb=self.tensors["tok_emb"],
            layers=layers,
            final_norm=self.tensors["final_norm"],
            w_out=self.tensors.get("out_head"),
        )
        weights.validate()
        return weights

    def _build_predictors(self) -> list[PredictorParams] | None:
        if "predictor.0.query" not in self.tensors:
            return None
        out = []
        for i in range(self.config.n_layers):
            try:
                p = PredictorParams(
                    query=self.tensors[f"predictor.{i}.query"],
                    w1=self.tensors[f"predictor.{i}.w1"],
                    w2=self.tensors[f"predictor.{i}.w2"],
                )
            except KeyError as exc:
                raise ValidationError(f"checkpoint missing tensor {exc}") from exc
            p.validate(self.config)
            out.append(p)
        return out

    def _build_compensators(self) -> list[CompensatorParams] | None:
        if "compensator.0.w1" not in self.tensors:
            return None
        out = []
        for i in range(self.config.n_layers):
            try:
                c = CompensatorParams(
                    w1=self.tensors[f"compensator.{i}.w1"],
                    w2=self.tensors[f"compensator.{i}.w2"],
                )
            except KeyError as exc:
                raise ValidationError(f"checkpoint missing tensor {exc}") from exc
            c.validate(self.config)
            out.append(c)
        return out


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise ValidationError(
            f"{path} is not an engine checkpoint (magic {magic!r}, expected {MAGIC!r})"
        )
    version = r.unpack("<I", "version")
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    config_len = r.unpack("<I", "config length")
    config_blob = r.take(config_len, "config JSON")
    try:
        config = ModelConfig.from_json_dict(json.loads(config_blob.decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: embedded config is not valid JSON: {exc}") from exc

    n_tensors = r.unpack("<I", "tensor count")
    entries = []
    names = set()
    for t in range(n_tensors):
        name_len = r.unpack("<H", f"tensor {t} name length")
        name = r.take(name_len, f"tensor {t} name").decode("utf-8")
        if name in names:
            raise ValidationError(f"{path}: duplicate tensor name {name!r}")
        names.add(name)
        dtype = r.take(4, f"tensor {name} dtype")
        if dtype != DTYPE_F32:
            raise ValidationError(
                f"{path}: tensor {name} has unsupported dtype {dtype!r}"
            )
        ndim = r.unpack("<B", f"tensor {name} ndim")
        shape = tuple(r.unpack("<I", f"tensor {name} dim") for _ in range(ndim))
        offset = r.unpack("<Q", f"tensor {name} offset")
        nbytes = r.unpack("<Q", f"tensor {name} size")
        expected = 4 * int(np.prod(shape, dtype=np.int64)) if ndim else 4
        if nbytes != expected:
            raise ValidationError(
                f"{path}: tensor {name} shape {shape} wants {expected} bytes, "
                f"directory says {nbytes}"
            )
        entries.append((name, shape, offset, nbytes))

    payload_len = r.unpack("<Q", "payload length")
    payload = r.take(payload_len, "payload")
    tensors = {}
    for name, shape, offset, nbytes in entries:
        if offset + nbytes > payload_len:
            raise ValidationError(
                f"{path}: tensor {name} extends past the payload "
                f"({offset}+{nbytes} > {payload_len})"
            )
        flat = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=offset)
        tensors[name] = flat.reshape(shape).astype(np.float32)
    return Checkpoint(config, tensors)


def load_model(ckpt_path, config_json_path=None) -> ModelWeights:
    """Model weights from a checkpoint, reconciling an external config file.

    When a standalone config JSON is supplied and disagrees with the embedded
    copy, the checkpoint wins and a warning is emitted.
    """
    ckpt = read_checkpoint(ckpt_path)
    if config_json_path is not None:
        with open(config_json_path, encoding="utf-8") as fh:
            external = ModelConfig.from_json_dict(json.load(fh))
        if external.to_json_dict() != ckpt.config.to_json_dict():
            warnings.warn(
                f"config file {config_json_path} disagrees with the checkpoint; "
                "using the checkpoint's embedded config",
                stacklevel=2,
            )
    if ckpt.weights is None:
        raise ValidationError(f"{ckpt_path} holds no model weights")
    return ckpt.weights


def save_config_json(config: ModelConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_config_json(path) -> ModelConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path} is not valid JSON: {exc}") from exc
    return ModelConfig.from_json_dict(payload)
