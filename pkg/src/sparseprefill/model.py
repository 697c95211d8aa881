"""Model configuration, weight containers, KV cache, and attention traces.

The architecture is fixed: pre-norm RMS decoder blocks, rotary position
embeddings on Q/K, SiLU-gated FFN, optional untied output head. Weights are
stored row-convention (activations are row vectors, layers compute x @ W),
all float32.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

F32 = np.float32


@dataclass
class ModelConfig:
    n_layers: int
    d_model: int
    d_ffn: int
    n_heads: int
    vocab_size: int
    block_size: int = 128
    max_context: int = 4096
    d_head: int = field(init=False)

    # external JSON schema: these keys, nothing else
    JSON_KEYS = ("n_layers", "d_model", "d_ffn", "n_heads", "vocab_size",
                 "block_size", "max_context")

    def __post_init__(self):
        for name in self.JSON_KEYS:
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValidationError(f"config {name} must be a positive int, got {v!r}")
        if self.d_model % self.n_heads != 0:
            raise ValidationError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        self.d_head = self.d_model // self.n_heads
        if self.d_head % 2 != 0:
            raise ValidationError(
                f"d_head={self.d_head} must be even for rotary embeddings"
            )
        if self.d_ffn <= self.d_model:
            raise ValidationError(
                f"d_ffn={self.d_ffn} must exceed d_model={self.d_model}"
            )
        if self.max_context < self.block_size:
            raise ValidationError("max_context smaller than one block")

    def to_json_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.JSON_KEYS}

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelConfig":
        missing = [k for k in cls.JSON_KEYS if k not in d]
        if missing:
            raise ValidationError(f"config JSON missing keys: {missing}")
        extra = [k for k in d if k not in cls.JSON_KEYS]
        if extra:
            raise ValidationError(f"config JSON has unknown keys: {extra}")
        return cls(**{k: int(d[k]) for k in cls.JSON_KEYS})

    def n_blocks(self, n_tokens: int) -> int:
        return -(-n_tokens // self.block_size)


@dataclass
class LayerWeights:
    wq: np.ndarray        # (d_model, d_model)
    wk: np.ndarray        # (d_model, d_model)
    wv: np.ndarray        # (d_model, d_model)
    wo: np.ndarray        # (d_model, d_model)
    w_gate: np.ndarray    # (d_model, d_ffn)
    w_up: np.ndarray      # (d_model, d_ffn)
    w_down: np.ndarray    # (d_ffn, d_model)
    attn_norm: np.ndarray  # (d_model,)
    ffn_norm: np.ndarray   # (d_model,)

    FIELDS = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down",
              "attn_norm", "ffn_norm")


@dataclass
class ModelWeights:
    config: ModelConfig
    tok_emb: np.ndarray           # (vocab_size, d_model)
    layers: list[LayerWeights]
    final_norm: np.ndarray        # (d_model,)
    w_out: np.ndarray | None = None  # (d_model, vocab_size); None = tied

    def out_head(self) -> np.ndarray:
        if self.w_out is not None:
            return self.w_out
        return self.tok_emb.T

    def validate(self) -> None:
        cfg = self.config
        d, f, v = cfg.d_model, cfg.d_ffn, cfg.vocab_size
        expected = {
            "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
            "w_gate": (d, f), "w_up": (d, f), "w_down": (f, d),
            "attn_norm": (d,), "ffn_norm": (d,),
        }
        if len(self.layers) != cfg.n_layers:
            raise ValidationError(
                f"expected {cfg.n_layers} layers, got {len(self.layers)}"
            )
        def check(name, arr, shape):
            if arr.shape != shape:
                raise ValidationError(f"{name}: shape {arr.shape}, expected {shape}")
            if arr.dtype != F32:
                raise ValidationError(f"{name}: dtype {arr.dtype}, expected float32")
        check("tok_emb", self.tok_emb, (v, d))
        check("final_norm", self.final_norm, (d,))
        if self.w_out is not None:
            check("out_head", self.w_out, (d, v))
        for i, lw in enumerate(self.layers):
            for name, shape in expected.items():
                check(f"layers.{i}.{name}", getattr(lw, name), shape)


class KVCache:
    """Per-layer rotated-key/value store, filled one block at a time.

    All layers share a single fill position: each layer writes its block at
    rows [length, length+n) and the owner advances `length` once the whole
    block has passed through the stack.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        shape = (cfg.max_context, cfg.d_model)
        self.k = [np.zeros(shape, dtype=F32) for _ in range(cfg.n_layers)]
        self.v = [np.zeros(shape, dtype=F32) for _ in range(cfg.n_layers)]
        self.length = 0

    def append(self, layer: int, k_block: np.ndarray, v_block: np.ndarray) -> int:
        """Store one block for one layer; returns the context length after it."""
        n = k_block.shape[0]
        total = self.length + n
        if total > self.cfg.max_context:
            raise ValidationError(
                f"cache overflow: {total} > max_context={self.cfg.max_context}"
            )
        self.k[layer][self.length:total] = k_block
        self.v[layer][self.length:total] = v_block
        return total

    def advance(self, n: int) -> None:
        self.length += n

    def keys(self, layer: int, upto: int | None = None) -> np.ndarray:
        return self.k[layer][: self.length if upto is None else upto]

    def values(self, layer: int, upto: int | None = None) -> np.ndarray:
        return self.v[layer][: self.length if upto is None else upto]


class AttentionTrace:
    """Full per-layer, per-head attention probability matrices.

    Memory is O(L * H * T^2); this is calibration instrumentation for
    desk-scale runs, not a deployment feature.
    """

    def __init__(self, cfg: ModelConfig, n_tokens: int):
        self.n_tokens = n_tokens
        self.probs = [
            np.zeros((cfg.n_heads, n_tokens, n_tokens), dtype=F32)
            for _ in range(cfg.n_layers)
        ]

    def record(self, layer: int, head: int, row_start: int, rows: np.ndarray) -> None:
        n, width = rows.shape
        self.probs[layer][head, row_start:row_start + n, :width] = rows
