"""Mapping between source checkpoint tensor names and engine tensor names.

A name map is a JSON file with two top-level keys:

- ``config``: the engine's model-config schema (n_layers, d_model, d_ffn,
  n_heads, vocab_size, block_size, max_context), which determines exactly
  which engine tensors must exist and what shapes they take.
- ``tensors``: engine tensor name -> ``{"source": <name>, "transpose": bool}``.
  Both sides of a per-layer entry may contain the literal placeholder
  ``{layer}``, expanded over every layer index.

Community checkpoints store linear weights as (out_features, in_features);
the engine right-multiplies row activations, so those entries set
``transpose`` — the policy travels with the map, not the code.

An expanded map must cover every required engine tensor exactly once;
``out_head`` alone may be omitted, which declares the output projection tied
to the token embedding.
"""

import json
from dataclasses import dataclass

from .errors import ValidationError

CONFIG_KEYS = ("n_layers", "d_model", "d_ffn", "n_heads", "vocab_size",
               "block_size", "max_context")

LAYER_FIELDS = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down",
                "attn_norm", "ffn_norm")

PLACEHOLDER = "{layer}"


def validate_config(config: dict) -> dict:
    """Check the engine's config schema without importing the engine."""
    if not isinstance(config, dict):
        raise ValidationError(f"config must be a JSON object, got {type(config).__name__}")
    missing = [k for k in CONFIG_KEYS if k not in config]
    if missing:
        raise ValidationError(f"config missing keys: {missing}")
    extra = [k for k in config if k not in CONFIG_KEYS]
    if extra:
        raise ValidationError(f"config has unknown keys: {extra}")
    out = {}
    for key in CONFIG_KEYS:
        v = config[key]
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise ValidationError(f"config {key} must be a positive int, got {v!r}")
        out[key] = v
    if out["d_model"] % out["n_heads"] != 0:
        raise ValidationError(
            f"d_model={out['d_model']} not divisible by n_heads={out['n_heads']}"
        )
    if (out["d_model"] // out["n_heads"]) % 2 != 0:
        raise ValidationError(
            f"d_head={out['d_model'] // out['n_heads']} must be even "
            "for rotary embeddings"
        )
    if out["d_ffn"] <= out["d_model"]:
        raise ValidationError(
            f"d_ffn={out['d_ffn']} must exceed d_model={out['d_model']}"
        )
    if out["max_context"] < out["block_size"]:
        raise ValidationError("max_context smaller than one block")
    return out


def engine_tensor_shapes(config: dict) -> dict[str, tuple[int, ...]]:
    """Every engine tensor name with its stored shape; out_head is optional."""
    d, f, v = config["d_model"], config["d_ffn"], config["vocab_size"]
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d),
        "final_norm": (d,),
        "out_head": (d, v),
    }
    per_layer = {
        "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
        "w_gate": (d, f), "w_up": (d, f), "w_down": (f, d),
        "attn_norm": (d,), "ffn_norm": (d,),
    }
    for i in range(config["n_layers"]):
        for field, shape in per_layer.items():
            shapes[f"layers.{i}.{field}"] = shape
    return shapes


@dataclass
class MapEntry:
    source: str
    transpose: bool


@dataclass
class TensorNameMap:
    """Fully expanded mapping: one entry per concrete engine tensor."""

    config: dict
    entries: dict[str, MapEntry]

    @property
    def tied_output(self) -> bool:
        return "out_head" not in self.entries

    def expected_source_shape(self, engine_name: str) -> tuple[int, ...]:
        shape = engine_tensor_shapes(self.config)[engine_name]
        return shape[::-1] if self.entries[engine_name].transpose else shape


def _expand_patterns(raw: dict, n_layers: int) -> dict[str, MapEntry]:
    entries: dict[str, MapEntry] = {}
    problems: list[str] = []
    for key, spec in raw.items():
        if not isinstance(spec, dict) or set(spec) != {"source", "transpose"}:
            problems.append(
                f"entry {key!r} must be an object with exactly "
                "'source' and 'transpose'"
            )
            continue
        source, transpose = spec["source"], spec["transpose"]
        if not isinstance(source, str) or not source:
            problems.append(f"entry {key!r}: source must be a non-empty string")
            continue
        if not isinstance(transpose, bool):
            problems.append(f"entry {key!r}: transpose must be a boolean")
            continue
        if PLACEHOLDER in key:
            if PLACEHOLDER not in source:
                problems.append(
                    f"per-layer entry {key!r} needs {PLACEHOLDER} in its "
                    f"source pattern, got {source!r}"
                )
                continue
            targets = [
                (key.replace(PLACEHOLDER, str(i)),
                 source.replace(PLACEHOLDER, str(i)))
                for i in range(n_layers)
            ]
        else:
            targets = [(key, source)]
        for engine_name, source_name in targets:
            if engine_name in entries:
                problems.append(f"engine tensor {engine_name!r} mapped more than once")
            else:
                entries[engine_name] = MapEntry(source_name, transpose)
    if problems:
        raise ValidationError(
            "invalid name map:\n  - " + "\n  - ".join(problems)
        )
    return entries


def parse_name_map(payload: dict) -> TensorNameMap:
    if not isinstance(payload, dict):
        raise ValidationError("name map must be a JSON object")
    unknown = [k for k in payload if k not in ("config", "tensors")]
    if unknown:
        raise ValidationError(f"name map has unknown top-level keys: {unknown}")
    if "config" not in payload or "tensors" not in payload:
        raise ValidationError("name map needs top-level 'config' and 'tensors'")
    config = validate_config(payload["config"])
    if not isinstance(payload["tensors"], dict):
        raise ValidationError("name map 'tensors' must be a JSON object")
    entries = _expand_patterns(payload["tensors"], config["n_layers"])

    required = engine_tensor_shapes(config)
    missing = [n for n in required if n not in entries and n != "out_head"]
    unknown = [n for n in entries if n not in required]
    problems = []
    if missing:
        problems.append(f"required engine tensors not mapped: {missing}")
    if unknown:
        problems.append(f"mapped names the engine does not define: {unknown}")
    if problems:
        raise ValidationError("invalid name map:\n  - " + "\n  - ".join(problems))
    return TensorNameMap(config=config, entries=entries)


def load_name_map(path) -> TensorNameMap:
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path} is not valid JSON: {exc}") from exc
    return parse_name_map(payload)


def community_default_map(config: dict, tied: bool = False) -> dict:
    """Name-map JSON for the prevalent community decoder layout.

    Linear weights there are stored (out_features, in_features), hence
    transposed relative to the engine's row convention; embeddings and norm
    gains line up directly.
    """
    tensors = {
        "tok_emb": {"source": "model.embed_tokens.weight", "transpose": False},
        "final_norm": {"source": "model.norm.weight", "transpose": False},
        "layers.{layer}.wq": {
            "source": "model.layers.{layer}.self_attn.q_proj.weight",
            "transpose": True},
        "layers.{layer}.wk": {
            "source": "model.layers.{layer}.self_attn.k_proj.weight",
            "transpose": True},
        "layers.{layer}.wv": {
            "source": "model.layers.{layer}.self_attn.v_proj.weight",
            "transpose": True},
        "layers.{layer}.wo": {
            "source": "model.layers.{layer}.self_attn.o_proj.weight",
            "transpose": True},
        "layers.{layer}.w_gate": {
            "source": "model.layers.{layer}.mlp.gate_proj.weight",
            "transpose": True},
        "layers.{layer}.w_up": {
            "source": "model.layers.{layer}.mlp.up_proj.weight",
            "transpose": True},
        "layers.{layer}.w_down": {
            "source": "model.layers.{layer}.mlp.down_proj.weight",
            "transpose": True},
        "layers.{layer}.attn_norm": {
            "source": "model.layers.{layer}.input_layernorm.weight",
            "transpose": False},
        "layers.{layer}.ffn_norm": {
            "source": "model.layers.{layer}.post_attention_layernorm.weight",
            "transpose": False},
    }
    if not tied:
        tensors["out_head"] = {"source": "lm_head.weight", "transpose": True}
    return {"config": dict(config), "tensors": tensors}
