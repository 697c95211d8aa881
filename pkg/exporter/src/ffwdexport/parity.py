"""Numeric comparison between engine-produced and reference logits.

Accepts two logits files and reports, per sequence and overall, the maximum
absolute difference and whether the argmax token agrees. Either side may be
an engine prefill report (``{"sequences": [{"last_logits": [...]}]}``) or a
plain logits file (``{"logits": [[...], ...]}``) as written by the
``reference`` command.
"""

import json

import numpy as np

from .errors import ValidationError


def load_logits(path) -> list[np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path} is not valid JSON: {exc}") from exc
    if isinstance(payload, dict) and "sequences" in payload:
        rows = [entry.get("last_logits") for entry in payload["sequences"]]
    elif isinstance(payload, dict) and "logits" in payload:
        rows = payload["logits"]
    else:
        raise ValidationError(
            f"{path}: expected an engine prefill report ('sequences') or a "
            "logits file ('logits')"
        )
    out = []
    for i, row in enumerate(rows):
        if not isinstance(row, list) or not row:
            raise ValidationError(f"{path}: sequence {i} has no logits")
        out.append(np.asarray(row, dtype=np.float64))
    if not out:
        raise ValidationError(f"{path}: no logits to compare")
    return out


def parity_report(engine_logits: list[np.ndarray],
                  ref_logits: list[np.ndarray]) -> dict:
    if len(engine_logits) != len(ref_logits):
        raise ValidationError(
            f"sequence count mismatch: engine has {len(engine_logits)}, "
            f"reference has {len(ref_logits)}"
        )
    per_sequence = []
    for i, (eng, ref) in enumerate(zip(engine_logits, ref_logits)):
        if eng.shape != ref.shape:
            raise ValidationError(
                f"sequence {i}: logit length mismatch, engine {eng.shape[0]} "
                f"vs reference {ref.shape[0]}"
            )
        per_sequence.append({
            "max_abs_diff": float(np.max(np.abs(eng - ref))),
            "argmax_match": bool(int(np.argmax(eng)) == int(np.argmax(ref))),
        })
    return {
        "n_sequences": len(per_sequence),
        "max_abs_diff": max(e["max_abs_diff"] for e in per_sequence),
        "argmax_agreement": float(
            np.mean([e["argmax_match"] for e in per_sequence])
        ),
        "per_sequence": per_sequence,
    }
