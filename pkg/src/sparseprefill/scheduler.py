"""Layer-wise sparsity budgets from calibration attention mass.

Layers that spread attention beyond the leading (sink) block carry more of
the model's in-context computation; they receive proportionally larger keep
fractions. Allocation walks layers in natural order, granting each
min(1, s_i / S_remaining * T_remaining) — no normalization pass afterwards,
so when caps bind late some budget is deliberately left on the table
(fidelity to the published procedure over allocator optimality).
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .engine import capture_attention_mass
from .errors import ValidationError
from .model import ModelConfig, ModelWeights
from .sparse import budget_to_k

BUDGET_SLACK = 1e-9


@dataclass
class AttentionMassProfile:
    s: np.ndarray          # (n_layers,) mean non-sink attention mass
    n_sequences: int
    n_heads: int
    normalize_per_token: bool = False


def importance_scores(weights: ModelWeights, sequences,
                      sink_block: int = 0,
                      normalize_per_token: bool = False) -> AttentionMassProfile:
    """Mean per-layer non-sink attention mass over calibration sequences.

    Every sequence must span at least two blocks — with a single block there
    are no non-sink keys and the measurement is vacuous. The optional
    per-token normalization divides each sequence's mass by its query count
    before averaging; default off.
    """
    cfg = weights.config
    seqs = list(sequences)
    if not seqs:
        raise ValidationError("need at least one calibration sequence")
    total = np.zeros(cfg.n_layers, dtype=np.float64)
    for i, seq in enumerate(seqs):
        ids = np.asarray(seq)
        if ids.size <= cfg.block_size:
            raise ValidationError(
                f"calibration sequence {i} has {ids.size} tokens; needs more "
                f"than one block (block_size={cfg.block_size})"
            )
        mass = capture_attention_mass(weights, ids, sink_block=sink_block)
        if normalize_per_token:
            mass = mass / ids.size
        total += mass
    return AttentionMassProfile(
        s=total / len(seqs),
        n_sequences=len(seqs),
        n_heads=cfg.n_heads,
        normalize_per_token=normalize_per_token,
    )


def allocate_budgets(s, budget: float) -> np.ndarray:
    """Per-layer keep fractions from importance scores and a global budget.

    Starts from a token pool of budget * n_layers and hands each layer, in
    order, its proportional share capped at 1.0; the pool and the remaining
    importance mass shrink as it goes. When no cap binds this reduces to
    b_i = s_i * budget * L / sum(s).
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValidationError("importance scores must be a non-empty 1-D array")
    if not 0.0 < budget <= 1.0:
        raise ValidationError(f"budget must be in (0, 1], got {budget}")
    if (s < 0).any():
        raise ValidationError("importance scores must be non-negative")
    s_total = float(s.sum())
    if s_total <= 0.0:
        raise ValidationError("importance scores sum to zero; nothing to allocate")

    remaining = budget * s.size
    b = np.empty_like(s)
    for i, s_i in enumerate(s):
        share = min(1.0, s_i / s_total * remaining) if s_total > 0 else 0.0
        share = max(0.0, share)
        b[i] = share
        remaining -= share
        s_total -= float(s_i)
    return b


def budgets_to_topk(b, d_ffn: int) -> list[int]:
    """Integer neuron counts per layer from keep fractions."""
    return [budget_to_k(float(x), d_ffn) for x in np.asarray(b, dtype=np.float64)]


@dataclass
class SparsityPlan:
    b: np.ndarray                     # (n_layers,) keep fractions in (0, 1]
    dense_first_last: bool
    budget: float
    s: np.ndarray | None = None       # provenance: importance profile
    seed: int | None = None
    calibration: str = ""

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.b.ndim != 1 or self.b.size == 0:
            raise ValidationError("plan needs a non-empty 1-D budget vector")
        if (self.b <= 0).any() or (self.b > 1).any():
            raise ValidationError("plan keep fractions must lie in (0, 1]")
        if not 0.0 < self.budget <= 1.0:
            raise ValidationError(f"plan budget must be in (0, 1], got {self.budget}")
        if self.b.sum() > self.budget * self.b.size + BUDGET_SLACK:
            raise ValidationError(
                f"plan over-allocates: sum(b)={self.b.sum():.9f} > "
                f"budget*L={self.budget * self.b.size:.9f}"
            )
        if self.s is not None:
            self.s = np.asarray(self.s, dtype=np.float64)

    def to_json_dict(self) -> dict:
        return {
            "budget": self.budget,
            "dense_first_last": self.dense_first_last,
            "b": [float(x) for x in self.b],
            "s": None if self.s is None else [float(x) for x in self.s],
            "seed": self.seed,
            "calibration": self.calibration,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SparsityPlan":
        required = ("budget", "dense_first_last", "b")
        missing = [k for k in required if k not in d]
        if missing:
            raise ValidationError(f"plan JSON missing keys: {missing}")
        return cls(
            b=np.asarray(d["b"], dtype=np.float64),
            dense_first_last=bool(d["dense_first_last"]),
            budget=float(d["budget"]),
            s=None if d.get("s") is None else np.asarray(d["s"], dtype=np.float64),
            seed=d.get("seed"),
            calibration=d.get("calibration", ""),
        )


def uniform_plan(n_layers: int, budget: float,
                 dense_first_last: bool = True) -> SparsityPlan:
    """Every layer keeps the same fraction — the flat-allocation baseline."""
    return SparsityPlan(
        b=np.full(n_layers, budget, dtype=np.float64),
        dense_first_last=dense_first_last,
        budget=budget,
        calibration="uniform",
    )


def dense_plan(n_layers: int) -> SparsityPlan:
    return SparsityPlan(
        b=np.ones(n_layers, dtype=np.float64),
        dense_first_last=False,
        budget=1.0,
        calibration="dense",
    )


def plan_from_profile(profile: AttentionMassProfile, budget: float,
                      dense_first_last: bool = True,
                      seed: int | None = None,
                      calibration: str = "") -> SparsityPlan:
    b = allocate_budgets(profile.s, budget)
    if (b <= 0).any():
        raise ValidationError(
            "allocation produced a zero keep fraction; budget too small for "
            "this importance profile"
        )
    return SparsityPlan(
        b=b,
        dense_first_last=dense_first_last,
        budget=budget,
        s=profile.s.copy(),
        seed=seed,
        calibration=calibration,
    )


def save_plan(plan: SparsityPlan, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(plan.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_plan(path) -> SparsityPlan:
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"plan file {path} is not valid JSON: {exc}") from exc
    return SparsityPlan.from_json_dict(payload)
