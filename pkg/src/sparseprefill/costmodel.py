"""Analytical FLOP accounting and speedup estimation.

Convention: one multiply-accumulate costs 2 FLOPs, and only matrix products
are counted (softmax, norms, rotations, and other elementwise work are
excluded) — the same rule the instrumented kernel counter applies, so an
analytical report here must equal a measured one integer-for-integer.

Two crossover boundaries are exposed and must not be conflated:

- simplified: gated-FFN term 2*T*d_model*d_ffn against the attention
  quadratic T^2*d_model, which cross at exactly T = 2*d_ffn;
- detailed: full-constant FFN 6*T*d_model*d_ffn against the attention
  quadratic 4*T^2*d_model, which cross at T = 1.5*d_ffn.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .model import ModelConfig
from .sparse import budget_to_k

LAYER_COMPONENTS = ("attn_proj", "attn_scores", "ffn", "predictor", "compensator")
MODES = ("dense", "oracle", "predicted", "static")


@dataclass
class FlopsReport:
    """Exact per-layer, per-component matmul FLOP counts for one prefill."""

    n_tokens: int
    mode: str
    per_layer: list[dict[str, int]] = field(default_factory=list)
    output_head: int = 0

    @classmethod
    def empty(cls, n_layers: int, n_tokens: int, mode: str) -> "FlopsReport":
        return cls(
            n_tokens=n_tokens,
            mode=mode,
            per_layer=[{c: 0 for c in LAYER_COMPONENTS} for _ in range(n_layers)],
        )

    def add(self, layer: int, component: str, flops: int) -> None:
        self.per_layer[layer][component] += flops

    def component_totals(self) -> dict[str, int]:
        totals = {c: 0 for c in LAYER_COMPONENTS}
        for layer in self.per_layer:
            for c in LAYER_COMPONENTS:
                totals[c] += layer[c]
        totals["output_head"] = self.output_head
        return totals

    def total(self) -> int:
        return sum(self.component_totals().values())

    def to_dict(self) -> dict:
        return {
            "n_tokens": self.n_tokens,
            "mode": self.mode,
            "per_layer": [dict(l) for l in self.per_layer],
            "output_head": self.output_head,
            "component_totals": self.component_totals(),
            "total": self.total(),
        }


def flops_attention(T: int, cfg: ModelConfig) -> int:
    """One dense attention layer over a full T-token pass: 8*T*d^2 + 4*T^2*d."""
    d = cfg.d_model
    return 8 * T * d * d + 4 * T * T * d


def flops_ffn(T: int, cfg: ModelConfig, keep: float) -> int:
    """One gated FFN layer at a keep fraction: 6*T*d*floor(keep*d_ffn)."""
    if not 0.0 < keep <= 1.0:
        raise ValidationError(f"keep fraction must be in (0, 1], got {keep}")
    return 6 * T * cfg.d_model * int(np.floor(keep * cfg.d_ffn))


def simplified_terms(T: int, cfg: ModelConfig) -> tuple[int, int]:
    """(gated-FFN term, attention quadratic term) of the simplified model."""
    return 2 * T * cfg.d_model * cfg.d_ffn, T * T * cfg.d_model


def crossover_simplified(cfg: ModelConfig) -> int:
    """Context length where the simplified terms cross: exactly 2*d_ffn."""
    return 2 * cfg.d_ffn


def crossover_detailed(cfg: ModelConfig) -> float:
    """Context length where 6*T*d*d_ffn meets 4*T^2*d: 1.5*d_ffn."""
    return 1.5 * cfg.d_ffn


def _block_spans(T: int, block_size: int):
    spans = []
    lo = 0
    while lo < T:
        hi = min(T, lo + block_size)
        spans.append((lo, hi))
        lo = hi
    return spans


def predict_prefill_flops(cfg: ModelConfig, T: int, plan=None, mode: str = "dense",
                          has_compensators: bool = False,
                          include_predictor: bool = True,
                          predictor_r: int | None = None,
                          compensator_r: int | None = None) -> FlopsReport:
    """Analytical twin of a block-wise prefill's instrumented FLOP report.

    Mirrors the execution path exactly: block partition with a short final
    block, dense first/last blocks when the plan says so, per-layer K from
    the keep fractions, the dense shortcut when K == d_ffn, oracle scoring
    charged to the ffn component, and the last-token output head.

    `plan` is any object with `b` (per-layer keep fractions) and
    `dense_first_last`; it may be None only in dense mode.
    """
    from .predictor import default_reduced_dim
    from .compensator import default_comp_dim

    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}")
    if T < 1:
        raise ValidationError("T must be >= 1")
    if mode == "dense":
        ks = None
        dense_first_last = False
    else:
        if plan is None:
            raise ValidationError(f"mode {mode!r} requires a plan")
        if len(plan.b) != cfg.n_layers:
            raise ValidationError(
                f"plan has {len(plan.b)} budgets for {cfg.n_layers} layers"
            )
        ks = [budget_to_k(float(b), cfg.d_ffn) for b in plan.b]
        dense_first_last = bool(plan.dense_first_last)

    d, f = cfg.d_model, cfg.d_ffn
    r = default_reduced_dim(d) if predictor_r is None else predictor_r
    rc = default_comp_dim(d) if compensator_r is None else compensator_r

    report = FlopsReport.empty(cfg.n_layers, T, mode)
    spans = _block_spans(T, cfg.block_size)
    m = len(spans)
    cache_len = 0
    for j, (lo, hi) in enumerate(spans):
        n = hi - lo
        cache_len += n
        dense_block = (
            mode == "dense"
            or (dense_first_last and (j == 0 or j == m - 1))
            or (mode == "static" and j == 0)
        )
        for l in range(cfg.n_layers):
            report.add(l, "attn_proj", 8 * n * d * d)
            report.add(l, "attn_scores", 4 * n * cache_len * d)
            if dense_block or (ks is not None and ks[l] == f):
                report.add(l, "ffn", 6 * n * d * f)
                continue
            k = ks[l]
            if mode == "oracle":
                report.add(l, "ffn", 4 * n * d * f + 6 * n * d * k)
            elif mode == "predicted":
                if include_predictor:
                    report.add(l, "predictor", 4 * n * d + 2 * d * r + 2 * r * f)
                report.add(l, "ffn", 6 * n * d * k)
            else:  # static
                report.add(l, "ffn", 6 * n * d * k)
            if has_compensators:
                report.add(l, "compensator", 4 * n * d * rc)
    report.output_head = 2 * d * cfg.vocab_size
    return report


def estimate_speedup(cfg: ModelConfig, T: int, plan,
                     include_aux: bool = True) -> float:
    """Dense-over-sparse FLOP ratio for one prefill under a sparsity plan.

    With include_aux the denominator carries predictor and compensator
    overhead (the deployed configuration); without it the ratio reflects pure
    FFN savings. An all-dense plan gives exactly 1.0 either way.
    """
    dense = predict_prefill_flops(cfg, T, mode="dense").total()
    sparse = predict_prefill_flops(
        cfg, T, plan=plan, mode="predicted",
        has_compensators=include_aux, include_predictor=include_aux,
    ).total()
    return dense / sparse


def emit_curves(cfg: ModelConfig, plans: dict, context_lengths) -> list[dict]:
    """Cost-model sweep rows: one row per (T, plan, component).

    `plans` maps a label to a plan object or to None for the dense baseline.
    Row schema matches the benchmark CSV: T, component, flops, plan, speedup.
    """
    rows = []
    for T in context_lengths:
        dense_total = predict_prefill_flops(cfg, T, mode="dense").total()
        for label, plan in plans.items():
            if plan is None:
                report = predict_prefill_flops(cfg, T, mode="dense")
            else:
                report = predict_prefill_flops(
                    cfg, T, plan=plan, mode="predicted", has_compensators=True
                )
            speedup = dense_total / report.total()
            totals = report.component_totals()
            for component in (*LAYER_COMPONENTS, "output_head"):
                rows.append({
                    "T": T,
                    "component": component,
                    "flops": totals[component],
                    "plan": label,
                    "speedup": speedup,
                })
            rows.append({
                "T": T,
                "component": "total",
                "flops": report.total(),
                "plan": label,
                "speedup": speedup,
            })
    return rows


def curves_to_csv(rows: list[dict]) -> str:
    lines = ["T,component,flops,plan,speedup"]
    for row in rows:
        lines.append(
            f"{row['T']},{row['component']},{row['flops']},{row['plan']},"
            f"{row['speedup']:.6f}"
        )
    return "\n".join(lines) + "\n"
