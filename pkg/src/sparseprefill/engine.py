"""Block-wise prefill over a pre-norm rotary decoder stack.

The sequence is processed in fixed-size blocks (the last one may be short).
Each block runs attention against the KV cache accumulated so far, then an
FFN whose evaluation depends on the mode:

- ``dense``      every block, every layer runs the full FFN
- ``oracle``     sparse blocks score all neurons densely, then keep top-K
- ``predicted``  sparse blocks rank neurons with the per-layer predictor
- ``static``     block 0 runs dense and donates its oracle masks to the rest

A plan supplies per-layer keep fractions and the dense-first/last flag. Any
layer whose K reaches d_ffn short-circuits to the plain dense FFN — no
predictor, no mask, no compensation — so a full-budget plan is exactly the
dense path.

Every matrix product goes through the counted kernels; per-layer,
per-component FLOPs land in a FlopsReport that an analytical prediction must
reproduce exactly.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .compensator import CompensatorParams, apply_compensation, compensator_forward
from .costmodel import MODES, FlopsReport
from .errors import ValidationError
from .model import AttentionTrace, KVCache, LayerWeights, ModelConfig, ModelWeights
from .predictor import PredictorParams, predictor_forward
from .sparse import (
    FirstBlockStatic,
    budget_to_k,
    build_mask,
    mask_from_hidden,
    oracle_experts,
    select_subweights,
    sparse_ffn_forward,
)

ROPE_BASE = 10000.0


@dataclass
class PrefillResult:
    hidden: np.ndarray            # (T, d_model) final-layer residual stream
    cache: KVCache
    last_logits: np.ndarray       # (vocab_size,)
    flops: FlopsReport
    recall_per_layer: np.ndarray | None = None
    masks: dict | None = None     # (layer, block) -> ExpertMask


def apply_rope(m: np.ndarray, positions: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Rotate each head's (first-half, second-half) pairs by position.

    Angles depend only on absolute position, so a block computes the same
    rotations regardless of how the sequence was split.
    """
    dh = cfg.d_head
    half = dh // 2
    freqs = ROPE_BASE ** (-2.0 * np.arange(half) / dh)
    ang = positions[:, None].astype(np.float64) * freqs[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    out = np.empty_like(m)
    for h in range(cfg.n_heads):
        lo = h * dh
        x1 = m[:, lo:lo + half].astype(np.float64)
        x2 = m[:, lo + half:lo + dh].astype(np.float64)
        out[:, lo:lo + half] = (x1 * cos - x2 * sin).astype(np.float32)
        out[:, lo + half:lo + dh] = (x1 * sin + x2 * cos).astype(np.float32)
    return out


def attention_layer(x: np.ndarray, lw: LayerWeights, cfg: ModelConfig,
                    cache: KVCache, layer: int,
                    trace: AttentionTrace | None = None,
                    report: FlopsReport | None = None) -> np.ndarray:
    """Causal multi-head attention for one block of normalized inputs.

    Keys/values are rotated, appended to the cache at the current fill
    position, and every head attends over the full cached prefix plus the
    (causally masked) block itself.
    """
    n = x.shape[0]
    start = cache.length
    total = start + n
    if total > cfg.max_context:
        raise ValidationError(
            f"cache overflow: {total} tokens > max_context={cfg.max_context}"
        )
    positions = np.arange(start, total)

    c0 = kernels.matmul_flops()
    q = kernels.matmul(x, lw.wq)
    k = kernels.matmul(x, lw.wk)
    v = kernels.matmul(x, lw.wv)
    c1 = kernels.matmul_flops()

    q = apply_rope(q, positions, cfg)
    k = apply_rope(k, positions, cfg)
    cache.append(layer, k, v)
    ctx_k = cache.keys(layer, total)
    ctx_v = cache.values(layer, total)

    dh = cfg.d_head
    inv_sqrt = np.float32(1.0 / np.sqrt(dh))
    heads_out = np.empty((n, cfg.d_model), dtype=np.float32)
    for h in range(cfg.n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = kernels.matmul(q[:, sl], ctx_k[:, sl].T) * inv_sqrt
        probs = kernels.softmax_rows(scores, causal=True, row_offset=start)
        if trace is not None:
            trace.record(layer, h, start, probs)
        heads_out[:, sl] = kernels.matmul(probs, ctx_v[:, sl])
    c2 = kernels.matmul_flops()
    out = kernels.matmul(heads_out, lw.wo)
    c3 = kernels.matmul_flops()

    if report is not None:
        report.add(layer, "attn_proj", (c1 - c0) + (c3 - c2))
        report.add(layer, "attn_scores", c2 - c1)
    return out


def dense_ffn(x: np.ndarray, lw: LayerWeights) -> np.ndarray:
    """SiLU-gated FFN over all neurons."""
    gate = kernels.matmul(x, lw.w_gate)
    up = kernels.matmul(x, lw.w_up)
    return kernels.matmul(kernels.silu(gate) * up, lw.w_down)


def dense_ffn_hidden(x: np.ndarray, lw: LayerWeights) -> tuple[np.ndarray, np.ndarray]:
    """Dense FFN that also returns the gated activations (n, d_ffn)."""
    gate = kernels.matmul(x, lw.w_gate)
    up = kernels.matmul(x, lw.w_up)
    hidden = kernels.silu(gate) * up
    return kernels.matmul(hidden, lw.w_down), hidden


def _embed(weights: ModelWeights, tokens) -> np.ndarray:
    cfg = weights.config
    ids = np.asarray(tokens)
    if ids.ndim != 1 or ids.size == 0:
        raise ValidationError("token sequence must be a non-empty 1-D array")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValidationError(f"token ids must be integers, got {ids.dtype}")
    if ids.size > cfg.max_context:
        raise ValidationError(
            f"sequence length {ids.size} exceeds max_context={cfg.max_context}"
        )
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValidationError(
            f"token ids must lie in [0, {cfg.vocab_size}), got "
            f"[{ids.min()}, {ids.max()}]"
        )
    return weights.tok_emb[ids].astype(np.float32)


def _last_logits(weights: ModelWeights, hidden_last_row: np.ndarray,
                 report: FlopsReport) -> np.ndarray:
    normed = kernels.rmsnorm(hidden_last_row, weights.final_norm)
    c0 = kernels.matmul_flops()
    logits = kernels.matmul(normed, weights.out_head())
    report.output_head += kernels.matmul_flops() - c0
    return logits[0]


def prefill_dense(weights: ModelWeights, tokens,
                  trace: AttentionTrace | None = None) -> PrefillResult:
    """Whole-sequence dense prefill in a single pass."""
    cfg = weights.config
    x = _embed(weights, tokens)
    n = x.shape[0]
    cache = KVCache(cfg)
    report = FlopsReport.empty(cfg.n_layers, n, "dense")
    for l, lw in enumerate(weights.layers):
        attn_in = kernels.rmsnorm(x, lw.attn_norm)
        x = x + attention_layer(attn_in, lw, cfg, cache, l, trace=trace,
                                report=report)
        ffn_in = kernels.rmsnorm(x, lw.ffn_norm)
        c0 = kernels.matmul_flops()
        y = dense_ffn(ffn_in, lw)
        report.add(l, "ffn", kernels.matmul_flops() - c0)
        x = x + y
    cache.advance(n)
    logits = _last_logits(weights, x[-1:], report)
    return PrefillResult(hidden=x, cache=cache, last_logits=logits, flops=report)


def _oracle_indices_uncounted(ffn_in: np.ndarray, lw: LayerWeights, k: int) -> np.ndarray:
    # diagnostics-only oracle: plain numpy, invisible to the FLOP counter
    x = ffn_in.astype(np.float64)
    gate = x @ lw.w_gate.astype(np.float64)
    up = x @ lw.w_up.astype(np.float64)
    hidden = gate / (1.0 + np.exp(-gate)) * up
    norms = np.sqrt((hidden * hidden).sum(axis=0)).astype(np.float32)
    return kernels.topk_indices(norms, k)


def prefill_blockwise(weights: ModelWeights, tokens, plan=None,
                      mode: str = "dense",
                      predictors: list[PredictorParams] | None = None,
                      compensators: list[CompensatorParams] | None = None,
                      trace: AttentionTrace | None = None,
                      compute_recall: bool = False,
                      keep_masks: bool = False) -> PrefillResult:
    """Block-by-block prefill; numerically equivalent to the dense pass when
    every block runs dense, at block-level granularity otherwise.

    `plan` may be None only in dense mode. Predicted mode requires per-layer
    predictor params; compensators are optional and, when given, are applied
    on every sparse-path layer. `compute_recall` measures predicted-mask
    recall against the oracle using uncounted arithmetic, so the FLOP report
    still reflects deployment cost only.
    """
    cfg = weights.config
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}; expected one of {MODES}")
    ks = None
    dense_first_last = False
    if mode != "dense":
        if plan is None:
            raise ValidationError(f"mode {mode!r} requires a sparsity plan")
        if len(plan.b) != cfg.n_layers:
            raise ValidationError(
                f"plan has {len(plan.b)} budgets for {cfg.n_layers} layers"
            )
        ks = [budget_to_k(float(b), cfg.d_ffn) for b in plan.b]
        dense_first_last = bool(plan.dense_first_last)
    if mode == "predicted" and any(k < cfg.d_ffn for k in ks):
        if predictors is None or len(predictors) != cfg.n_layers:
            raise ValidationError("predicted mode requires one predictor per layer")
        for p in predictors:
            p.validate(cfg)
    if compensators is not None:
        if len(compensators) != cfg.n_layers:
            raise ValidationError("need one compensator per layer")
        for c in compensators:
            c.validate(cfg)

    x_all = _embed(weights, tokens)
    T = x_all.shape[0]
    n_blocks = cfg.n_blocks(T)
    hidden = np.empty_like(x_all)
    cache = KVCache(cfg)
    report = FlopsReport.empty(cfg.n_layers, T, mode)
    static_bank = FirstBlockStatic()
    masks: dict = {} if keep_masks else None
    recall_sum = np.zeros(cfg.n_layers)
    recall_cnt = np.zeros(cfg.n_layers, dtype=np.int64)

    for j in range(n_blocks):
        lo = j * cfg.block_size
        hi = min(T, lo + cfg.block_size)
        xb = x_all[lo:hi]
        dense_block = (
            mode == "dense"
            or (dense_first_last and (j == 0 or j == n_blocks - 1))
            or (mode == "static" and j == 0)
        )
        for l, lw in enumerate(weights.layers):
            attn_in = kernels.rmsnorm(xb, lw.attn_norm)
            xb = xb + attention_layer(attn_in, lw, cfg, cache, l,
                                      trace=trace, report=report)
            ffn_in = kernels.rmsnorm(xb, lw.ffn_norm)
            full_k = ks is not None and ks[l] == cfg.d_ffn
            if dense_block or full_k:
                c0 = kernels.matmul_flops()
                if mode == "static" and j == 0 and not full_k:
                    y, hid = dense_ffn_hidden(ffn_in, lw)
                    mask = mask_from_hidden(hid, ks[l], layer=l, block=0)
                    static_bank.set_first(l, mask)
                    if keep_masks:
                        masks[(l, 0)] = mask
                else:
                    y = dense_ffn(ffn_in, lw)
                report.add(l, "ffn", kernels.matmul_flops() - c0)
            else:
                if mode == "oracle":
                    c0 = kernels.matmul_flops()
                    mask = oracle_experts(ffn_in, lw, ks[l], layer=l, block=j)
                elif mode == "predicted":
                    p0 = kernels.matmul_flops()
                    scores = predictor_forward(predictors[l], ffn_in)
                    report.add(l, "predictor", kernels.matmul_flops() - p0)
                    mask = build_mask(scores, ks[l], layer=l, block=j)
                    c0 = kernels.matmul_flops()
                else:  # static
                    mask = static_bank.mask_for(l)
                    c0 = kernels.matmul_flops()
                sub = select_subweights(lw, mask)
                y = sparse_ffn_forward(ffn_in, sub)
                report.add(l, "ffn", kernels.matmul_flops() - c0)
                if compensators is not None:
                    q0 = kernels.matmul_flops()
                    y = apply_compensation(
                        y, compensator_forward(compensators[l], ffn_in))
                    report.add(l, "compensator", kernels.matmul_flops() - q0)
                if compute_recall:
                    oracle_idx = _oracle_indices_uncounted(ffn_in, lw, ks[l])
                    inter = np.intersect1d(mask.indices, oracle_idx).size
                    recall_sum[l] += inter / ks[l]
                    recall_cnt[l] += 1
                if keep_masks:
                    masks[(l, j)] = mask
            xb = xb + y
        cache.advance(hi - lo)
        hidden[lo:hi] = xb

    logits = _last_logits(weights, hidden[-1:], report)
    recall = None
    if compute_recall and recall_cnt.any():
        recall = np.full(cfg.n_layers, np.nan)
        got = recall_cnt > 0
        recall[got] = recall_sum[got] / recall_cnt[got]
    return PrefillResult(hidden=hidden, cache=cache, last_logits=logits,
                         flops=report, recall_per_layer=recall, masks=masks)


def collect_ffn_blocks(weights: ModelWeights, tokens):
    """Per-layer (x, hidden, y) triples for each block of a dense pass.

    x is the normalized FFN input, hidden the gated activations, y the dense
    FFN output — the raw material for predictor labels and distillation.
    Returns a list over layers of lists over blocks.
    """
    cfg = weights.config
    x_all = _embed(weights, tokens)
    T = x_all.shape[0]
    cache = KVCache(cfg)
    report = FlopsReport.empty(cfg.n_layers, T, "dense")
    out = [[] for _ in range(cfg.n_layers)]
    for j in range(cfg.n_blocks(T)):
        lo = j * cfg.block_size
        hi = min(T, lo + cfg.block_size)
        xb = x_all[lo:hi]
        for l, lw in enumerate(weights.layers):
            attn_in = kernels.rmsnorm(xb, lw.attn_norm)
            xb = xb + attention_layer(attn_in, lw, cfg, cache, l, report=report)
            ffn_in = kernels.rmsnorm(xb, lw.ffn_norm)
            y, hid = dense_ffn_hidden(ffn_in, lw)
            out[l].append((ffn_in, hid, y))
            xb = xb + y
        cache.advance(hi - lo)
    return out


def capture_attention_mass(weights: ModelWeights, tokens,
                           sink_block: int = 0) -> np.ndarray:
    """Per-layer head-averaged attention mass landing outside the sink block.

    Runs a traced dense prefill and sums, over heads and query positions, the
    probability assigned to keys outside block `sink_block`, divided by the
    head count. A layer whose attention collapses onto the sink block scores
    near zero; spread-out attention scores high.
    """
    cfg = weights.config
    ids = np.asarray(tokens)
    T = ids.size
    sink_lo = sink_block * cfg.block_size
    sink_hi = min(T, sink_lo + cfg.block_size)
    if sink_lo + cfg.block_size >= T:
        raise ValidationError(
            f"sequence (T={T}) must extend beyond sink block {sink_block}; "
            "otherwise every layer scores zero mass"
        )
    trace = AttentionTrace(cfg, T)
    prefill_dense(weights, ids, trace=trace)
    keep = np.ones(T, dtype=bool)
    keep[sink_lo:sink_hi] = False
    out = np.empty(cfg.n_layers, dtype=np.float64)
    for l in range(cfg.n_layers):
        probs = trace.probs[l].astype(np.float64)      # (H, T, T)
        out[l] = probs[:, :, keep].sum() / cfg.n_heads
    return out
