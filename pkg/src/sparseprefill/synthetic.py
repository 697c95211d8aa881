"""Synthetic models and corpora with engineered, verifiable structure.

Three generators:

- `generate_synthetic_model`: plain random weights for equivalence and
  round-trip tests.
- `generate_clustered_corpus`: a model + token stream whose FFN neurons are
  planted in per-cluster groups. Each cluster's inputs drive its own "strong"
  group hard, the next cluster's group at a clearly weaker level, and the rest
  at noise level — so the top-half oracle set per block is deterministic and
  known ahead of time. That gives trainable structure with a computable
  ceiling: mask predictors must recover the planted sets, and a first-block
  static mask is provably wrong on blocks from other clusters.
- `attention_skewed_model`: alternating layers whose attention either
  collapses onto a leading sink token (token id 0, carried by a reserved
  embedding coordinate that nothing else writes) or spreads uniformly.
  Sink layers also get a deliberately weak FFN, uniform layers a strong one,
  so layer importance is genuinely heterogeneous.

Everything is deterministic in the seed.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .model import LayerWeights, ModelConfig, ModelWeights

F32 = np.float32


def _random_layer(rng: np.random.Generator, cfg: ModelConfig,
                  scale: float) -> LayerWeights:
    d, f = cfg.d_model, cfg.d_ffn
    def w(*shape):
        return (rng.standard_normal(shape) * scale).astype(F32)
    return LayerWeights(
        wq=w(d, d), wk=w(d, d), wv=w(d, d), wo=w(d, d),
        w_gate=w(d, f), w_up=w(d, f), w_down=w(f, d),
        attn_norm=np.ones(d, dtype=F32),
        ffn_norm=np.ones(d, dtype=F32),
    )


def generate_synthetic_model(cfg: ModelConfig, seed: int,
                             scale: float = 0.02,
                             tied_output: bool = False) -> ModelWeights:
    """Gaussian-initialized model, fully determined by (cfg, seed, scale)."""
    rng = np.random.default_rng(seed)
    d, v = cfg.d_model, cfg.vocab_size
    weights = ModelWeights(
        config=cfg,
        tok_emb=(rng.standard_normal((v, d)) * scale).astype(F32),
        layers=[_random_layer(rng, cfg, scale) for _ in range(cfg.n_layers)],
        final_norm=np.ones(d, dtype=F32),
        w_out=None if tied_output else (rng.standard_normal((d, v)) * scale).astype(F32),
    )
    weights.validate()
    return weights


@dataclass
class SyntheticCorpusSpec:
    n_clusters: int
    n_sequences: int
    seq_length: int
    seed: int


@dataclass
class ClusteredCorpus:
    weights: ModelWeights
    sequences: list[list[int]]
    block_clusters: list[list[int]]       # cluster id per block per sequence
    strong_groups: list[np.ndarray]       # planted neuron group per cluster
    secondary_groups: list[np.ndarray]    # weaker companion group per cluster
    token_ranges: list[np.ndarray]        # vocab ids per cluster


# planted activation levels: strong >> secondary >> noise
_BETA_STRONG = 0.5
_BETA_SECONDARY = 0.15
_SIGMA_COLUMN = 0.02
_SIGMA_EMB = 0.02
_SIGMA_DOWN = 0.0005
_SIGMA_ATTN = 0.02


def generate_clustered_corpus(cfg: ModelConfig,
                              spec: SyntheticCorpusSpec) -> ClusteredCorpus:
    n = spec.n_clusters
    d, f, v = cfg.d_model, cfg.d_ffn, cfg.vocab_size
    if n < 2:
        raise ValidationError("need at least 2 clusters")
    if d < n or f < 2 * n or v < n:
        raise ValidationError(
            f"config too small for {n} clusters: d_model={d}, d_ffn={f}, vocab={v}"
        )
    if spec.n_sequences < 1 or spec.seq_length < 1:
        raise ValidationError("corpus needs at least one sequence and one token")
    rng = np.random.default_rng(spec.seed)

    # orthogonal cluster directions on disjoint coordinate blocks
    coord_groups = np.array_split(np.arange(d), n)
    directions = np.zeros((n, d))
    for c, coords in enumerate(coord_groups):
        directions[c, coords] = 1.0 / np.sqrt(len(coords))

    neuron_groups = [g.astype(np.int64) for g in np.array_split(np.arange(f), n)]
    token_ranges = [t.astype(np.int64) for t in np.array_split(np.arange(v), n)]

    layers = []
    for _ in range(cfg.n_layers):
        w_gate = rng.standard_normal((d, f)) * _SIGMA_COLUMN
        w_up = rng.standard_normal((d, f)) * _SIGMA_COLUMN
        for c in range(n):
            cols = neuron_groups[c]
            # group c fires hard for cluster c and mildly for cluster c-1
            planted = (_BETA_STRONG * directions[c]
                       + _BETA_SECONDARY * directions[(c - 1) % n])
            w_gate[:, cols] += planted[:, None]
            w_up[:, cols] += planted[:, None]
        layers.append(LayerWeights(
            wq=(rng.standard_normal((d, d)) * _SIGMA_ATTN).astype(F32),
            wk=(rng.standard_normal((d, d)) * _SIGMA_ATTN).astype(F32),
            wv=(rng.standard_normal((d, d)) * _SIGMA_ATTN).astype(F32),
            wo=(rng.standard_normal((d, d)) * _SIGMA_ATTN).astype(F32),
            w_gate=w_gate.astype(F32),
            w_up=w_up.astype(F32),
            w_down=(rng.standard_normal((f, d)) * _SIGMA_DOWN).astype(F32),
            attn_norm=np.ones(d, dtype=F32),
            ffn_norm=np.ones(d, dtype=F32),
        ))

    emb = rng.standard_normal((v, d)) * _SIGMA_EMB
    for c, tokens in enumerate(token_ranges):
        emb[tokens] += directions[c]
    weights = ModelWeights(
        config=cfg,
        tok_emb=emb.astype(F32),
        layers=layers,
        final_norm=np.ones(d, dtype=F32),
        w_out=(rng.standard_normal((d, v)) * _SIGMA_ATTN).astype(F32),
    )
    weights.validate()

    sequences, block_clusters = [], []
    for _ in range(spec.n_sequences):
        seq: list[int] = []
        clusters: list[int] = []
        while len(seq) < spec.seq_length:
            c = int(rng.integers(n))
            take = min(cfg.block_size, spec.seq_length - len(seq))
            seq.extend(int(t) for t in rng.choice(token_ranges[c], size=take))
            clusters.append(c)
        sequences.append(seq)
        block_clusters.append(clusters)

    secondary = [neuron_groups[(c + 1) % n] for c in range(n)]
    return ClusteredCorpus(
        weights=weights,
        sequences=sequences,
        block_clusters=block_clusters,
        strong_groups=neuron_groups,
        secondary_groups=secondary,
        token_ranges=token_ranges,
    )


SINK_TOKEN = 0


def attention_skewed_model(cfg: ModelConfig, seed: int,
                           sink_layers: list[int],
                           query_gain: float = 2.0,
                           key_gain: float = 2.0,
                           sink_emb_scale: float = 4.0) -> ModelWeights:
    """Model with engineered per-layer importance contrast.

    Layers in `sink_layers` are rank-1 attention traps: every query matches
    only the sink token's key (token id 0 at sequence start), because keys are
    read off a reserved embedding coordinate that only token 0 carries and
    that no residual update ever writes. Their FFNs are near-inert. The other
    layers attend uniformly (zero QK) and carry a strong FFN. Sequences fed to
    this model must start with token id 0.
    """
    d, f, v = cfg.d_model, cfg.d_ffn, cfg.vocab_size
    dh = cfg.d_head
    for l in sink_layers:
        if not 0 <= l < cfg.n_layers:
            raise ValidationError(f"sink layer {l} out of range")
    rng = np.random.default_rng(seed)

    # shared direction g (orthogonal to the reserved coordinate 0)
    g = np.zeros(d)
    g[1:] = 1.0 / np.sqrt(d - 1)
    e0 = np.zeros(d)
    e0[0] = 1.0
    # per-head key/query pattern on the slowest rotary pair, so rotation
    # keeps sink scores aligned across hundreds of positions
    w_slow = np.zeros(d)
    for h in range(cfg.n_heads):
        w_slow[h * dh + dh // 2 - 1] = 1.0

    layers = []
    for l in range(cfg.n_layers):
        is_sink = l in sink_layers
        if is_sink:
            wq = query_gain * np.outer(g, w_slow)
            wk = key_gain * np.outer(e0, w_slow)
            vo_scale, gu_scale, down_scale = 0.01, 0.05, 0.0005
        else:
            wq = np.zeros((d, d))
            wk = np.zeros((d, d))
            vo_scale, gu_scale, down_scale = 0.05, 0.2, 0.05
        wv = rng.standard_normal((d, d)) * vo_scale
        wo = rng.standard_normal((d, d)) * vo_scale
        wo[:, 0] = 0.0                       # never write the sink coordinate
        w_down = rng.standard_normal((f, d)) * down_scale
        w_down[:, 0] = 0.0
        layers.append(LayerWeights(
            wq=wq.astype(F32), wk=wk.astype(F32),
            wv=wv.astype(F32), wo=wo.astype(F32),
            w_gate=(rng.standard_normal((d, f)) * gu_scale).astype(F32),
            w_up=(rng.standard_normal((d, f)) * gu_scale).astype(F32),
            w_down=w_down.astype(F32),
            attn_norm=np.ones(d, dtype=F32),
            ffn_norm=np.ones(d, dtype=F32),
        ))

    emb = np.empty((v, d))
    emb[SINK_TOKEN] = sink_emb_scale * e0 + g
    for t in range(1, v):
        noise = rng.standard_normal(d)
        noise[0] = 0.0
        noise -= (noise @ g) * g            # keep every token's g-component equal
        emb[t] = g + 0.25 * noise
    weights = ModelWeights(
        config=cfg,
        tok_emb=emb.astype(F32),
        layers=layers,
        final_norm=np.ones(d, dtype=F32),
        w_out=(rng.standard_normal((d, v)) * 0.1).astype(F32),
    )
    weights.validate()
    return weights


def sink_prefixed_sequences(cfg: ModelConfig, n_sequences: int,
                            seq_length: int, seed: int) -> list[list[int]]:
    """Random sequences opening with the sink token (for skewed models)."""
    if seq_length < 2:
        raise ValidationError("sequences must have room for the sink token")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_sequences):
        body = rng.integers(1, cfg.vocab_size, size=seq_length - 1)
        out.append([SINK_TOKEN] + [int(t) for t in body])
    return out


def write_tokens_file(path, sequences) -> None:
    """One sequence per line, whitespace-separated integer ids."""
    with open(path, "w", encoding="utf-8") as fh:
        for seq in sequences:
            fh.write(" ".join(str(int(t)) for t in seq))
            fh.write("\n")


def read_tokens_file(path) -> list[list[int]]:
    sequences = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                sequences.append([int(tok) for tok in line.split()])
            except ValueError as exc:
                raise ValidationError(
                    f"{path}:{line_no}: token ids must be integers ({exc})"
                ) from exc
    if not sequences:
        raise ValidationError(f"{path} contains no token sequences")
    return sequences
