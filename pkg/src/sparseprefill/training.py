"""SGD training loops for the mask predictor and the error compensator.

Both trainers consume dense-pass block captures (`collect_ffn_blocks`), hold
out a trailing fraction of blocks, and run plain SGD with a global gradient
norm clip of 1.0. All gradient math happens in float64; parameters are
rounded back to float32 after each step, so reruns with the same seed are
bit-identical. NaN or inf anywhere in a loss or gradient aborts with a
NumericError that names the layer and step.
"""

from dataclasses import dataclass, field

import numpy as np

from .compensator import (
    CompensatorParams,
    init_compensator,
    mse_distill_loss,
)
from .engine import collect_ffn_blocks
from .errors import NumericError, ValidationError
from .model import ModelWeights
from .predictor import (
    PredictorParams,
    generate_labels,
    init_predictor,
    predictor_forward,
    predictor_loss_and_grads,
)
from .sparse import budget_to_k, build_mask, mask_from_hidden, select_subweights, sparse_ffn_forward

F32 = np.float32
GRAD_CLIP = 1.0


@dataclass
class TrainHistory:
    """Per-layer loss curves plus held-out loss before/after training."""
    epoch_loss: list[list[float]] = field(default_factory=list)
    holdout_before: list[float] = field(default_factory=list)
    holdout_after: list[float] = field(default_factory=list)


def _clip_global(grads: tuple[np.ndarray, ...], clip: float) -> tuple[np.ndarray, ...]:
    total = np.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > clip:
        scale = clip / total
        return tuple(g * scale for g in grads)
    return grads


def _check_finite(value: float, grads, layer: int, step: int, what: str) -> None:
    bad = not np.isfinite(value) or any(not np.isfinite(g).all() for g in grads)
    if bad:
        raise NumericError(
            f"{what} diverged at layer {layer}, step {step}: loss={value}"
        )


def _split_holdout(n_blocks: int, holdout_frac: float) -> int:
    if not 0.0 <= holdout_frac < 1.0:
        raise ValidationError(f"holdout fraction must be in [0, 1), got {holdout_frac}")
    n_hold = int(np.floor(n_blocks * holdout_frac))
    n_train = n_blocks - n_hold
    if n_train < 1:
        raise ValidationError(
            f"no training blocks left ({n_blocks} blocks, holdout={holdout_frac})"
        )
    return n_train


def train_predictor(weights: ModelWeights, sequences, epochs: int, lr: float,
                    seed: int, r: int | None = None,
                    holdout_frac: float = 0.25,
                    clip: float = GRAD_CLIP) -> tuple[list[PredictorParams], TrainHistory]:
    """Fit one activation predictor per layer on dense-pass captures.

    Returns the trained per-layer parameters and a history whose held-out
    loss is evaluated before and after training.
    """
    cfg = weights.config
    if epochs < 0 or lr < 0:
        raise ValidationError("epochs and lr must be non-negative")
    captures = [[] for _ in range(cfg.n_layers)]
    for seq in sequences:
        per_layer = collect_ffn_blocks(weights, np.asarray(seq))
        for l in range(cfg.n_layers):
            for x, hid, _y in per_layer[l]:
                y, w = generate_labels(hid)
                captures[l].append((x, y, w))
    n_blocks = len(captures[0])
    if n_blocks == 0:
        raise ValidationError("no blocks collected from the corpus")
    n_train = _split_holdout(n_blocks, holdout_frac)

    history = TrainHistory()
    params_out: list[PredictorParams] = []
    params = None
    try:
        for l in range(cfg.n_layers):
            rng = np.random.default_rng([seed, l])
            params = init_predictor(cfg, rng, r=r)
            train = captures[l][:n_train]
            hold = captures[l][n_train:]

            def holdout_loss(p):
                if not hold:
                    return float("nan")
                return float(np.mean([
                    predictor_loss_and_grads(p, x, y, w)[0] for x, y, w in hold
                ]))

            history.holdout_before.append(holdout_loss(params))
            curve = []
            step = 0
            for _epoch in range(epochs):
                order = rng.permutation(len(train))
                losses = []
                for i in order:
                    x, y, w = train[i]
                    loss, grads = predictor_loss_and_grads(params, x, y, w)
                    _check_finite(loss, grads, l, step, "predictor training")
                    gq, g1, g2 = _clip_global(grads, clip)
                    params = PredictorParams(
                        query=(params.query.astype(np.float64) - lr * gq).astype(F32),
                        w1=(params.w1.astype(np.float64) - lr * g1).astype(F32),
                        w2=(params.w2.astype(np.float64) - lr * g2).astype(F32),
                    )
                    losses.append(loss)
                    step += 1
                curve.append(float(np.mean(losses)))
            history.epoch_loss.append(curve)
            history.holdout_after.append(holdout_loss(params))
            params_out.append(params)
    except NumericError as exc:
        # params still holds the value before the diverging step
        rescue = list(params_out) + ([params] if params is not None else [])
        for l2 in range(len(rescue), cfg.n_layers):
            rescue.append(init_predictor(cfg, np.random.default_rng([seed, l2]), r=r))
        exc.last_good = rescue
        raise
    return params_out, history


def train_compensator(weights: ModelWeights, sequences, keep: float,
                      epochs: int, lr: float, seed: int,
                      phase_split: float = 0.5,
                      predictors: list[PredictorParams] | None = None,
                      r: int | None = None,
                      holdout_frac: float = 0.25,
                      clip: float = GRAD_CLIP) -> tuple[list[CompensatorParams], TrainHistory]:
    """Distill per-layer compensators against dense FFN outputs.

    Training has two phases over the step budget: the first `phase_split`
    fraction uses oracle masks (the compensator learns alongside an ideal
    selector), the remainder uses the trained predictor's masks (matching
    deployment). phase_split=1.0 skips phase two entirely; anything below
    1.0 requires predictor parameters.
    """
    cfg = weights.config
    if epochs < 0 or lr < 0:
        raise ValidationError("epochs and lr must be non-negative")
    if not 0.0 <= phase_split <= 1.0:
        raise ValidationError(f"phase_split must be in [0, 1], got {phase_split}")
    if phase_split < 1.0 and predictors is None:
        raise ValidationError(
            "phase two trains on predicted masks; pass predictor params or "
            "set phase_split=1.0"
        )
    k = budget_to_k(keep, cfg.d_ffn)
    if k >= cfg.d_ffn:
        raise ValidationError(
            f"keep={keep} selects every neuron; nothing to compensate"
        )

    # Pre-compute, per (layer, block): input, dense output, and the sparse
    # outputs under both mask sources. Masks are fixed while the compensator
    # trains, so this hoists all heavy matmuls out of the epoch loop.
    captures = [[] for _ in range(cfg.n_layers)]
    for seq in sequences:
        per_layer = collect_ffn_blocks(weights, np.asarray(seq))
        for l in range(cfg.n_layers):
            lw = weights.layers[l]
            for x, hid, y_dense in per_layer[l]:
                oracle_mask = mask_from_hidden(hid, k)
                y_oracle = sparse_ffn_forward(x, select_subweights(lw, oracle_mask))
                if predictors is not None:
                    scores = predictor_forward(predictors[l], x)
                    pred_mask = build_mask(scores, k)
                    y_pred = sparse_ffn_forward(x, select_subweights(lw, pred_mask))
                else:
                    y_pred = y_oracle
                captures[l].append((x, y_dense, y_oracle, y_pred))
    n_blocks = len(captures[0])
    if n_blocks == 0:
        raise ValidationError("no blocks collected from the corpus")
    n_train = _split_holdout(n_blocks, holdout_frac)

    history = TrainHistory()
    params_out: list[CompensatorParams] = []
    params = None
    try:
        for l in range(cfg.n_layers):
            rng = np.random.default_rng([seed + 1, l])
            params = init_compensator(cfg, rng, r=r)
            train = captures[l][:n_train]
            hold = captures[l][n_train:]
            total_steps = epochs * len(train)
            phase1_steps = int(round(phase_split * total_steps))

            def holdout_loss(p):
                if not hold:
                    return float("nan")
                return float(np.mean([
                    mse_distill_loss(p, x, yd, yp)[0] for x, yd, _yo, yp in hold
                ]))

            history.holdout_before.append(holdout_loss(params))
            curve = []
            step = 0
            for _epoch in range(epochs):
                order = rng.permutation(len(train))
                losses = []
                for i in order:
                    x, y_dense, y_oracle, y_pred = train[i]
                    y_sparse = y_oracle if step < phase1_steps else y_pred
                    loss, grads = mse_distill_loss(params, x, y_dense, y_sparse)
                    _check_finite(loss, grads, l, step, "compensator training")
                    g1, g2 = _clip_global(grads, clip)
                    params = CompensatorParams(
                        w1=(params.w1.astype(np.float64) - lr * g1).astype(F32),
                        w2=(params.w2.astype(np.float64) - lr * g2).astype(F32),
                    )
                    losses.append(loss)
                    step += 1
                curve.append(float(np.mean(losses)))
            history.epoch_loss.append(curve)
            history.holdout_after.append(holdout_loss(params))
            params_out.append(params)
    except NumericError as exc:
        rescue = list(params_out) + ([params] if params is not None else [])
        for l2 in range(len(rescue), cfg.n_layers):
            rescue.append(
                init_compensator(cfg, np.random.default_rng([seed + 1, l2]), r=r))
        exc.last_good = rescue
        raise
    return params_out, history
