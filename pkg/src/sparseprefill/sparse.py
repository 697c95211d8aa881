"""Masked FFN evaluation: expert masks, sub-weight slices, gated forward.

A mask selects K of the d_ffn hidden neurons for one (layer, block) pair.
Sub-weights are materialized as contiguous slices in engine orientation
(gate/up keep their d_model rows and drop columns; down drops rows), so
slice i is bit-identical to dense neuron indices[i].
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ValidationError
from .model import LayerWeights


@dataclass
class ExpertMask:
    bits: np.ndarray          # (d_ffn,) uint8, exactly k ones
    k: int
    layer: int = -1
    block: int = -1
    indices: np.ndarray = field(init=False)

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.bits.ndim != 1:
            raise ValidationError(f"mask bits must be 1-D, got {self.bits.shape}")
        if not np.isin(self.bits, (0, 1)).all():
            raise ValidationError("mask bits must be 0/1")
        pop = int(self.bits.sum())
        if pop != self.k:
            raise ValidationError(f"mask popcount {pop} != k={self.k}")
        self.indices = np.flatnonzero(self.bits).astype(np.int64)


def budget_to_k(b: float, d_ffn: int) -> int:
    """Neuron count for a keep fraction: round half away from zero, floor 1.

    Shared by the engine, the scheduler, and the cost model — the three must
    agree exactly or analytic and measured FLOPs drift apart.
    """
    if not 0.0 < b <= 1.0:
        raise ValidationError(f"keep fraction must be in (0, 1], got {b}")
    return min(d_ffn, max(1, int(np.floor(b * d_ffn + 0.5))))


def build_mask(scores, k: int, layer: int = -1, block: int = -1) -> ExpertMask:
    """Top-k binary mask over neuron scores; ties keep the lower index."""
    scores = np.asarray(scores, dtype=np.float32)
    idx = kernels.topk_indices(scores, k)
    bits = np.zeros(scores.shape[0], dtype=np.uint8)
    bits[idx] = 1
    return ExpertMask(bits=bits, k=k, layer=layer, block=block)


@dataclass
class SubWeights:
    w_gate: np.ndarray   # (d_model, K)
    w_up: np.ndarray     # (d_model, K)
    w_down: np.ndarray   # (K, d_model)
    mask: ExpertMask


def select_subweights(lw: LayerWeights, mask: ExpertMask) -> SubWeights:
    d_ffn = lw.w_gate.shape[1]
    if mask.bits.shape[0] != d_ffn:
        raise ValidationError(
            f"mask width {mask.bits.shape[0]} != d_ffn {d_ffn}"
        )
    idx = mask.indices
    return SubWeights(
        w_gate=kernels.gather_cols(lw.w_gate, idx),
        w_up=kernels.gather_cols(lw.w_up, idx),
        w_down=kernels.gather_rows(lw.w_down, idx),
        mask=mask,
    )


def sparse_ffn_forward(x: np.ndarray, sub: SubWeights) -> np.ndarray:
    """Gated FFN restricted to the selected neurons.

    Equals the dense FFN with non-selected hidden activations zeroed; with a
    full mask it is bit-identical to the dense path (same slices, same
    products, same rounding).
    """
    gate = kernels.matmul(x, sub.w_gate)
    up = kernels.matmul(x, sub.w_up)
    hidden = kernels.silu(gate) * up
    return kernels.matmul(hidden, sub.w_down)


def hidden_column_scores(hidden: np.ndarray) -> np.ndarray:
    """Per-neuron L2 norm of gated activations across a block of tokens."""
    h = np.asarray(hidden, dtype=np.float64)
    return np.sqrt((h * h).sum(axis=0)).astype(np.float32)


def mask_from_hidden(hidden: np.ndarray, k: int,
                     layer: int = -1, block: int = -1) -> ExpertMask:
    return build_mask(hidden_column_scores(hidden), k, layer=layer, block=block)


def oracle_experts(x: np.ndarray, lw: LayerWeights, k: int,
                   layer: int = -1, block: int = -1) -> ExpertMask:
    """Exact top-k mask from a dense scoring pass over the block.

    Runs the full gate/up products (costed like any other matmul), so this is
    an accuracy ceiling, not a shortcut.
    """
    gate = kernels.matmul(x, lw.w_gate)
    up = kernels.matmul(x, lw.w_up)
    hidden = kernels.silu(gate) * up
    return mask_from_hidden(hidden, k, layer=layer, block=block)


class FirstBlockStatic:
    """Reuse the first block's oracle masks for every later block.

    The first block runs dense; its per-layer masks are frozen here and
    served unchanged for the rest of the sequence.
    """

    def __init__(self):
        self._masks: dict[int, ExpertMask] = {}

    def set_first(self, layer: int, mask: ExpertMask) -> None:
        self._masks[layer] = mask

    def mask_for(self, layer: int) -> ExpertMask:
        if layer not in self._masks:
            raise ValidationError(
                f"static mask requested for layer {layer} before the first "
                "block was processed"
            )
        return self._masks[layer]
