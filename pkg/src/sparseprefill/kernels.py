"""Dense float32 tensor kernels with 64-bit product accumulation.

Conventions used everywhere downstream:

- a "matrix" is a 2-D float32 ndarray; kernels cast inputs to float32,
  so callers holding float64 scratch data get engine semantics regardless
- an "index set" is a 1-D int64 ndarray, strictly increasing
- every matrix product in the engine goes through :func:`matmul`, which
  accumulates in float64, rounds once to float32, and charges 2 FLOPs per
  multiply-accumulate to a module-level counter

The counter is the one piece of process-global state here (pure functions
otherwise); it exists so cost-model predictions can be checked against the
arithmetic actually performed, and it is not thread-safe.
"""

import numpy as np

from .errors import ValidationError

_matmul_flops = 0


def matmul_flops() -> int:
    """Total FLOPs charged to matrix products since the last reset."""
    return _matmul_flops


def reset_matmul_flops() -> None:
    global _matmul_flops
    _matmul_flops = 0


def _as_matrix(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    """Product of two matrices, float64 accumulation, float32 result."""
    global _matmul_flops
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValidationError(
            f"matmul inner dimensions differ: {a.shape} @ {b.shape}"
        )
    m, k = a.shape
    n = b.shape[1]
    _matmul_flops += 2 * m * k * n
    out64 = np.matmul(a.astype(np.float64), b.astype(np.float64))
    return out64.astype(np.float32)


def softmax_rows(m, causal: bool = False, row_offset: int = 0) -> np.ndarray:
    """Row-wise softmax with row-max subtraction.

    With ``causal=True``, row i may only attend to columns j <= i + row_offset
    (row i is the query at absolute position ``row_offset + i``); masked
    entries are exactly zero in the output.
    """
    m = _as_matrix(m, "m")
    n_rows, n_cols = m.shape
    logits = m.astype(np.float64)
    if causal:
        if row_offset < 0:
            raise ValidationError(f"row_offset must be >= 0, got {row_offset}")
        if n_cols < row_offset + 1:
            raise ValidationError(
                f"causal softmax needs >= row_offset+1 columns, got {m.shape}"
            )
        cols = np.arange(n_cols)[None, :]
        rows = np.arange(n_rows)[:, None]
        logits = np.where(cols > rows + row_offset, -np.inf, logits)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    out = e / e.sum(axis=1, keepdims=True)
    return out.astype(np.float32)


def silu(m) -> np.ndarray:
    """x * sigmoid(x), evaluated in a branch that never overflows exp."""
    m = np.asarray(m, dtype=np.float32)
    x = m.astype(np.float64)
    out = np.where(x >= 0, x / (1.0 + np.exp(-np.abs(x))),
                   x * np.exp(x) / (1.0 + np.exp(x)))
    return out.astype(np.float32)


def relu(m) -> np.ndarray:
    return np.maximum(np.asarray(m, dtype=np.float32), np.float32(0.0))


def rmsnorm(m, gain, eps: float = 1e-6) -> np.ndarray:
    """Rows scaled to unit RMS, then an elementwise per-column gain."""
    m = _as_matrix(m, "m")
    gain = np.asarray(gain, dtype=np.float32)
    if gain.shape != (m.shape[1],):
        raise ValidationError(
            f"gain shape {gain.shape} does not match row width {m.shape[1]}"
        )
    x = m.astype(np.float64)
    scale = 1.0 / np.sqrt((x * x).mean(axis=1, keepdims=True) + eps)
    return (x * scale * gain.astype(np.float64)).astype(np.float32)


def _check_index_set(idx, limit: int, name: str) -> np.ndarray:
    idx = np.asarray(idx)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ValidationError(f"{name} must be a 1-D integer array")
    idx = idx.astype(np.int64)
    if idx.size == 0:
        raise ValidationError(f"{name} must not be empty")
    if (np.diff(idx) <= 0).any():
        raise ValidationError(f"{name} must be strictly increasing")
    if idx[0] < 0 or idx[-1] >= limit:
        raise ValidationError(
            f"{name} out of range [0, {limit}): {idx[0]}..{idx[-1]}"
        )
    return idx


def gather_rows(m, idx) -> np.ndarray:
    """Rows of m selected by a strictly increasing index set."""
    m = _as_matrix(m, "m")
    idx = _check_index_set(idx, m.shape[0], "row index set")
    return m[idx]


def gather_cols(m, idx) -> np.ndarray:
    """Columns of m selected by a strictly increasing index set."""
    m = _as_matrix(m, "m")
    idx = _check_index_set(idx, m.shape[1], "column index set")
    return np.ascontiguousarray(m[:, idx])


def topk_indices(scores, k: int) -> np.ndarray:
    """Index set of the k largest scores; ties keep the lower index."""
    scores = np.asarray(scores, dtype=np.float32)
    if scores.ndim != 1:
        raise ValidationError(f"scores must be 1-D, got shape {scores.shape}")
    n = scores.shape[0]
    if not 1 <= k <= n:
        raise ValidationError(f"k={k} out of range [1, {n}]")
    # stable sort on negated scores: equal scores stay in index order
    order = np.argsort(-scores, kind="stable")[:k]
    return np.sort(order).astype(np.int64)
