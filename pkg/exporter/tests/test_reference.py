"""Reference forward pass: oracles for its fixed architectural pieces."""

import numpy as np
import pytest

from exporter_fixtures import SMALL_CFG, build_model_pair
from ffwdexport.errors import ValidationError
from ffwdexport.parity import parity_report
from ffwdexport.reference import (
    RMS_EPS,
    read_token_sequences,
    reference_last_logits,
    rotate_positions,
)


def _zeroed_model(cfg):
    _, engine = build_model_pair(cfg, seed=0)
    for name, arr in engine.items():
        if name not in ("tok_emb", "final_norm"):
            engine[name] = np.zeros_like(arr)
    engine["final_norm"] = np.ones_like(engine["final_norm"])
    return engine


def test_zeroed_layers_reduce_to_normalized_embedding_lookup():
    engine = _zeroed_model(SMALL_CFG)
    ids = np.array([3, 1, 9, 9, 2])
    got = reference_last_logits(SMALL_CFG, engine, ids)
    emb = engine["tok_emb"].astype(np.float64)
    last = emb[ids[-1]]
    normed = last / np.sqrt((last * last).mean() + RMS_EPS)
    want = normed @ engine["out_head"].astype(np.float64)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)


def test_tied_head_uses_transposed_embedding():
    engine = _zeroed_model(SMALL_CFG)
    del engine["out_head"]
    ids = np.array([5, 7])
    got = reference_last_logits(SMALL_CFG, engine, ids)
    emb = engine["tok_emb"].astype(np.float64)
    last = emb[7]
    normed = last / np.sqrt((last * last).mean() + RMS_EPS)
    np.testing.assert_allclose(got, normed @ emb.T, rtol=0, atol=1e-15)


def test_rotation_preserves_pair_norms():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((6, 16))
    out = rotate_positions(m, np.arange(10, 16), n_heads=2)
    d_head, half = 8, 4
    for h in range(2):
        lo = h * d_head
        before = m[:, lo:lo + half] ** 2 + m[:, lo + half:lo + d_head] ** 2
        after = out[:, lo:lo + half] ** 2 + out[:, lo + half:lo + d_head] ** 2
        np.testing.assert_allclose(after, before, atol=1e-12)


def test_rotation_closed_form_at_position_three():
    # one head, d_head=4: channel pair 0 spins at frequency 1
    m = np.zeros((1, 4))
    m[0, 0] = 1.0  # unit vector in the first pair's first channel
    out = rotate_positions(m, np.array([3]), n_heads=1)
    assert abs(out[0, 0] - np.cos(3.0)) < 1e-15
    assert abs(out[0, 2] - np.sin(3.0)) < 1e-15


def test_position_zero_is_identity():
    rng = np.random.default_rng(1)
    m = rng.standard_normal((1, 16))
    out = rotate_positions(m, np.array([0]), n_heads=2)
    np.testing.assert_array_equal(out, m)


def test_forward_is_deterministic():
    _, engine = build_model_pair(SMALL_CFG, seed=11)
    ids = np.arange(20) % SMALL_CFG["vocab_size"]
    a = reference_last_logits(SMALL_CFG, engine, ids)
    b = reference_last_logits(SMALL_CFG, engine, ids)
    assert np.array_equal(a, b)
    assert a.shape == (SMALL_CFG["vocab_size"],)
    assert np.isfinite(a).all()


def test_token_validation():
    _, engine = build_model_pair(SMALL_CFG, seed=12)
    with pytest.raises(ValidationError, match="non-empty"):
        reference_last_logits(SMALL_CFG, engine, np.array([], dtype=int))
    with pytest.raises(ValidationError, match="integers"):
        reference_last_logits(SMALL_CFG, engine, np.array([0.5]))
    with pytest.raises(ValidationError, match="lie in"):
        reference_last_logits(SMALL_CFG, engine, np.array([64]))
    with pytest.raises(ValidationError, match="max_context"):
        reference_last_logits(SMALL_CFG, engine, np.zeros(129, dtype=int))


def test_token_file_round_trip(tmp_path):
    path = tmp_path / "toks.txt"
    path.write_text("1 2 3\n\n  \n4 5\n")
    assert read_token_sequences(path) == [[1, 2, 3], [4, 5]]
    bad = tmp_path / "bad.txt"
    bad.write_text("1 x 3\n")
    with pytest.raises(ValidationError, match="must be integers"):
        read_token_sequences(bad)
    empty = tmp_path / "empty.txt"
    empty.write_text("\n\n")
    with pytest.raises(ValidationError, match="no token sequences"):
        read_token_sequences(empty)


def test_parity_report_identical_and_mismatched():
    rows = [np.array([1.0, 2.0, 3.0]), np.array([0.5, -1.0, 0.0])]
    report = parity_report(rows, [r.copy() for r in rows])
    assert report["max_abs_diff"] == 0.0
    assert report["argmax_agreement"] == 1.0
    assert report["n_sequences"] == 2

    shifted = [rows[0] + 0.25, rows[1]]
    report = parity_report(rows, shifted)
    assert report["max_abs_diff"] == 0.25
    assert report["argmax_agreement"] == 1.0  # a constant shift keeps argmax

    flipped = [rows[0][::-1], rows[1]]
    report = parity_report(rows, flipped)
    assert report["per_sequence"][0]["argmax_match"] is False
    assert report["argmax_agreement"] == 0.5

    with pytest.raises(ValidationError, match="count mismatch"):
        parity_report(rows, rows[:1])
    with pytest.raises(ValidationError, match="length mismatch"):
        parity_report(rows, [rows[0][:2], rows[1]])
