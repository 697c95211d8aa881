import math

import numpy as np
import numpy.testing as npt
import pytest

from sparseprefill.errors import ValidationError
from sparseprefill.model import ModelConfig
from sparseprefill.predictor import (
    PredictorParams,
    default_reduced_dim,
    generate_labels,
    init_predictor,
    mask_recall,
    predictor_forward,
    predictor_loss_and_grads,
    weighted_bce_loss,
)


class TestReducedDim:
    def test_reference_widths(self):
        assert default_reduced_dim(2048) == 128
        assert default_reduced_dim(3072) == 256   # 192 rounds up to 256
        assert default_reduced_dim(4096) == 256
        assert default_reduced_dim(16) == 1
        assert default_reduced_dim(17) == 2
        assert default_reduced_dim(8) == 1


class TestForward:
    def test_hand_rolled_two_token_block(self):
        # d=2, r=1, f=2; logits z_i = q.x_i / sqrt(2)
        q = np.array([[1.0, 0.0]], np.float32)
        w1 = np.array([[1.0], [1.0]], np.float32)
        w2 = np.array([[2.0, -1.0]], np.float32)
        params = PredictorParams(query=q, w1=w1, w2=w2)
        x = np.array([[1.0, 0.0], [0.0, 1.0]], np.float32)

        z = [1.0 / math.sqrt(2), 0.0]
        e = [math.exp(v) for v in z]
        p = [v / sum(e) for v in e]
        pooled = [p[0], p[1]]
        hid = max(0.0, pooled[0] + pooled[1])     # == 1
        expected = [2.0 * hid, -1.0 * hid]
        npt.assert_allclose(predictor_forward(params, x), expected, atol=1e-5)

    def test_negative_hidden_is_rectified(self):
        params = PredictorParams(
            query=np.zeros((1, 2), np.float32),
            w1=np.array([[-1.0], [-1.0]], np.float32),
            w2=np.array([[5.0, 5.0]], np.float32))
        x = np.ones((3, 2), np.float32)
        npt.assert_array_equal(predictor_forward(params, x), [0.0, 0.0])

    def test_rejects_bad_input_shape(self):
        cfg = ModelConfig(n_layers=1, d_model=8, d_ffn=16, n_heads=1,
                          vocab_size=4, block_size=4, max_context=8)
        params = init_predictor(cfg, np.random.default_rng(0))
        with pytest.raises(ValidationError):
            predictor_forward(params, np.zeros((2, 7), np.float32))

    def test_validate_against_config(self):
        cfg = ModelConfig(n_layers=1, d_model=8, d_ffn=16, n_heads=1,
                          vocab_size=4, block_size=4, max_context=8)
        params = init_predictor(cfg, np.random.default_rng(0))
        params.validate(cfg)
        with pytest.raises(ValidationError):
            params.validate(ModelConfig(n_layers=1, d_model=4, d_ffn=16,
                                        n_heads=1, vocab_size=4, block_size=4,
                                        max_context=8))


class TestLabels:
    def test_distinct_norms_ten_neurons(self):
        # column i has constant magnitude 10-i, so ranking is identity
        hidden = np.tile(np.arange(10.0, 0.0, -1.0, dtype=np.float32), (2, 1))
        y, w = generate_labels(hidden)
        npt.assert_array_equal(y, [1, 1, 1, 1, 1, 0, 0, 0, 0, 0])
        npt.assert_array_equal(w, [32, 16, 8, 4, 2, 1, 1, 1, 1, 1])

    def test_two_neurons(self):
        y, w = generate_labels(np.array([[5.0, 1.0]], np.float32))
        npt.assert_array_equal(y, [1, 0])
        npt.assert_array_equal(w, [32, 1])

    def test_single_neuron(self):
        y, w = generate_labels(np.array([[0.5]], np.float32))
        npt.assert_array_equal(y, [1])
        npt.assert_array_equal(w, [32])

    def test_ties_prefer_low_index(self):
        y, w = generate_labels(np.ones((2, 6), np.float32))
        npt.assert_array_equal(y, [1, 1, 1, 0, 0, 0])

    def test_positive_count_is_half_rounded_up(self):
        rng = np.random.default_rng(1)
        for f in (1, 2, 3, 7, 8, 24, 33):
            y, w = generate_labels(rng.standard_normal((4, f)).astype(np.float32))
            assert int(y.sum()) == -(-f // 2)
            assert set(np.unique(w[y == 1])) <= {32.0, 16.0, 8.0, 4.0, 2.0}
            assert (w[y == 0] == 1.0).all()

    def test_tranche_boundaries_seven_positives(self):
        # 13 neurons -> 7 positives; ceil(7t/5) boundaries 0,2,3,5,6,7
        hidden = np.tile(np.arange(13.0, 0.0, -1.0, dtype=np.float32), (1, 1))
        _, w = generate_labels(hidden)
        npt.assert_array_equal(w[:7], [32, 32, 16, 8, 8, 4, 2])


class TestBceLoss:
    def test_zero_logit_positive_is_ln2(self):
        loss, grad = weighted_bce_loss(np.array([0.0]), np.array([1.0]),
                                       np.array([1.0]))
        assert abs(loss - math.log(2.0)) < 1e-12
        npt.assert_allclose(grad, [-0.5], atol=1e-12)

    def test_weights_scale_loss_and_grad(self):
        s, y = np.array([0.3, -1.2]), np.array([1.0, 0.0])
        l1, g1 = weighted_bce_loss(s, y, np.array([1.0, 1.0]))
        l8, g8 = weighted_bce_loss(s, y, np.array([8.0, 8.0]))
        assert abs(l8 - 8.0 * l1) < 1e-9
        npt.assert_allclose(g8, 8.0 * g1, atol=1e-12)

    def test_extreme_logits_stay_finite(self):
        loss, grad = weighted_bce_loss(np.array([1e4, -1e4]),
                                       np.array([0.0, 1.0]),
                                       np.array([32.0, 32.0]))
        assert np.isfinite(loss) and np.isfinite(grad).all()

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(2)
        s = rng.standard_normal(6)
        y = (rng.random(6) < 0.5).astype(np.float64)
        w = rng.choice([1.0, 2.0, 32.0], size=6)
        _, grad = weighted_bce_loss(s, y, w)
        eps = 1e-6
        for i in range(6):
            sp, sm = s.copy(), s.copy()
            sp[i] += eps
            sm[i] -= eps
            fd = (weighted_bce_loss(sp, y, w)[0] -
                  weighted_bce_loss(sm, y, w)[0]) / (2 * eps)
            assert abs(grad[i] - fd) < 1e-5


def central_difference_check(params, x, y, w, eps=1e-5, tol=1e-4):
    """Max relative error between analytic and central-difference grads."""
    _, grads = predictor_loss_and_grads(params, x, y, w)
    worst = 0.0
    for name, analytic in zip(("query", "w1", "w2"), grads):
        tensor = getattr(params, name)
        fd = np.zeros_like(analytic)
        it = np.nditer(tensor, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = tensor[idx]
            tensor[idx] = orig + eps
            lp = predictor_loss_and_grads(params, x, y, w)[0]
            tensor[idx] = orig - eps
            lm = predictor_loss_and_grads(params, x, y, w)[0]
            tensor[idx] = orig
            fd[idx] = (lp - lm) / (2 * eps)
        scale = max(np.abs(analytic).max(), np.abs(fd).max(), 1e-8)
        worst = max(worst, float(np.abs(analytic - fd).max() / scale))
    assert worst < tol, f"gradient mismatch {worst:.3e}"
    return worst


class TestGradients:
    def test_analytic_matches_central_differences(self):
        # float64 parameter copies: an f32 tensor quantizes the +/-eps probe
        # and the rounding noise alone would exceed the tolerance
        rng = np.random.default_rng(3)
        for trial in range(8):
            params = PredictorParams(
                query=rng.standard_normal((1, 6)) * 0.5,
                w1=rng.standard_normal((6, 2)) * 0.5,
                w2=rng.standard_normal((2, 8)) * 0.5)
            x = rng.standard_normal((5, 6)).astype(np.float32)
            y = (rng.random(8) < 0.5).astype(np.float64)
            w = rng.choice([1.0, 2.0, 4.0, 32.0], size=8)
            central_difference_check(params, x, y, w)

    def test_gradients_are_float64_and_shaped(self):
        cfg = ModelConfig(n_layers=1, d_model=4, d_ffn=6, n_heads=1,
                          vocab_size=4, block_size=4, max_context=8)
        params = init_predictor(cfg, np.random.default_rng(4), r=2)
        x = np.random.default_rng(5).standard_normal((3, 4)).astype(np.float32)
        y, w = generate_labels(np.abs(
            np.random.default_rng(6).standard_normal((3, 6))).astype(np.float32))
        loss, (dq, dw1, dw2) = predictor_loss_and_grads(params, x, y, w)
        assert loss > 0
        assert dq.shape == (1, 4) and dq.dtype == np.float64
        assert dw1.shape == (4, 2) and dw2.shape == (2, 6)


class TestRecall:
    def test_counts_overlap_fraction(self):
        assert mask_recall(np.array([0, 1, 2, 3]), np.array([2, 3, 4, 5])) == 0.5
        assert mask_recall(np.array([1]), np.array([1])) == 1.0
