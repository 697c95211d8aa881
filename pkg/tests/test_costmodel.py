import numpy as np
import pytest

from sparseprefill.costmodel import (
    FlopsReport,
    crossover_detailed,
    crossover_simplified,
    curves_to_csv,
    emit_curves,
    estimate_speedup,
    flops_attention,
    flops_ffn,
    predict_prefill_flops,
    simplified_terms,
)
from sparseprefill.engine import prefill_blockwise
from sparseprefill.errors import ValidationError
from sparseprefill.model import ModelConfig
from sparseprefill.scheduler import SparsityPlan, dense_plan, uniform_plan
from sparseprefill.synthetic import generate_synthetic_model
from sparseprefill.predictor import init_predictor
from sparseprefill.compensator import init_compensator


def cfg_of(**overrides):
    base = dict(n_layers=2, d_model=8, d_ffn=24, n_heads=2, vocab_size=32,
                block_size=4, max_context=256)
    base.update(overrides)
    return ModelConfig(**base)


def big_cfg():
    return ModelConfig(n_layers=32, d_model=4096, d_ffn=14336, n_heads=32,
                       vocab_size=128256, block_size=128, max_context=131072)


class TestFormulas:
    def test_attention_single_token_two_dims(self):
        assert flops_attention(1, cfg_of(d_model=2, d_ffn=6, n_heads=1)) == 40

    def test_ffn_single_token_reference(self):
        assert flops_ffn(1, cfg_of(d_model=2, d_ffn=3, n_heads=1), keep=1.0) == 36

    def test_ffn_keep_fraction_floors_neurons(self):
        cfg = cfg_of(d_model=2, d_ffn=10, n_heads=1)
        assert flops_ffn(4, cfg, keep=0.55) == 6 * 4 * 2 * 5
        with pytest.raises(ValidationError):
            flops_ffn(4, cfg, keep=0.0)

    def test_crossover_values(self):
        assert crossover_simplified(big_cfg()) == 28672
        cfg_8b = cfg_of(d_model=4096, d_ffn=8192)
        assert crossover_simplified(cfg_8b) == 16384
        assert crossover_detailed(big_cfg()) == 21504.0

    def test_ffn_dominates_below_simplified_crossover(self):
        cfg = cfg_of(d_model=4, d_ffn=48)
        cross = crossover_simplified(cfg)
        for T in (1, 5, cross // 2, cross - 1):
            ffn_term, attn_term = simplified_terms(T, cfg)
            assert ffn_term > attn_term
        ffn_term, attn_term = simplified_terms(cross, cfg)
        assert ffn_term == attn_term


class TestFlopsReport:
    def test_totals_and_dict(self):
        r = FlopsReport.empty(2, 4, "dense")
        r.add(0, "ffn", 100)
        r.add(1, "attn_proj", 50)
        r.output_head = 7
        assert r.total() == 157
        d = r.to_dict()
        assert d["component_totals"]["ffn"] == 100
        assert d["total"] == 157
        assert d["mode"] == "dense"


class TestPredictMatchesMeasured:
    def _check(self, cfg, tokens, seed, plan, mode, with_comp, with_pred):
        model = generate_synthetic_model(cfg, seed=seed)
        preds = comps = None
        kwargs = {}
        if with_pred:
            rng = np.random.default_rng(seed + 1)
            preds = [init_predictor(cfg, rng) for _ in range(cfg.n_layers)]
            kwargs["predictor_r"] = preds[0].r
        if with_comp:
            rng = np.random.default_rng(seed + 2)
            comps = [init_compensator(cfg, rng) for _ in range(cfg.n_layers)]
            kwargs["compensator_r"] = comps[0].r
        result = prefill_blockwise(model, tokens, plan=plan, mode=mode,
                                   predictors=preds, compensators=comps)
        analytic = predict_prefill_flops(
            cfg, len(tokens), plan=plan, mode=mode,
            has_compensators=with_comp, **kwargs)
        assert result.flops.to_dict() == analytic.to_dict()

    def test_exact_equality_across_modes_and_shapes(self):
        rng = np.random.default_rng(0)
        cases = [
            (cfg_of(), "dense", None, False, False),
            (cfg_of(), "oracle", uniform_plan(2, 0.5), False, False),
            (cfg_of(), "static", uniform_plan(2, 0.5, dense_first_last=False),
             False, False),
            (cfg_of(), "predicted", uniform_plan(2, 0.5), False, True),
            (cfg_of(), "predicted", uniform_plan(2, 0.5), True, True),
            (cfg_of(n_layers=3, d_model=16, d_ffn=40, n_heads=4), "predicted",
             uniform_plan(3, 0.25, dense_first_last=False), True, True),
            (cfg_of(), "oracle",
             SparsityPlan(b=np.array([1.0, 0.25]), dense_first_last=False,
                          budget=0.7), False, False),  # K==d_ffn shortcut
            (cfg_of(block_size=8), "oracle", uniform_plan(2, 0.5), False, False),
            (cfg_of(), "predicted", dense_plan(2), False, False),
            (cfg_of(n_layers=1, d_model=8, d_ffn=16, n_heads=1), "oracle",
             uniform_plan(1, 0.5, dense_first_last=False), False, False),
        ]
        checked = 0
        for i, (cfg, mode, plan, with_comp, with_pred) in enumerate(cases):
            # include a partial final block in half the cases
            n = 3 * cfg.block_size + (0 if i % 2 == 0 else cfg.block_size - 1)
            tokens = rng.integers(0, cfg.vocab_size, size=n)
            self._check(cfg, tokens, seed=i, plan=plan, mode=mode,
                        with_comp=with_comp, with_pred=with_pred)
            checked += 1
        assert checked >= 10

    def test_single_short_block(self):
        cfg = cfg_of()
        tokens = np.random.default_rng(1).integers(0, cfg.vocab_size, size=2)
        self._check(cfg, tokens, seed=3, plan=None, mode="dense",
                    with_comp=False, with_pred=False)


class TestSpeedup:
    def test_all_dense_plan_is_exactly_one(self):
        assert estimate_speedup(big_cfg(), 4096, dense_plan(32)) == 1.0

    def test_half_sparsity_8b_at_4k_lands_in_band(self):
        s = estimate_speedup(big_cfg(), 4096, uniform_plan(32, 0.5))
        assert 1.3 <= s <= 1.5

    def test_aux_overhead_reduces_speedup(self):
        cfg = big_cfg()
        plan = uniform_plan(32, 0.5)
        with_aux = estimate_speedup(cfg, 4096, plan, include_aux=True)
        without = estimate_speedup(cfg, 4096, plan, include_aux=False)
        assert without > with_aux > 1.0


class TestCurves:
    def test_rows_and_csv_header(self):
        cfg = cfg_of()
        rows = emit_curves(cfg, {"dense": None, "half": uniform_plan(2, 0.5)},
                           [4, 8])
        # 2 Ts x 2 plans x (5 layer components + output_head + total)
        assert len(rows) == 2 * 2 * 7
        dense_rows = [r for r in rows if r["plan"] == "dense"]
        assert all(r["speedup"] == 1.0 for r in dense_rows)
        csv = curves_to_csv(rows)
        assert csv.splitlines()[0] == "T,component,flops,plan,speedup"
        assert csv.endswith("\n")

    def test_total_row_sums_components(self):
        cfg = cfg_of()
        rows = emit_curves(cfg, {"half": uniform_plan(2, 0.5)}, [12])
        parts = {r["component"]: r["flops"] for r in rows}
        assert parts["total"] == sum(
            v for k, v in parts.items() if k != "total")
