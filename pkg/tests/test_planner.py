import io

import numpy as np
import pytest

from hglm.model import ModelConfig, init_weights
from hglm.planner import (
    BUDGET_RTOL,
    InfeasibleBudgetError,
    SweepSpec,
    budgets_match,
    enumerate_sweep,
    flops_per_token,
    solve_dh,
    sweep_csv_lines,
    total_params,
    write_sweep_csv,
)


def shape(d_model, d_h, n_layers, blocks, heads=12):
    kind = "conventional" if blocks == 1 and d_h > d_model else "hourglass"
    return ModelConfig(d_model=d_model, d_h=d_h, n_layers=n_layers, n_heads=heads,
                       ffn_kind=kind, ffn_blocks=blocks)


def round_m(n):
    return round(n / 1e6)


# Expected counts below were derived by hand from L*4*d^2 and L*K*3*dh*d
# and cross-checked against an instantiated model's element count
# (see test_formula_matches_instantiated_model).

BASELINE_113M = 113_246_208


def test_conventional_113m_counts():
    bd = total_params(shape(768, 3072, 12, 1))
    assert bd.attention_params == 28_311_552
    assert bd.ffn_params == 84_934_656
    assert bd.total_nonembedding == BASELINE_113M


def test_hourglass_113m_counts():
    bd = total_params(shape(1032, 418, 12, 4))
    assert round_m(bd.attention_params) == 51
    assert round_m(bd.ffn_params) == 62
    assert bd.total_nonembedding == 113_239_296


def test_hourglass_1074m_counts():
    bd = total_params(shape(2848, 2486, 20, 1, heads=16))
    assert round_m(bd.attention_params) == 649
    assert round_m(bd.ffn_params) == 425


def test_norm_params_counted_but_excluded():
    bd = total_params(shape(1032, 418, 12, 4))
    assert bd.norm_params == 12 * 5 * 1032 + 1032
    assert bd.total_nonembedding == bd.attention_params + bd.ffn_params


def test_formula_matches_instantiated_model():
    rng = np.random.default_rng(0)
    for _ in range(5):
        heads = int(rng.choice([1, 2, 4]))
        d_model = heads * 2 * int(rng.integers(1, 6))
        cfg = ModelConfig(
            d_model=d_model,
            d_h=int(rng.integers(1, 40)),
            n_layers=int(rng.integers(1, 4)),
            n_heads=heads,
            ffn_kind="hourglass",
            ffn_blocks=int(rng.integers(1, 5)),
            vocab_size=7,
            max_seq=8,
        )
        model = init_weights(cfg, seed=1)
        assert model.weight_matrix_param_count() == total_params(cfg).total_nonembedding


# -- solve_dh -----------------------------------------------------------------


def test_solve_dh_reproduces_113m_width():
    assert solve_dh(BASELINE_113M, 1032, 12, 4) == 418


def test_solve_dh_reproduces_403m_width():
    assert solve_dh(402_653_184, 1376, 24, 4) == 557


def test_solve_dh_fixed_attention_widths():
    # Same-budget bottlenecks at d_model=768, L=12 for deeper stacks.
    expected = {5: 614, 6: 512, 8: 384, 10: 307}
    for blocks, dh in expected.items():
        assert solve_dh(BASELINE_113M, 768, 12, blocks) == dh


def test_solve_dh_never_exceeds_budget():
    cases = [
        (BASELINE_113M, 1032, 12, 4),
        (402_653_184, 1376, 24, 4),
        (262_144, 88, 4, 4),
        (BASELINE_113M, 768, 12, 6),
    ]
    for budget, d_model, n_layers, blocks in cases:
        heads = {88: 4, 1376: 16}.get(d_model, 12)
        dh = solve_dh(budget, d_model, n_layers, blocks)
        total = total_params(shape(d_model, dh, n_layers, blocks, heads=heads)).total_nonembedding
        assert total <= budget
        over = total_params(shape(d_model, dh + 1, n_layers, blocks, heads=heads)).total_nonembedding
        assert over > budget


def test_solve_dh_infeasible_when_attention_eats_budget():
    attention_only = 12 * 4 * 1032 * 1032
    with pytest.raises(InfeasibleBudgetError):
        solve_dh(attention_only, 1032, 12, 4)


# -- flops ---------------------------------------------------------------------


def test_flops_train_at_113m():
    cfg = shape(768, 3072, 12, 1)
    assert flops_per_token(cfg, "train") == 6.79477248e8


def test_flops_forward_is_third_of_train():
    for args in [(768, 3072, 12, 1), (1032, 418, 12, 4)]:
        cfg = shape(*args)
        assert flops_per_token(cfg, "forward") * 3 == flops_per_token(cfg, "train")


def test_flops_rejects_unknown_mode():
    with pytest.raises(ValueError):
        flops_per_token(shape(768, 3072, 12, 1), "inference")


# -- sweeps ----------------------------------------------------------------------


def test_depth_ablation_totals():
    spec = SweepSpec(budget=BASELINE_113M, axis="dh_ratio", k_values=(1, 2, 4, 6, 8),
                     d_model=1032, n_layers=12, dh_grid=(418,))
    rows = enumerate_sweep(spec)
    totals = {r.config.ffn_blocks: round_m(r.breakdown.total_nonembedding) for r in rows}
    assert totals == {1: 67, 2: 82, 4: 113, 6: 144, 8: 175}
    assert all(round_m(r.breakdown.attention_params) == 51 for r in rows)


def test_width_ablation_ffn_sizes():
    spec = SweepSpec(budget=BASELINE_113M, axis="dh_ratio", k_values=(4,),
                     d_model=1032, n_layers=12, dh_grid=(103, 209, 418, 627, 836))
    rows = enumerate_sweep(spec)
    assert [r.config.d_h for r in rows] == [103, 209, 418, 627, 836]
    assert [round_m(r.breakdown.ffn_params) for r in rows] == [15, 31, 62, 93, 124]
    ratios = [r.axis_value for r in rows]
    assert ratios == sorted(ratios)


def test_dh_grid_accepts_fractional_ratios():
    spec = SweepSpec(budget=BASELINE_113M, axis="dh_ratio", k_values=(4,),
                     d_model=1000, n_layers=12, dh_grid=(0.25,), n_heads=10)
    rows = enumerate_sweep(spec)
    assert rows[0].config.d_h == 250


def test_joint_k_l_rows():
    # Budget-matched rows at fixed d_model: attention/ffn splits of the
    # 113M joint (k, layers) study.
    for d_model, dh, blocks, n_layers, attn_m, ffn_m in [
        (1176, 553, 2, 12, 66, 47),
        (1488, 1122, 2, 6, 53, 60),
        (1032, 418, 4, 12, 51, 62),
        (1368, 694, 4, 6, 45, 68),
    ]:
        bd = total_params(shape(d_model, dh, n_layers, blocks))
        assert (round_m(bd.attention_params), round_m(bd.ffn_params)) == (attn_m, ffn_m)
        assert budgets_match(bd.total_nonembedding, BASELINE_113M)


def test_width_depth_sweep_lands_on_budget():
    spec = SweepSpec(budget=BASELINE_113M, axis="width_depth", k_values=(4,),
                     dh_ratio=0.4, layer_grid=(6, 12, 24))
    rows = enumerate_sweep(spec)
    assert len(rows) == 3
    for r in rows:
        assert r.config.d_model % spec.n_heads == 0
        assert (r.config.d_model // spec.n_heads) % 2 == 0
        assert r.breakdown.total_nonembedding <= BASELINE_113M
        assert r.within_tolerance
    values = [r.axis_value for r in rows]
    assert values == sorted(values)


def test_width_depth_recovers_reference_shape():
    spec = SweepSpec(budget=BASELINE_113M, axis="width_depth", k_values=(4,),
                     dh_ratio=0.4, layer_grid=(12,))
    row = enumerate_sweep(spec)[0]
    assert row.config.d_model == 1032
    assert row.config.d_h == 418


def test_sweep_flags_out_of_tolerance_rows():
    spec = SweepSpec(budget=BASELINE_113M, axis="dh_ratio", k_values=(4,),
                     d_model=1032, n_layers=12, dh_grid=(103, 418))
    rows = enumerate_sweep(spec)
    flags = {r.config.d_h: r.within_tolerance for r in rows}
    assert flags[103] is False  # 66M total, nowhere near 113M
    assert flags[418] is True
    assert len(rows) == 2  # flagged, not dropped


def test_empty_grid_emits_zero_rows():
    spec = SweepSpec(budget=BASELINE_113M, axis="dh_ratio", k_values=(4,),
                     d_model=1032, n_layers=12, dh_grid=())
    assert enumerate_sweep(spec) == []
    assert sweep_csv_lines([]) == [
        "d_model,d_h,L,K,attention_params,ffn_params,total,flops_per_token_train,within_tolerance"
    ]


def test_sweep_determinism():
    spec = SweepSpec(budget=BASELINE_113M, axis="dh_ratio", k_values=(2, 4),
                     d_model=1032, n_layers=12, dh_grid=(209, 418))
    assert sweep_csv_lines(enumerate_sweep(spec)) == sweep_csv_lines(enumerate_sweep(spec))


def test_sweep_csv_schema():
    spec = SweepSpec(budget=BASELINE_113M, axis="dh_ratio", k_values=(4,),
                     d_model=1032, n_layers=12, dh_grid=(418,))
    buf = io.StringIO()
    write_sweep_csv(enumerate_sweep(spec), buf)
    lines = buf.getvalue().strip().split("\n")
    assert lines[0] == "d_model,d_h,L,K,attention_params,ffn_params,total,flops_per_token_train,within_tolerance"
    assert lines[1] == "1032,418,12,4,51121152,62118144,113239296,679435776,1"


def test_budget_match_rule():
    assert budgets_match(113_239_296, BASELINE_113M)
    assert not budgets_match(100_000_000, BASELINE_113M)
    assert BUDGET_RTOL == 1e-3
