"""Exact parameter and FLOP accounting, budget-matched width solving, and
design-space sweep enumeration.

All counts follow the no-bias convention: one layer holds 4*d_model^2
attention weights plus ffn_blocks * 3 * d_h * d_model feed-forward weights.
Norm scales are counted but reported separately; embeddings and the output
projection are excluded throughout (the non-embedding convention).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .model import ModelConfig

# Relative tolerance for calling two budgets "matched". The matching rule is
# a fraction of 1e-3: integer bottleneck widths quantize totals in steps of
# n_layers * 3 * blocks * d_model parameters, so a tighter gate would reject
# every realizable pairing at the shapes this tool exists to plan.
BUDGET_RTOL = 1e-3


class InfeasibleBudgetError(ValueError):
    """The attention stack alone consumes the entire parameter budget."""


class BudgetMismatchError(ValueError):
    """Two configurations that must be budget-matched are not."""


@dataclass(frozen=True)
class ParamBreakdown:
    """Non-embedding parameter counts for one configuration."""

    attention_params: int
    ffn_params: int
    norm_params: int
    total_nonembedding: int


def breakdown_for(d_model: int, d_h: int, n_layers: int, ffn_blocks: int) -> ParamBreakdown:
    """Parameter counts for a raw shape, without constructing a full config."""
    attention = n_layers * 4 * d_model * d_model
    ffn = n_layers * ffn_blocks * 3 * d_h * d_model
    norms = n_layers * (1 + ffn_blocks) * d_model + d_model
    return ParamBreakdown(
        attention_params=attention,
        ffn_params=ffn,
        norm_params=norms,
        total_nonembedding=attention + ffn,
    )


def total_params(cfg: ModelConfig) -> ParamBreakdown:
    """Exact integer parameter counts of the weight matrices in cfg."""
    return breakdown_for(cfg.d_model, cfg.d_h, cfg.n_layers, cfg.ffn_blocks)


def solve_dh(budget: int, d_model: int, n_layers: int, ffn_blocks: int) -> int:
    """Largest bottleneck width whose total stays at or under the budget.

    Exact integer arithmetic: floor((budget - attention) / ffn-per-unit-width).
    The caller re-checks the landed total against its matching tolerance.
    """
    attention = n_layers * 4 * d_model * d_model
    remaining = budget - attention
    if remaining <= 0:
        raise InfeasibleBudgetError(
            f"attention alone needs {attention} parameters, budget is {budget}"
        )
    dh = remaining // (3 * ffn_blocks * d_model * n_layers)
    if dh < 1:
        raise InfeasibleBudgetError(
            f"budget {budget} leaves no room for a feed-forward width at d_model={d_model}"
        )
    return int(dh)


def flops_per_token(cfg: ModelConfig, mode: str = "train") -> float:
    """Dense-matmul FLOPs per token: 2N forward, 6N with the backward pass.

    Attention-score FLOPs and embedding lookups are excluded, matching the
    non-embedding parameter convention.
    """
    n = total_params(cfg).total_nonembedding
    if mode == "forward":
        return 2.0 * n
    if mode == "train":
        return 6.0 * n
    raise ValueError(f"mode must be 'forward' or 'train', got {mode!r}")


def budgets_match(total_a: int, total_b: int, rtol: float = BUDGET_RTOL) -> bool:
    return abs(total_a - total_b) <= rtol * max(total_a, total_b)


# -- sweeps ---------------------------------------------------------------------


@dataclass(frozen=True)
class SweepSpec:
    """Grid description for one design-space sweep.

    dh_ratio sweeps fix d_model and n_layers and walk (k, bottleneck) grid
    points; a dh_grid entry that is an exact integer is used as d_h directly,
    a fractional entry r becomes floor(r * d_model). width_depth sweeps fix
    the bottleneck ratio and walk layer counts, solving d_model and then d_h
    to land on the budget.
    """

    budget: int
    axis: str  # "dh_ratio" | "width_depth"
    k_values: tuple[int, ...]
    d_model: int = 0  # dh_ratio only
    n_layers: int = 0  # dh_ratio only
    dh_grid: tuple[float, ...] = ()  # dh_ratio only
    dh_ratio: float = 0.0  # width_depth only
    layer_grid: tuple[int, ...] = ()  # width_depth only
    n_heads: int = 12
    vocab_size: int = 256
    max_seq: int = 2048
    tolerance: float = BUDGET_RTOL

    def __post_init__(self):
        if self.axis not in ("dh_ratio", "width_depth"):
            raise ValueError(f"axis must be 'dh_ratio' or 'width_depth', got {self.axis!r}")
        if self.budget <= 0:
            raise ValueError(f"budget must be positive, got {self.budget}")
        # Empty grids are allowed and emit zero rows (header-only CSV).
        if self.axis == "dh_ratio" and (self.d_model <= 0 or self.n_layers <= 0):
            raise ValueError("dh_ratio sweeps need d_model and n_layers")
        if self.axis == "width_depth" and self.dh_ratio <= 0:
            raise ValueError("width_depth sweeps need a positive dh_ratio")


@dataclass(frozen=True)
class SweepRow:
    config: ModelConfig
    breakdown: ParamBreakdown
    axis_value: float
    within_tolerance: bool


def _resolve_dh(entry: float, d_model: int) -> int:
    # Integral entries are explicit widths; fractions are ratios of d_model.
    if float(entry) == int(entry) and entry >= 1:
        return int(entry)
    return max(1, math.floor(entry * d_model))


def _round_d_model(ideal: float, n_heads: int) -> int:
    """Nearest multiple of n_heads with an even head dimension."""
    step = n_heads
    d = max(step, round(ideal / step) * step)
    if (d // n_heads) % 2 == 0:
        return d
    lower, upper = d - step, d + step
    if lower >= step and abs(lower - ideal) <= abs(upper - ideal):
        return lower
    return upper


def _sweep_config(spec: SweepSpec, d_model: int, d_h: int, n_layers: int, k: int) -> ModelConfig:
    return ModelConfig(
        d_model=d_model,
        d_h=d_h,
        n_layers=n_layers,
        n_heads=spec.n_heads,
        ffn_kind="hourglass",
        ffn_blocks=k,
        vocab_size=spec.vocab_size,
        max_seq=spec.max_seq,
    )


def enumerate_sweep(spec: SweepSpec) -> list[SweepRow]:
    """Emit one row per grid point, sorted by the sweep axis then k.

    Rows that miss the budget tolerance are flagged, never dropped.
    """
    rows = []
    if spec.axis == "dh_ratio":
        for k in spec.k_values:
            for entry in spec.dh_grid:
                dh = _resolve_dh(entry, spec.d_model)
                cfg = _sweep_config(spec, spec.d_model, dh, spec.n_layers, k)
                bd = total_params(cfg)
                rows.append(
                    SweepRow(
                        config=cfg,
                        breakdown=bd,
                        axis_value=dh / spec.d_model,
                        within_tolerance=budgets_match(
                            bd.total_nonembedding, spec.budget, spec.tolerance
                        ),
                    )
                )
    else:
        for k in spec.k_values:
            for n_layers in spec.layer_grid:
                per_layer = spec.budget / n_layers
                ideal = math.sqrt(per_layer / (4.0 + 3.0 * k * spec.dh_ratio))
                d_model = _round_d_model(ideal, spec.n_heads)
                try:
                    dh = solve_dh(spec.budget, d_model, n_layers, k)
                except InfeasibleBudgetError:
                    dh = 1
                cfg = _sweep_config(spec, d_model, dh, n_layers, k)
                bd = total_params(cfg)
                rows.append(
                    SweepRow(
                        config=cfg,
                        breakdown=bd,
                        axis_value=d_model / n_layers,
                        within_tolerance=budgets_match(
                            bd.total_nonembedding, spec.budget, spec.tolerance
                        ),
                    )
                )
    rows.sort(key=lambda r: (r.axis_value, r.config.ffn_blocks, r.config.n_layers))
    return rows


SWEEP_CSV_HEADER = "d_model,d_h,L,K,attention_params,ffn_params,total,flops_per_token_train,within_tolerance"


def sweep_csv_lines(rows: list[SweepRow]) -> list[str]:
    lines = [SWEEP_CSV_HEADER]
    for r in rows:
        cfg, bd = r.config, r.breakdown
        lines.append(
            f"{cfg.d_model},{cfg.d_h},{cfg.n_layers},{cfg.ffn_blocks},"
            f"{bd.attention_params},{bd.ffn_params},{bd.total_nonembedding},"
            f"{int(flops_per_token(cfg, 'train'))},{1 if r.within_tolerance else 0}"
        )
    return lines


def write_sweep_csv(rows: list[SweepRow], fh) -> None:
    for line in sweep_csv_lines(rows):
        fh.write(line + "\n")
