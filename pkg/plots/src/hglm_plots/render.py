"""Turn the training/planner CSV artifacts into figures.

Four plot kinds, keyed to the CSV schemas this repository emits:

  frontier        y vs flops_per_token_train, log-x (performance frontier)
  dh_ratio        y vs d_h/d_model (bottleneck-width ablation)
  width_depth     y vs d_model/L (width-depth trade-off)
  training_curve  loss columns vs step (metrics or paired-comparison CSV)

Rendering is a pure function of the CSV bytes: rows are plotted in file
order, never re-sorted or dropped. Rows with a truthy `baseline` column
become horizontal dashed reference lines instead of series points.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

KINDS = ("frontier", "dh_ratio", "width_depth", "training_curve")
TRUTHY = {"1", "true", "yes"}


class PlotError(ValueError):
    """The CSV cannot back the requested plot; the message names the column."""


@dataclass(frozen=True)
class PlotSpec:
    input_csv: str
    kind: str
    out_path: str
    y_column: str | None = None  # default picked per kind / header
    group_by: str | None = None  # series column; default: K (+ ffn_kind if present)
    baseline_column: str = "baseline"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PlotError(f"kind must be one of {KINDS}, got {self.kind!r}")


@dataclass
class Series:
    label: str
    x: list = field(default_factory=list)
    y: list = field(default_factory=list)


@dataclass
class PlotData:
    series: list[Series]
    baselines: list[float]
    x_label: str
    y_label: str
    log_x: bool


def read_rows(path: str) -> tuple[list[str], list[dict[str, str]]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise PlotError(f"{path} has no header row")
        return list(reader.fieldnames), list(reader)


def _need(row: dict[str, str], column: str) -> float:
    if column not in row or row[column] is None:
        raise PlotError(f"missing column {column!r}")
    raw = row[column].strip()
    if raw == "":
        raise PlotError(f"empty value in column {column!r}")
    try:
        return float(raw)
    except ValueError:
        raise PlotError(f"column {column!r} holds non-numeric value {raw!r}") from None


def _pick_y(header: list[str], requested: str | None) -> str:
    if requested:
        if requested not in header:
            raise PlotError(f"missing column {requested!r}")
        return requested
    for candidate in ("val_loss", "train_loss", "total"):
        if candidate in header:
            return candidate
    raise PlotError("missing column 'val_loss' (no y column found; pass --y-column)")


def _series_key(row: dict[str, str], header: list[str], group_by: str | None) -> str:
    if group_by:
        if group_by not in header:
            raise PlotError(f"missing column {group_by!r}")
        return f"{group_by}={row[group_by]}"
    parts = []
    if "ffn_kind" in header:
        parts.append(row["ffn_kind"])
    if "K" in header:
        parts.append(f"K={row['K']}")
    return ", ".join(parts) if parts else "all rows"


def _is_baseline(row: dict[str, str], column: str) -> bool:
    return (row.get(column) or "").strip().lower() in TRUTHY


def extract_series(spec: PlotSpec) -> PlotData:
    """Pure data extraction: identical CSV bytes yield identical points."""
    header, rows = read_rows(spec.input_csv)
    if not rows:
        raise PlotError("missing column data (the CSV has a header but no rows)")

    if spec.kind == "training_curve":
        return _extract_training_curve(header, rows, spec)

    y_col = _pick_y(header, spec.y_column)
    if spec.kind == "frontier":
        x_label, log_x = "flops_per_token_train", True

        def x_of(row):
            return _need(row, "flops_per_token_train")

    elif spec.kind == "dh_ratio":
        x_label, log_x = "d_h / d_model", False

        def x_of(row):
            return _need(row, "d_h") / _need(row, "d_model")

    else:  # width_depth
        x_label, log_x = "d_model / L", False

        def x_of(row):
            return _need(row, "d_model") / _need(row, "L")

    ordered: dict[str, Series] = {}
    baselines = []
    for row in rows:
        if _is_baseline(row, spec.baseline_column):
            baselines.append(_need(row, y_col))
            continue
        key = _series_key(row, header, spec.group_by)
        series = ordered.setdefault(key, Series(label=key))
        series.x.append(x_of(row))
        series.y.append(_need(row, y_col))
    if not ordered:
        raise PlotError(f"empty series for column {y_col!r} (all rows are baselines?)")
    return PlotData(
        series=list(ordered.values()),
        baselines=baselines,
        x_label=x_label,
        y_label=y_col,
        log_x=log_x,
    )


def _extract_training_curve(header, rows, spec: PlotSpec) -> PlotData:
    if "step" not in header:
        raise PlotError("missing column 'step'")
    if spec.y_column:
        y_cols = [spec.y_column]
        if spec.y_column not in header:
            raise PlotError(f"missing column {spec.y_column!r}")
    else:
        y_cols = [c for c in header if c.startswith(("train_loss", "val_loss"))]
        if not y_cols:
            raise PlotError("missing column 'train_loss' (no loss columns in header)")
    series = []
    for col in y_cols:
        s = Series(label=col)
        for row in rows:
            raw = (row.get(col) or "").strip()
            if raw == "":
                continue  # metrics rows legitimately leave val fields empty
            s.x.append(_need(row, "step"))
            s.y.append(float(raw))
        if s.x:
            series.append(s)
    if not series:
        raise PlotError(f"empty series for column(s) {', '.join(y_cols)}")
    return PlotData(series=series, baselines=[], x_label="step",
                    y_label="loss", log_x=False)


def render(spec: PlotSpec) -> str:
    """Draw the spec to its output path; returns the path written."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    data = extract_series(spec)
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    markers = ["o", "s", "^", "D", "v", "P", "*", "X"]
    for i, series in enumerate(data.series):
        ax.plot(
            series.x,
            series.y,
            marker=markers[i % len(markers)],
            linestyle="-" if len(series.x) > 1 else "none",
            label=series.label,
        )
    for value in data.baselines:
        ax.axhline(value, linestyle="--", color="gray", label="baseline")
    if data.log_x:
        ax.set_xscale("log")
    ax.set_xlabel(data.x_label)
    ax.set_ylabel(data.y_label)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(spec.out_path)
    plt.close(fig)
    return spec.out_path
