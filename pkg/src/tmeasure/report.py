"""Report assembly, per-layer aggregation, serialization (JSON/CSV), SVG
rendering, and the cross-run analyses (convergence grids, distribution
stability tests)."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import measures as M
from .core import FEATURE_MAP, ActivationManifest, STShape
from .errors import EmptyReportError, WriteError

REPORT_SCHEMA = "tm-report/1"

HEATMAP_CLIP_PERCENTILES = (1.0, 99.0)
OUTLIER_COLOR = "#1faa59"
INVALID_COLOR = "#bbbbbb"
# sequential purple-to-yellow ramp; green stays reserved for outliers
COLOR_ANCHORS = ["#0d0887", "#7e03a8", "#cc4778", "#f89540", "#f0f921"]


# ---------------------------------------------------------------------------
# Report model
# ---------------------------------------------------------------------------

@dataclass
class LayerSummary:
    layer_index: int
    layer_name: str
    mean: float | None
    valid_count: int
    infinity_count: int
    invalid_count: int


@dataclass
class MeasureReport:
    manifest: ActivationManifest
    st_shape: STShape
    measures: dict[str, list[M.MeasureValue]]
    options: dict
    provenance: dict
    details: dict = field(default_factory=dict)

    def values(self, measure_id: str) -> list[M.MeasureValue]:
        return self.measures[measure_id]

    def finite_values(self, measure_id: str) -> np.ndarray:
        vals = [v.value for v in self.measures[measure_id]
                if v.value is not None and math.isfinite(v.value)]
        return np.array(vals, dtype=np.float64)


def unit_reduce(manifest: ActivationManifest, cell_values: np.ndarray,
                reducer: Callable = np.mean) -> np.ndarray:
    """Collapse per-cell values to reported activations: feature-map entries
    aggregate over their spatial grid per channel, flat entries pass through."""
    cell_values = np.asarray(cell_values, dtype=np.float64)
    out = []
    for entry, sl in zip(manifest.entries, manifest.cell_slices()):
        vals = cell_values[sl]
        if entry.kind == FEATURE_MAP:
            h, w, c = entry.shape
            out.append(reducer(vals.reshape(h * w, c), axis=0))
        else:
            out.append(vals)
    return np.concatenate(out)


def _to_measure_values(names, values, components=None) -> list[M.MeasureValue]:
    out = []
    for idx, name in enumerate(names):
        v = float(values[idx])
        comp = None
        if components is not None:
            comp = (float(components[0][idx]), float(components[1][idx]))
        out.append(M.MeasureValue(name, None if math.isnan(v) else v, comp))
    return out


def assemble_report(
    manifest: ActivationManifest,
    st_shape: STShape,
    measure_ids: Sequence[str],
    cells: dict[str, np.ndarray],
    invalid_cells: np.ndarray,
    opts: M.MeasureOptions,
    provenance: dict,
    details: dict,
) -> MeasureReport:
    """Turn per-cell arrays into per-activation measure values."""
    names = manifest.unit_names()
    masked: dict[str, np.ndarray] = {}
    for mid, arr in cells.items():
        arr = np.asarray(arr, dtype=np.float64).copy()
        arr[invalid_cells] = np.nan
        masked[mid] = arr

    def ratio_units(num_id: str, den_id: str) -> list[M.MeasureValue]:
        num_cells, den_cells = masked[num_id], masked[den_id]
        if opts.use_std_instead_of_variance and num_id == "tv":
            num_cells, den_cells = np.sqrt(num_cells), np.sqrt(den_cells)
        if opts.nv_aggregation == M.AGGREGATE_BEFORE:
            num_u = unit_reduce(manifest, num_cells)
            den_u = unit_reduce(manifest, den_cells)
            vals = M.ratio_with_conventions(num_u, den_u, opts.dead_epsilon)
            return _to_measure_values(names, vals, components=(num_u, den_u))
        per_cell = M.ratio_with_conventions(num_cells, den_cells, opts.dead_epsilon)
        return _to_measure_values(names, unit_reduce(manifest, per_cell))

    measures: dict[str, list[M.MeasureValue]] = {}
    for mid in measure_ids:
        if mid == "nv":
            measures[mid] = ratio_units("tv", "sv")
        elif mid == "nd":
            measures[mid] = ratio_units("td", "sd")
        elif mid == "goodfellow":
            # dead cells are structurally invalid; channels average the rest
            with np.errstate(invalid="ignore"):
                units = unit_reduce(manifest, masked[mid],
                                    reducer=lambda a, axis: np.nanmean(a, axis=axis))
            measures[mid] = _to_measure_values(names, units)
        else:
            measures[mid] = _to_measure_values(names, unit_reduce(manifest, masked[mid]))

    details = dict(details)
    if "goodfellow" in measures:
        deepest = max(e.layer_index for e in manifest.entries)
        gf_vals = [
            v.value
            for e, sl in zip(manifest.entries, _unit_slices(manifest))
            if e.layer_index == deepest
            for v in measures["goodfellow"][sl]
            if v.value is not None and math.isfinite(v.value)
        ]
        info = details.setdefault("goodfellow", {})
        info["invp_proportion"] = opts.invp_proportion
        info["invp"] = M.invp_aggregate(gf_vals, opts.invp_proportion) if gf_vals else None

    return MeasureReport(
        manifest=manifest,
        st_shape=st_shape,
        measures=measures,
        options=asdict(opts),
        provenance=provenance,
        details=details,
    )


def _unit_slices(manifest: ActivationManifest) -> list[slice]:
    out, start = [], 0
    for e in manifest.entries:
        out.append(slice(start, start + e.unit_count))
        start += e.unit_count
    return out


# ---------------------------------------------------------------------------
# Layer aggregation
# ---------------------------------------------------------------------------

def layer_aggregate(report: MeasureReport, measure_id: str | None = None) -> list[LayerSummary]:
    """Ordered per-layer means; +inf and invalid values are excluded from
    the mean and reported as counts."""
    if not report.measures:
        raise EmptyReportError("report holds no measures")
    if measure_id is None:
        measure_id = next(iter(report.measures))
    values = report.measures[measure_id]
    summaries = []
    for entry, sl in zip(report.manifest.entries, _unit_slices(report.manifest)):
        finite, infinities, invalid = [], 0, 0
        for v in values[sl]:
            if v.is_invalid:
                invalid += 1
            elif v.is_infinite:
                infinities += 1
            else:
                finite.append(v.value)
        summaries.append(
            LayerSummary(
                layer_index=entry.layer_index,
                layer_name=entry.name,
                mean=float(np.mean(finite)) if finite else None,
                valid_count=len(finite),
                infinity_count=infinities,
                invalid_count=invalid,
            )
        )
    return summaries


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _encode_value(v: float | None):
    if v is None:
        return None
    if math.isinf(v):
        return "inf"
    return v


def _decode_value(v):
    if v is None:
        return None
    if v == "inf":
        return math.inf
    return float(v)


def serialize_report(report: MeasureReport, format: str = "json") -> str:
    if not report.measures:
        raise EmptyReportError("cannot serialize a report with no measures")
    if format == "json":
        obj = {
            "schema": REPORT_SCHEMA,
            "st_shape": {"n": report.st_shape.n, "m": report.st_shape.m, "k": report.st_shape.k},
            "manifest": report.manifest.to_json_entries(),
            "options": report.options,
            "provenance": report.provenance,
            "details": report.details,
            "measures": {
                mid: [
                    {
                        "activation": v.activation_name,
                        "value": _encode_value(v.value),
                        "components": (
                            [_encode_value(c) for c in v.components] if v.components else None
                        ),
                    }
                    for v in vals
                ]
                for mid, vals in report.measures.items()
            },
            "layer_means": {
                mid: [
                    {
                        "layer_index": s.layer_index,
                        "layer_name": s.layer_name,
                        "mean": _encode_value(s.mean),
                        "valid_count": s.valid_count,
                        "infinity_count": s.infinity_count,
                        "invalid_count": s.invalid_count,
                    }
                    for s in layer_aggregate(report, mid)
                ]
                for mid in report.measures
            },
        }
        return json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer_index", "layer_name", "activation_name", "measure", "value"])
        for mid, vals in report.measures.items():
            for entry, sl in zip(report.manifest.entries, _unit_slices(report.manifest)):
                for v in vals[sl]:
                    if v.value is None:
                        cell = ""
                    elif math.isinf(v.value):
                        cell = "inf"
                    else:
                        cell = repr(v.value)
                    writer.writerow([entry.layer_index, entry.name, v.activation_name, mid, cell])
        return buf.getvalue()
    raise ValueError(f"unknown format {format!r}")


def parse_report(text: str) -> MeasureReport:
    obj = json.loads(text)
    if obj.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"unsupported report schema {obj.get('schema')!r}")
    manifest = ActivationManifest.from_json_entries(obj["manifest"])
    shape = STShape(**obj["st_shape"])
    measures = {
        mid: [
            M.MeasureValue(
                d["activation"],
                _decode_value(d["value"]),
                tuple(_decode_value(c) for c in d["components"]) if d.get("components") else None,
            )
            for d in vals
        ]
        for mid, vals in obj["measures"].items()
    }
    return MeasureReport(
        manifest=manifest,
        st_shape=shape,
        measures=measures,
        options=obj.get("options", {}),
        provenance=obj.get("provenance", {}),
        details=obj.get("details", {}),
    )


# ---------------------------------------------------------------------------
# SVG rendering
# ---------------------------------------------------------------------------

def _lerp_color(anchors: list[str], t: float) -> str:
    t = min(max(t, 0.0), 1.0)
    pos = t * (len(anchors) - 1)
    lo = int(pos)
    hi = min(lo + 1, len(anchors) - 1)
    frac = pos - lo
    c0 = [int(anchors[lo][i : i + 2], 16) for i in (1, 3, 5)]
    c1 = [int(anchors[hi][i : i + 2], 16) for i in (1, 3, 5)]
    rgb = [round(a + (b - a) * frac) for a, b in zip(c0, c1)]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def render_heatmap(report: MeasureReport, out_path, measure_id: str | None = None) -> None:
    """One column per layer, one cell per activation (rows carry no meaning);
    the color scale clips at the 1st/99th percentile and cells beyond the
    clip are drawn in a distinct outlier color."""
    if not report.measures:
        raise EmptyReportError("cannot render an empty report")
    if measure_id is None:
        measure_id = next(iter(report.measures))
    values = report.measures[measure_id]
    finite = report.finite_values(measure_id)
    if finite.size:
        lo, hi = np.percentile(finite, HEATMAP_CLIP_PERCENTILES)
    else:
        lo = hi = 0.0

    cell_w, cell_h, gap, margin, label_h = 14, 5, 8, 10, 30
    slices = _unit_slices(report.manifest)
    n_layers = len(report.manifest.entries)
    max_units = max(e.unit_count for e in report.manifest.entries)
    width = margin * 2 + n_layers * cell_w + (n_layers - 1) * gap
    height = margin * 2 + label_h + max_units * cell_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{width}" height="{height}">',
        f'<title>{measure_id} heatmap</title>',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for li, (entry, sl) in enumerate(zip(report.manifest.entries, slices)):
        x = margin + li * (cell_w + gap)
        parts.append(f'<g class="layer" data-layer="{entry.name}">')
        parts.append(
            f'<text x="{x}" y="{margin + 10}" font-size="7" '
            f'transform="rotate(45 {x} {margin + 10})">{entry.name}</text>'
        )
        for row, v in enumerate(values[sl]):
            y = margin + label_h + row * cell_h
            if v.is_invalid:
                fill, cls = INVALID_COLOR, "cell invalid"
            elif v.is_infinite or v.value < lo or v.value > hi:
                fill, cls = OUTLIER_COLOR, "cell outlier"
            else:
                t = 0.5 if hi == lo else (v.value - lo) / (hi - lo)
                fill, cls = _lerp_color(COLOR_ANCHORS, t), "cell"
            label = "invalid" if v.is_invalid else f"{v.value:g}"
            parts.append(
                f'<rect class="{cls}" x="{x}" y="{y}" width="{cell_w}" height="{cell_h}" '
                f'fill="{fill}"><title>{v.activation_name}: {label}</title></rect>'
            )
        parts.append("</g>")
    parts.append("</svg>")
    _write_text(out_path, "\n".join(parts) + "\n")


def render_layer_plot(report: MeasureReport, out_path, measure_id: str | None = None) -> None:
    """Line plot of per-layer means in layer order."""
    if measure_id is None:
        measure_id = next(iter(report.measures))
    summaries = layer_aggregate(report, measure_id)
    points = [(i, s.mean) for i, s in enumerate(summaries) if s.mean is not None]
    width, height, margin = 480, 240, 40
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{width}" height="{height}">',
        f'<title>{measure_id} per-layer means</title>',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if points:
        ys = [p[1] for p in points]
        y_lo, y_hi = min(ys), max(ys)
        span = (y_hi - y_lo) or 1.0
        step = (width - 2 * margin) / max(len(summaries) - 1, 1)

        def sx(i):
            return margin + i * step

        def sy(v):
            return height - margin - (v - y_lo) / span * (height - 2 * margin)

        coords = " ".join(f"{sx(i):.1f},{sy(v):.1f}" for i, v in points)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="#2166ac" stroke-width="2"/>')
        for i, v in points:
            parts.append(f'<circle cx="{sx(i):.1f}" cy="{sy(v):.1f}" r="2.5" fill="#2166ac"/>')
        for i, s in enumerate(summaries):
            parts.append(
                f'<text x="{sx(i):.1f}" y="{height - margin + 12}" font-size="7" '
                f'text-anchor="middle">{s.layer_name}</text>'
            )
        parts.append(
            f'<text x="{margin}" y="{margin - 8}" font-size="9">'
            f"{measure_id} layer means [{y_lo:.3g}, {y_hi:.3g}]</text>"
        )
    parts.append("</svg>")
    _write_text(out_path, "\n".join(parts) + "\n")


def _write_text(path, text: str) -> None:
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    except OSError as e:
        raise WriteError(f"cannot write {path}: {e}") from e


# ---------------------------------------------------------------------------
# Convergence study
# ---------------------------------------------------------------------------

@dataclass
class ConvergenceGrid:
    sample_sizes: list[int]
    transform_sizes: list[int]
    mean_rel_error: np.ndarray  # (len(samples), len(transforms))
    median_rel_error: np.ndarray
    rel_errors: np.ndarray | None = None  # (samples, transforms, activations), NaN = invalid

    def reference_cell(self) -> tuple[int, int]:
        return self.sample_sizes[-1], self.transform_sizes[-1]

    def median_monotone(self, tol: float = 0.0) -> bool:
        """True when the per-cell median never grows while either axis grows."""
        g = self.median_rel_error
        along_samples = np.all(g[1:, :] <= g[:-1, :] + tol)
        along_transforms = np.all(g[:, 1:] <= g[:, :-1] + tol)
        return bool(along_samples and along_transforms)

    def axis_profiles(self) -> tuple[np.ndarray, np.ndarray]:
        """Median error along each axis, pooling per-activation errors over
        the other axis.

        Pooling damps single-cell noise so the profile exposes the axis's
        convergence trend.  The other axis's last position is excluded so
        the reference cell's zero errors never enter and every profile
        position pools an identical cell composition.
        """
        if self.rel_errors is None:
            raise ValueError("grid was built without per-activation errors")
        s_cnt, t_cnt, _ = self.rel_errors.shape
        with np.errstate(all="ignore"):
            sample_profile = np.array(
                [np.nanmedian(self.rel_errors[i, : t_cnt - 1]) for i in range(s_cnt)]
            )
            transform_profile = np.array(
                [np.nanmedian(self.rel_errors[: s_cnt - 1, j]) for j in range(t_cnt)]
            )
        return sample_profile, transform_profile

    def profiles_monotone(self, tol: float = 0.0) -> bool:
        sp, tp = self.axis_profiles()
        return bool(np.all(np.diff(sp) <= tol) and np.all(np.diff(tp) <= tol))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["samples", "transforms", "mean_rel_error", "median_rel_error"])
        for si, n in enumerate(self.sample_sizes):
            for ti, m in enumerate(self.transform_sizes):
                writer.writerow(
                    [n, m, repr(float(self.mean_rel_error[si, ti])),
                     repr(float(self.median_rel_error[si, ti]))]
                )
        return buf.getvalue()


def convergence_study(
    run_cell: Callable[[int, int], MeasureReport],
    sample_sizes: Sequence[int],
    transform_sizes: Sequence[int],
    measure_id: str = "nv",
    eps: float = 1e-12,
) -> ConvergenceGrid:
    """Relative error of each (samples, transforms) cell against the
    largest cell, averaged over activations."""
    sample_sizes = list(sample_sizes)
    transform_sizes = list(transform_sizes)
    if sorted(sample_sizes) != sample_sizes or sorted(transform_sizes) != transform_sizes:
        raise ValueError("size grids must be sorted ascending")
    reports = {}
    for n in sample_sizes:
        for m in transform_sizes:
            reports[(n, m)] = run_cell(n, m)

    ref = reports[(sample_sizes[-1], transform_sizes[-1])]
    ref_vals = np.array(
        [math.nan if v.value is None else v.value for v in ref.measures[measure_id]]
    )
    mean_err = np.zeros((len(sample_sizes), len(transform_sizes)))
    median_err = np.zeros_like(mean_err)
    rel_errors = np.full((len(sample_sizes), len(transform_sizes), ref_vals.size), np.nan)
    for si, n in enumerate(sample_sizes):
        for ti, m in enumerate(transform_sizes):
            vals = np.array(
                [math.nan if v.value is None else v.value
                 for v in reports[(n, m)].measures[measure_id]]
            )
            ok = np.isfinite(vals) & np.isfinite(ref_vals)
            rel = np.abs(vals[ok] - ref_vals[ok]) / np.maximum(np.abs(ref_vals[ok]), eps)
            rel_errors[si, ti, ok] = rel
            mean_err[si, ti] = rel.mean() if rel.size else math.nan
            median_err[si, ti] = np.median(rel) if rel.size else math.nan
    return ConvergenceGrid(sample_sizes, transform_sizes, mean_err, median_err, rel_errors)


def render_grid_heatmap(grid: ConvergenceGrid, out_path) -> None:
    """Cell-per-grid-point SVG of median relative errors."""
    vals = grid.median_rel_error
    lo, hi = float(np.nanmin(vals)), float(np.nanmax(vals))
    cell, margin = 46, 60
    width = margin * 2 + cell * len(grid.transform_sizes)
    height = margin * 2 + cell * len(grid.sample_sizes)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{width}" height="{height}">',
        "<title>relative error grid</title>",
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for si, n in enumerate(grid.sample_sizes):
        for ti, m in enumerate(grid.transform_sizes):
            v = float(vals[si, ti])
            t = 0.5 if hi == lo else (v - lo) / (hi - lo)
            x, y = margin + ti * cell, margin + si * cell
            parts.append(
                f'<rect class="cell" x="{x}" y="{y}" width="{cell - 2}" height="{cell - 2}" '
                f'fill="{_lerp_color(COLOR_ANCHORS, t)}"/>'
            )
            parts.append(
                f'<text x="{x + cell / 2 - 1}" y="{y + cell / 2}" font-size="9" '
                f'text-anchor="middle" fill="white">{v * 100:.1f}%</text>'
            )
    for ti, m in enumerate(grid.transform_sizes):
        parts.append(
            f'<text x="{margin + ti * cell + cell / 2}" y="{margin - 8}" font-size="10" '
            f'text-anchor="middle">m={m}</text>'
        )
    for si, n in enumerate(grid.sample_sizes):
        parts.append(
            f'<text x="{margin - 8}" y="{margin + si * cell + cell / 2}" font-size="10" '
            f'text-anchor="end">n={n}</text>'
        )
    parts.append("</svg>")
    _write_text(out_path, "\n".join(parts) + "\n")


# ---------------------------------------------------------------------------
# k-sample Anderson-Darling test (midrank statistic, permutation p-values)
# ---------------------------------------------------------------------------

@dataclass
class ADResult:
    statistic: float
    p_value: float
    reject: bool
    n_permutations: int


def _ad_statistic_batch(bucket_idx: np.ndarray, group_sizes: list[int],
                        lj: np.ndarray, bj: np.ndarray, n_total: int) -> np.ndarray:
    """Midrank statistic for each row of bucket assignments.

    ``bucket_idx`` is (batch, N) with values in [0, L); columns are split
    into consecutive groups of the given sizes.
    """
    batch, _ = bucket_idx.shape
    length = lj.size
    denom = bj * (n_total - bj) - n_total * lj / 4.0
    weight = lj / n_total
    stat = np.zeros(batch, dtype=np.float64)
    start = 0
    rows = np.arange(batch)[:, None]
    for n_i in group_sizes:
        buckets = bucket_idx[:, start : start + n_i]
        counts = np.zeros((batch, length), dtype=np.float64)
        np.add.at(counts, (np.broadcast_to(rows, buckets.shape), buckets), 1.0)
        m_ij = np.cumsum(counts, axis=1) - counts / 2.0
        inner = weight * (n_total * m_ij - bj * n_i) ** 2 / denom
        stat += inner.sum(axis=1) / n_i
        start += n_i
    return stat * (n_total - 1) / n_total


def anderson_darling_statistic(groups: Sequence[np.ndarray]) -> float:
    """Rank-based k-sample statistic with midrank tie handling."""
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    pooled = np.concatenate(groups)
    distinct, counts = np.unique(pooled, return_counts=True)
    if distinct.size == 1:
        return 0.0
    lj = counts.astype(np.float64)
    bj = np.cumsum(lj) - lj / 2.0
    bucket_idx = np.searchsorted(distinct, pooled)[None, :]
    return float(
        _ad_statistic_batch(bucket_idx, [len(g) for g in groups], lj, bj, pooled.size)[0]
    )


def anderson_darling_k_sample(
    groups: Sequence[np.ndarray],
    alpha: float = 0.01,
    n_permutations: int = 2000,
    seed: int = 0,
) -> ADResult:
    """Test whether the groups share one distribution; the p-value comes
    from seeded permutation resampling of the pooled values."""
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(groups) < 2:
        raise ValueError("need at least 2 groups")
    if any(len(g) < 2 for g in groups):
        raise ValueError("every group needs at least 2 values")
    if n_permutations < 1:
        raise ValueError("n_permutations must be >= 1")
    pooled = np.concatenate(groups)
    distinct, counts = np.unique(pooled, return_counts=True)
    if distinct.size == 1:
        return ADResult(statistic=0.0, p_value=1.0, reject=False, n_permutations=n_permutations)

    sizes = [len(g) for g in groups]
    lj = counts.astype(np.float64)
    bj = np.cumsum(lj) - lj / 2.0
    n_total = pooled.size
    bucket_idx = np.searchsorted(distinct, pooled)
    observed = float(_ad_statistic_batch(bucket_idx[None, :], sizes, lj, bj, n_total)[0])

    rng = np.random.default_rng(seed)
    perms = rng.permuted(np.broadcast_to(bucket_idx, (n_permutations, n_total)).copy(), axis=1)
    perm_stats = _ad_statistic_batch(perms, sizes, lj, bj, n_total)
    # >= with a hair of slack so exchanged-but-equal arrangements count
    exceed = int(np.sum(perm_stats >= observed - 1e-12))
    p = (1 + exceed) / (1 + n_permutations)
    return ADResult(statistic=observed, p_value=p, reject=p < alpha,
                    n_permutations=n_permutations)
