"""Command-line entry point.

Subcommands: measure (run measures, write reports), converge (grid study of
result sensitivity to dataset/transformation sizes), stability (compare
per-layer score distributions across report files), selfcheck (built-in
oracle suites), dump-transformed (PNG contact sheet of transformed inputs).

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import measures as M
from . import report as R
from .data import Dataset, load_cifar10_binary, load_mnist_idx, synthetic_dataset
from .engine import BuiltinModelProvider, DumpProvider, RunConfig, run_measure
from .errors import TMError
from .model import read_weights
from .selfcheck import SUITES, run_suites
from .transforms import parse_transform_spec

DEFAULT_SAMPLES = 385

MNIST_TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
MNIST_TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")


def _add_provider_flags(p: argparse.ArgumentParser, dump_allowed: bool = True) -> None:
    p.add_argument("--model", help="NNW weight file for the built-in engine")
    p.add_argument("--dataset", choices=["mnist", "cifar10", "synthetic"],
                   help="dataset fed through the model")
    p.add_argument("--data-dir", default=None,
                   help="dataset directory (fallback: TM_DATA_DIR environment variable)")
    if dump_allowed:
        p.add_argument("--dump", help="STDUMP activation dump to measure instead of a model")
    p.add_argument("--transforms", default="rotation:25",
                   help="rotation:<m> | scale:<count> | translation:<f,..> | file:<path>")
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES,
                   help=f"samples measured from the dataset (default {DEFAULT_SAMPLES})")
    p.add_argument("--batch", type=int, default=64, help="records per provider batch")
    p.add_argument("--seed", type=int, default=0, help="seed for all randomized behavior")
    p.add_argument("--jobs", type=int, default=1, help="worker count")
    p.add_argument("--deterministic", action="store_true",
                   help="single worker, fixed iteration order")
    p.add_argument("--memory-budget-bytes", type=int, default=None)


def _add_measure_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--measure", default="nv",
                   help="comma-separated measure ids: " + ",".join(M.MEASURE_IDS))
    p.add_argument("--use-std", action="store_true",
                   help="normalize standard deviations instead of variances")
    p.add_argument("--dead-epsilon", type=float, default=0.0)
    p.add_argument("--nv-aggregation", choices=["before", "after"], default="before")
    p.add_argument("--anova-alpha", type=float, default=0.01)
    p.add_argument("--no-bonferroni", action="store_true")
    p.add_argument("--gf-alpha", type=float, default=0.01)
    p.add_argument("--gf-tail", choices=["upper", "lower"], default="upper")
    p.add_argument("--invp", type=float, default=1.0,
                   help="top proportion for the deepest-layer firing-rate aggregate")
    p.add_argument("--distance", choices=["squared-euclidean", "absolute"],
                   default="squared-euclidean")
    p.add_argument("--distance-passes", type=int, default=1)
    p.add_argument("--variance-denominator", choices=["n-1", "n"], default="n-1")


def _options_from_args(args) -> M.MeasureOptions:
    return M.MeasureOptions(
        use_std_instead_of_variance=args.use_std,
        dead_epsilon=args.dead_epsilon,
        nv_aggregation=args.nv_aggregation,
        anova_alpha=args.anova_alpha,
        bonferroni=not args.no_bonferroni,
        goodfellow_alpha=args.gf_alpha,
        goodfellow_tail=args.gf_tail,
        invp_proportion=args.invp,
        distance=args.distance,
        distance_passes=args.distance_passes,
        shuffle_seed=args.seed,
        variance_ddof=0 if args.variance_denominator == "n" else 1,
    )


def _data_dir(args, parser) -> Path:
    d = args.data_dir or os.environ.get("TM_DATA_DIR")
    if not d:
        parser.error("--data-dir (or TM_DATA_DIR) is required for file datasets")
    return Path(d)


def _load_dataset(args, parser, input_shape) -> Dataset:
    if args.dataset == "synthetic":
        h, w, c = input_shape
        return synthetic_dataset(args.samples, h, w, c, seed=args.seed)
    d = _data_dir(args, parser)
    if args.dataset == "mnist":
        images, labels = (d / f for f in MNIST_TEST_FILES)
        if not images.exists():
            images, labels = (d / f for f in MNIST_TRAIN_FILES)
        return load_mnist_idx(images, labels if labels.exists() else None)
    nested = d / "cifar-10-batches-bin"
    return load_cifar10_binary(nested if nested.is_dir() else d)


def _build_provider(args, parser):
    has_model = bool(getattr(args, "model", None))
    has_dump = bool(getattr(args, "dump", None))
    if has_model == has_dump:
        parser.error("exactly one source required: --model with --dataset, or --dump")
    if has_dump:
        return DumpProvider(args.dump)
    if not args.dataset:
        parser.error("--model requires --dataset")
    spec, weights = read_weights(args.model)
    dataset = _load_dataset(args, parser, spec.input_shape).take(args.samples)
    tset = parse_transform_spec(args.transforms)
    return BuiltinModelProvider(spec, weights, dataset, tset,
                                model_id=Path(args.model).stem)


def _parse_measures(args, parser) -> list[str]:
    ids = [m.strip() for m in args.measure.split(",") if m.strip()]
    bad = [m for m in ids if m not in M.MEASURE_IDS]
    if bad or not ids:
        parser.error(f"unknown measures {bad}; available: {','.join(M.MEASURE_IDS)}")
    return ids


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_measure(args, parser) -> int:
    provider = _build_provider(args, parser)
    measure_ids = _parse_measures(args, parser)
    opts = _options_from_args(args)
    config = RunConfig(
        provider=provider,
        batch_size=args.batch,
        jobs=args.jobs,
        deterministic=args.deterministic,
        memory_budget_bytes=args.memory_budget_bytes,
        seed=args.seed,
    )
    rep = run_measure(config, measure_ids, opts)

    Path(args.output).write_text(R.serialize_report(rep, "json"), encoding="utf-8")
    if args.csv:
        Path(args.csv).write_text(R.serialize_report(rep, "csv"), encoding="utf-8")
    if args.heatmap:
        R.render_heatmap(rep, args.heatmap, measure_ids[0])
    if args.layer_plot:
        R.render_layer_plot(rep, args.layer_plot, measure_ids[0])

    shape = rep.st_shape
    print(f"st_shape: n={shape.n} m={shape.m} k={shape.k}")
    for mid in measure_ids:
        print(f"[{mid}] per-layer means:")
        for s in R.layer_aggregate(rep, mid):
            mean = "invalid" if s.mean is None else f"{s.mean:.6g}"
            extra = ""
            if s.infinity_count or s.invalid_count:
                extra = f"  (inf={s.infinity_count} invalid={s.invalid_count})"
            print(f"  {s.layer_index:3d} {s.layer_name:<12} {mean}{extra}")
    return 0


def cmd_converge(args, parser) -> int:
    if getattr(args, "dump", None):
        parser.error("converge needs --model/--dataset (transform sets are re-built per cell)")
    sample_grid = [int(v) for v in args.sample_grid.split(",") if v]
    transform_grid = [int(v) for v in args.transform_grid.split(",") if v]
    if len(sample_grid) * len(transform_grid) < 2:
        parser.error("need >= 2 cells in the size grid")
    if sorted(sample_grid) != sample_grid or sorted(transform_grid) != transform_grid:
        parser.error("size grids must be sorted ascending")

    spec, weights = read_weights(args.model)
    full = _load_dataset(args, parser, spec.input_shape).take(max(args.samples, sample_grid[-1]))
    opts = _options_from_args(args)
    measure_id = _parse_measures(args, parser)[0]

    from .transforms import rotation_set

    def run_cell(n: int, m: int) -> R.MeasureReport:
        provider = BuiltinModelProvider(spec, weights, full.take(n), rotation_set(m),
                                        model_id=Path(args.model).stem)
        config = RunConfig(provider=provider, batch_size=args.batch, jobs=args.jobs,
                           deterministic=args.deterministic, seed=args.seed)
        return run_measure(config, [measure_id], opts)

    grid = R.convergence_study(run_cell, sample_grid, transform_grid, measure_id)
    Path(args.output_csv).write_text(grid.to_csv(), encoding="utf-8")
    if args.output_svg:
        R.render_grid_heatmap(grid, args.output_svg)
    ref = grid.reference_cell()
    print(f"reference cell: n={ref[0]} m={ref[1]} (relative error 0)")
    print(grid.to_csv(), end="")
    sp, tp = grid.axis_profiles()
    print("pooled median error by sample size:     "
          + " ".join(f"{v:.4f}" for v in sp))
    print("pooled median error by transform count: "
          + " ".join(f"{v:.4f}" for v in tp))
    monotone = grid.profiles_monotone(tol=1e-12)
    print(f"median relative error non-increasing along both axes: {'yes' if monotone else 'no'}")
    return 0


def cmd_stability(args, parser) -> int:
    if len(args.reports) < 2:
        parser.error("need at least 2 report files")
    reports = [R.parse_report(Path(p).read_text(encoding="utf-8")) for p in args.reports]
    ref = reports[0]
    structure = [(e.name, e.layer_index, e.unit_count) for e in ref.manifest.entries]
    for path, rep in zip(args.reports[1:], reports[1:]):
        other = [(e.name, e.layer_index, e.unit_count) for e in rep.manifest.entries]
        if other != structure:
            parser.error(f"layer structure of {path} does not match {args.reports[0]}")
    measure_id = args.measure
    if any(measure_id not in rep.measures for rep in reports):
        parser.error(f"measure {measure_id!r} missing from some reports")

    slices = R._unit_slices(ref.manifest)
    rows = []
    for entry, sl in zip(ref.manifest.entries, slices):
        groups = []
        for rep in reports:
            vals = [v.value for v in rep.measures[measure_id][sl]
                    if v.value is not None and np.isfinite(v.value)]
            groups.append(np.array(vals))
        if any(len(g) < 2 for g in groups):
            rows.append({"layer_index": entry.layer_index, "layer_name": entry.name,
                         "statistic": None, "p_value": None, "reject": None,
                         "note": "fewer than 2 finite values in some report"})
            continue
        res = R.anderson_darling_k_sample(groups, alpha=args.alpha,
                                          n_permutations=args.permutations, seed=args.seed)
        rows.append({"layer_index": entry.layer_index, "layer_name": entry.name,
                     "statistic": res.statistic, "p_value": res.p_value,
                     "reject": res.reject, "note": ""})

    print(f"{'layer':<14}{'statistic':>12}{'p':>10}  reject")
    for row in rows:
        if row["statistic"] is None:
            print(f"{row['layer_name']:<14}{'-':>12}{'-':>10}  skipped ({row['note']})")
        else:
            print(f"{row['layer_name']:<14}{row['statistic']:>12.4f}{row['p_value']:>10.4f}"
                  f"  {row['reject']}")
    if args.output:
        import json

        payload = {"schema": "tm-stability/1", "measure": measure_id,
                   "alpha": args.alpha, "layers": rows}
        Path(args.output).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                                     encoding="utf-8")
    return 0


def cmd_selfcheck(args, parser) -> int:
    names = [args.suite] if args.suite else None
    results = run_suites(names)
    failed = [name for name, ok, _ in results if not ok]
    for name, ok, detail in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    if failed:
        print(f"failing properties: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_dump_transformed(args, parser) -> int:
    from PIL import Image

    tset = parse_transform_spec(args.transforms)
    h, w, c = (int(v) for v in args.size.split("x"))
    if args.dataset == "synthetic" or not args.dataset:
        dataset = synthetic_dataset(max(args.rows, 1), h, w, c, seed=args.seed)
    else:
        dataset = _load_dataset(args, parser, (h, w, c))
    dataset = dataset.take(args.rows)

    from .transforms import apply

    pad = 2
    grid_w = len(tset) * (w + pad) + pad
    grid_h = len(dataset) * (h + pad) + pad
    canvas = np.full((grid_h, grid_w, 3), 32, dtype=np.uint8)
    for r in range(len(dataset)):
        img = dataset.images[r].astype(np.float64) / 255.0
        for t_idx, t in enumerate(tset):
            out = np.clip(apply(t, img) * 255.0, 0, 255).astype(np.uint8)
            if out.shape[2] == 1:
                out = np.repeat(out, 3, axis=2)
            y = pad + r * (h + pad)
            x = pad + t_idx * (w + pad)
            canvas[y : y + h, x : x + w] = out[:, :, :3]
    Image.fromarray(canvas).save(args.output)
    print(f"wrote {len(dataset)} x {len(tset)} grid to {args.output}")
    return 0


# ---------------------------------------------------------------------------
# Parser wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tm", description="Invariance measures for neural network activations."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("measure", help="run measures and write reports")
    _add_provider_flags(p)
    _add_measure_flags(p)
    p.add_argument("--output", required=True, help="report JSON path (always written)")
    p.add_argument("--csv", default=None, help="also write a CSV report")
    p.add_argument("--heatmap", default=None, help="also write an SVG heatmap")
    p.add_argument("--layer-plot", default=None, help="also write an SVG per-layer plot")
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("converge", help="relative-error grid over dataset/transform sizes")
    _add_provider_flags(p, dump_allowed=False)
    _add_measure_flags(p)
    p.add_argument("--sample-grid", required=True, help="e.g. 24,96,384")
    p.add_argument("--transform-grid", required=True, help="e.g. 4,8,16,24")
    p.add_argument("--output-csv", required=True)
    p.add_argument("--output-svg", default=None)
    p.set_defaults(func=cmd_converge)

    p = sub.add_parser("stability", help="per-layer distribution comparison of reports")
    p.add_argument("reports", nargs="+", help="two or more report JSON files")
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--measure", default="nv")
    p.add_argument("--permutations", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", default=None, help="write per-layer results as JSON")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("selfcheck", help="run the built-in oracle suites")
    p.add_argument("--suite", choices=sorted(SUITES), default=None)
    p.set_defaults(func=cmd_selfcheck)

    p = sub.add_parser("dump-transformed", help="PNG contact sheet of transformed images")
    p.add_argument("--dataset", choices=["mnist", "cifar10", "synthetic"], default="synthetic")
    p.add_argument("--data-dir", default=None)
    p.add_argument("--transforms", default="rotation:25")
    p.add_argument("--size", default="28x28x1", help="HxWxC for synthetic images")
    p.add_argument("--rows", type=int, default=5, help="number of sample rows")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=5, help=argparse.SUPPRESS)
    p.add_argument("--output", required=True, help="output PNG path")
    p.set_defaults(func=cmd_dump_transformed)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except TMError as e:
        print(f"error [{e.code}]: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
