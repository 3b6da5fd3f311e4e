"""Streaming passes over the activation cube.

The engine never materializes the cube: a provider (built-in model or dump
file) yields batches of at most ``batch_size`` records, consumers fold them
into accumulators, and a planner schedules the minimal number of sweeps per
requested measure.  One sweep suffices for TV or SV alone; the normalized
ratios, ANOVA and the firing-rate measure need two.

Parallel runs shard variance accumulation by activation index and distance
accumulation by block; every worker owns private state, merged at sweep end,
so results match the single-threaded path.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import measures as M
from .core import ActivationManifest, ArrayWelford, STShape
from .data import SAMPLE_MAJOR, TRANSFORMATION_MAJOR, Dataset
from .errors import BatchTooSmallError, ProviderError, ShapeError
from .model import (
    DEFAULT_TAP_POLICY,
    ActivationTapPolicy,
    NetworkSpec,
    WeightBundle,
    build_manifest,
    forward_batch,
    open_dump,
)
from .report import MeasureReport, assemble_report
from .transforms import TransformationSet, apply

PROVIDER_BUILTIN = "built-in-model"
PROVIDER_DUMP = "dump"

# sweeps needed per measure id
PASSES_REQUIRED = {
    "tv": 1, "sv": 1, "td": 1, "sd": 1,
    "nv": 2, "nd": 2, "anova": 2, "goodfellow": 2,
}


def estimate_memory(k: int, b: int) -> int:
    """Peak bytes of live float32 activation records: 4 * k * b."""
    if k < 1 or b < 1:
        raise ValueError("k and b must be >= 1")
    return 4 * k * b


class RetentionMeter:
    """Counts activation records simultaneously retained per worker."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def acquire(self, records: int) -> None:
        self.current += records
        self.peak = max(self.peak, self.current)

    def release(self, records: int) -> None:
        self.current -= records


# ---------------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------------

def _pair_batches(shape, order, batch_size, transforms, samples, group_aligned):
    """Batched (i, j) pairs.

    ``transforms``/``samples`` reorder or subset an axis; group-aligned
    batches never span the iteration's outer group, which keeps distance
    blocks inside a single row or column.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    t_idx = list(transforms) if transforms is not None else list(range(shape.m))
    s_idx = list(samples) if samples is not None else list(range(shape.n))
    if order == SAMPLE_MAJOR:
        groups = ([(i, j) for j in t_idx] for i in s_idx)
    elif order == TRANSFORMATION_MAJOR:
        groups = ([(i, j) for i in s_idx] for j in t_idx)
    else:
        raise ValueError(f"unknown order {order!r}")

    batch: list[tuple[int, int]] = []
    for group in groups:
        for pair in group:
            batch.append(pair)
            if len(batch) == batch_size:
                yield batch
                batch = []
        if group_aligned and batch:
            yield batch
            batch = []
    if batch:
        yield batch


class BuiltinModelProvider:
    """Runs the forward engine on transformed dataset images.

    Pixels are normalized to [0, 1] floats at this boundary; transformed
    images are recomputed on the fly each sweep rather than cached.
    """

    kind = PROVIDER_BUILTIN

    def __init__(
        self,
        spec: NetworkSpec,
        weights: WeightBundle,
        dataset: Dataset,
        transformation_set: TransformationSet,
        policy: ActivationTapPolicy = DEFAULT_TAP_POLICY,
        model_id: str = "builtin",
    ):
        weights.validate_against(spec)
        if dataset.image_shape != spec.input_shape:
            raise ShapeError(
                f"dataset images {dataset.image_shape} != model input {spec.input_shape}"
            )
        self.spec = spec
        self.weights = weights
        self.dataset = dataset
        self.transformation_set = transformation_set
        self.policy = policy
        self.model_id = model_id
        self.manifest: ActivationManifest = build_manifest(spec, policy)
        self.st_shape = STShape(
            n=len(dataset), m=len(transformation_set), k=self.manifest.cell_count
        )
        self.identity_index = transformation_set.identity_index
        self._normalized = self.dataset.images.astype(np.float64) / 255.0

    def provenance(self) -> dict:
        return {
            "provider": self.kind,
            "dataset": self.dataset.name,
            "transformations": self.transformation_set.label,
            "model_id": self.model_id,
        }

    def iter_batches(
        self,
        order: str,
        batch_size: int,
        transforms: Sequence[int] | None = None,
        samples: Sequence[int] | None = None,
        group_aligned: bool = False,
    ) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        for pairs in _pair_batches(
            self.st_shape, order, batch_size, transforms, samples, group_aligned
        ):
            imgs = []
            for i, j in pairs:
                try:
                    imgs.append(apply(self.transformation_set[j], self._normalized[i]))
                except Exception as e:
                    raise ProviderError(
                        f"transform failed at sample={i} transformation={j}: {e}"
                    ) from e
            i_arr = np.array([p[0] for p in pairs])
            j_arr = np.array([p[1] for p in pairs])
            try:
                values = forward_batch(self.spec, self.weights, np.stack(imgs), self.policy)
            except Exception as e:
                raise ProviderError(
                    f"forward failed at samples={i_arr.tolist()} "
                    f"transformations={j_arr.tolist()}: {e}"
                ) from e
            yield i_arr, j_arr, values


class DumpProvider:
    """Streams records out of an STDUMP file.

    Iteration in the stored order is a single sequential cursor; any other
    order (transposed sweeps, permuted or subset axes) is served by seeking
    to fixed-size record offsets, so the file is never fully loaded.
    """

    kind = PROVIDER_DUMP

    def __init__(self, path):
        self.path = path
        self.info = open_dump(path)
        self.manifest = self.info.manifest
        self.st_shape = self.info.shape
        self.identity_index = 0

    def provenance(self) -> dict:
        meta = self.info.metadata
        return {
            "provider": self.kind,
            "source": str(self.path),
            "dataset": meta.get("dataset", "unknown"),
            "transformations": meta.get("transformations", "unknown"),
            "model_id": meta.get("model_id", "unknown"),
        }

    def _position(self, i: int, j: int) -> int:
        if self.info.order == SAMPLE_MAJOR:
            return i * self.st_shape.m + j
        return j * self.st_shape.n + i

    def iter_batches(
        self,
        order: str,
        batch_size: int,
        transforms: Sequence[int] | None = None,
        samples: Sequence[int] | None = None,
        group_aligned: bool = False,
    ) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        rec_bytes = self.info.record_bytes
        with open(self.path, "rb") as f:
            cursor = -1
            for pairs in _pair_batches(
                self.st_shape, order, batch_size, transforms, samples, group_aligned
            ):
                rows = []
                for i, j in pairs:
                    pos = self._position(i, j)
                    if pos != cursor:
                        f.seek(self.info.header_bytes + pos * rec_bytes)
                    raw = f.read(rec_bytes)
                    if len(raw) != rec_bytes:
                        raise ProviderError(f"short read at sample={i} transformation={j}")
                    cursor = pos + 1
                    rows.append(np.frombuffer(raw, dtype="<f4"))
                yield (
                    np.array([p[0] for p in pairs]),
                    np.array([p[1] for p in pairs]),
                    np.stack(rows).astype(np.float64),
                )


# ---------------------------------------------------------------------------
# Consumers
# ---------------------------------------------------------------------------

class GroupedVarianceConsumer:
    """Welford over one axis with a rolling per-group accumulator; finalized
    group variances are averaged into the per-cell measure.

    axis="row" groups by sample (transformation variance), axis="col" by
    transformation (sample variance).  Records must arrive grouped.  With
    ``jobs`` > 1 the activation range is sharded across workers holding
    private accumulators, joined on finish.
    """

    def __init__(self, axis: str, k: int, group_size: int, ddof: int,
                 jobs: int = 1, pool: ThreadPoolExecutor | None = None):
        self.axis = axis
        self.group_size = group_size
        self.ddof = ddof
        self.pool = pool if jobs > 1 else None
        self.shards: list[GroupedVarianceConsumer] | None = None
        if self.pool is not None:
            self.edges = np.linspace(0, k, jobs + 1, dtype=int)
            self.shards = [
                GroupedVarianceConsumer(axis, hi - lo, group_size, ddof)
                for lo, hi in zip(self.edges, self.edges[1:])
                if hi > lo
            ]
            return
        self.welford = ArrayWelford(k)
        self.var_sum = np.zeros(k, dtype=np.float64)
        self.groups_done = 0
        self._current: int | None = None

    def observe_batch(self, i_arr, j_arr, values) -> None:
        if self.shards is not None:
            futures = [
                self.pool.submit(shard.observe_batch, i_arr, j_arr, values[:, lo:hi])
                for shard, (lo, hi) in zip(self.shards, zip(self.edges, self.edges[1:]))
            ]
            for f in futures:
                f.result()
            return
        keys = i_arr if self.axis == "row" else j_arr
        for row in range(len(keys)):
            key = int(keys[row])
            if self._current is None:
                self._current = key
            elif key != self._current:
                self._finalize_group()
                self._current = key
            self.welford.update(values[row])

    def _finalize_group(self) -> None:
        if self.welford.count != self.group_size:
            raise ShapeError(
                f"group {self._current} saw {self.welford.count} records, "
                f"expected {self.group_size}"
            )
        self.var_sum += self.welford.variance(self.ddof)
        self.groups_done += 1
        self.welford.reset()

    def finish(self) -> np.ndarray:
        if self.shards is not None:
            return np.concatenate([s.finish() for s in self.shards])
        if self.welford.count:
            self._finalize_group()
        if self.groups_done == 0:
            raise ShapeError("no groups observed")
        return self.var_sum / self.groups_done


class GroupedDistanceConsumer:
    """Blockwise mean pairwise distance along one axis.

    Each delivered batch is one block (group-aligned batching keeps it
    inside a single row/column); all b^2 ordered pairs of a block
    contribute, diagonal included.  Pair counts pool across sweeps, so
    extra shuffled passes refine the approximation.  Every group has the
    same block structure, hence the pooled ratio equals the mean over
    groups of per-group means.
    """

    def __init__(self, axis: str, k: int, distance: str,
                 jobs: int = 1, pool: ThreadPoolExecutor | None = None):
        self.axis = axis
        self.distance = distance
        self.sums = np.zeros(k, dtype=np.float64)
        self.pair_count = 0
        self.pool = pool if jobs > 1 else None
        self.jobs = jobs
        self._pending: list = []

    def observe_batch(self, i_arr, j_arr, values) -> None:
        keys = i_arr if self.axis == "row" else j_arr
        if len(np.unique(keys)) != 1:
            raise ShapeError("distance block spans more than one row/column")
        if self.pool is None:
            self.sums += _block_pair_sums(values, self.distance)
        else:
            # block-sharded work; bound in-flight blocks to the worker count
            self._pending.append(
                self.pool.submit(_block_pair_sums, values.copy(), self.distance)
            )
            if len(self._pending) >= self.jobs:
                self._drain()
        b = len(keys)
        self.pair_count += b * (b - 1)

    def _drain(self) -> None:
        for fut in self._pending:
            self.sums += fut.result()
        self._pending = []

    def finish_pass(self) -> None:
        self._drain()

    def result(self, axis_length: int) -> np.ndarray:
        """Per-cell diagonal-inclusive mean over all axis_length^2 ordered
        pairs, from the pooled off-diagonal state."""
        self._drain()
        if self.pair_count == 0:
            raise BatchTooSmallError("no distance pairs accumulated")
        return self.sums / self.pair_count * (axis_length - 1) / axis_length


def _block_pair_sums(values: np.ndarray, distance: str) -> np.ndarray:
    """Sum of d over all ordered pairs of the block's records, per cell."""
    b = values.shape[0]
    if distance == "squared-euclidean":
        total = 2.0 * (b * (values * values).sum(axis=0) - values.sum(axis=0) ** 2)
        return np.maximum(total, 0.0)
    out = np.zeros(values.shape[1], dtype=np.float64)
    for p in range(b):
        for q in range(p + 1, b):
            out += 2.0 * np.abs(values[p] - values[q])
    return out


class ColumnMeansConsumer:
    """Running per-(transformation, cell) means; order-agnostic."""

    def __init__(self, m: int, k: int):
        self.sums = np.zeros((m, k), dtype=np.float64)
        self.counts = np.zeros(m, dtype=np.int64)

    def observe_batch(self, i_arr, j_arr, values) -> None:
        for row in range(len(j_arr)):
            j = int(j_arr[row])
            self.sums[j] += values[row]
            self.counts[j] += 1

    def means(self) -> np.ndarray:
        if (self.counts == 0).any():
            raise ShapeError("some transformation saw no records")
        return self.sums / self.counts[:, None]


class WithinGroupSSConsumer:
    """Second ANOVA sweep: sum of squared deviations from fixed group means."""

    def __init__(self, group_means: np.ndarray):
        self.group_means = group_means
        self.ssw = np.zeros(group_means.shape[1], dtype=np.float64)

    def observe_batch(self, i_arr, j_arr, values) -> None:
        for row in range(len(j_arr)):
            d = values[row] - self.group_means[int(j_arr[row])]
            self.ssw += d * d


class IdentityStatsConsumer:
    """Mean/std of every cell over the untransformed samples."""

    def __init__(self, k: int, identity_index: int):
        self.identity_index = identity_index
        self.welford = ArrayWelford(k)

    def observe_batch(self, i_arr, j_arr, values) -> None:
        for row in range(len(j_arr)):
            if int(j_arr[row]) == self.identity_index:
                self.welford.update(values[row])


class FiringCountConsumer:
    """Counts threshold crossings for the firing-rate measure."""

    def __init__(self, threshold: np.ndarray, identity_index: int):
        self.threshold = threshold
        self.identity_index = identity_index
        self.local_count = np.zeros(threshold.shape, dtype=np.int64)
        self.global_count = np.zeros(threshold.shape, dtype=np.int64)
        self.total = 0
        self.identity_total = 0

    def observe_batch(self, i_arr, j_arr, values) -> None:
        fired = values > self.threshold[None, :]
        self.local_count += fired.sum(axis=0)
        self.total += len(i_arr)
        identity_rows = np.asarray(j_arr) == self.identity_index
        if identity_rows.any():
            self.global_count += fired[identity_rows].sum(axis=0)
            self.identity_total += int(identity_rows.sum())


# ---------------------------------------------------------------------------
# Run configuration and orchestration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    provider: BuiltinModelProvider | DumpProvider
    batch_size: int = 64
    jobs: int = 1
    deterministic: bool = False
    memory_budget_bytes: int | None = None
    seed: int = 0
    provenance_extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        if self.deterministic:
            self.jobs = 1
        if self.memory_budget_bytes is not None:
            est = estimate_memory(self.provider.st_shape.k, self.batch_size)
            if est > self.memory_budget_bytes:
                raise ValueError(
                    f"estimated peak activation storage {est} B exceeds budget "
                    f"{self.memory_budget_bytes} B"
                )

    def passes_required(self, measure_ids: Sequence[str]) -> int:
        return max(PASSES_REQUIRED[m] for m in measure_ids)


@dataclass
class RunStats:
    """Instrumentation: provider records per sweep and the peak number of
    simultaneously retained records per worker."""

    sweep_records: list[int] = field(default_factory=list)
    peak_retained: int = 0


def run_measure(
    config: RunConfig,
    measure_ids: Sequence[str],
    opts: M.MeasureOptions = M.DEFAULT_OPTIONS,
    stats: RunStats | None = None,
) -> MeasureReport:
    """Execute the minimal sweeps for the requested measures and assemble a
    report with per-activation and per-layer values."""
    measure_ids = list(dict.fromkeys(measure_ids))
    unknown = [m for m in measure_ids if m not in M.MEASURE_IDS]
    if unknown:
        raise ValueError(f"unknown measures {unknown}")
    if not measure_ids:
        raise ValueError("no measures requested")

    provider = config.provider
    shape = provider.st_shape  # STShape enforces n, m >= 2 before any provider work
    k = shape.k
    meter = RetentionMeter()
    stats = stats if stats is not None else RunStats()
    invalid = np.zeros(k, dtype=bool)
    pool = ThreadPoolExecutor(max_workers=config.jobs) if config.jobs > 1 else None

    needs = {m: (m in measure_ids) for m in M.MEASURE_IDS}
    want_tv = needs["tv"] or needs["nv"]
    want_sv = needs["sv"] or needs["nv"]
    want_td = needs["td"] or needs["nd"]
    want_sd = needs["sd"] or needs["nd"]
    if (want_td or want_sd) and config.batch_size < 2:
        raise BatchTooSmallError("distance measures need batch size >= 2")

    def sweep(consumers, order, transforms=None, samples=None, group_aligned=False):
        count = 0
        for i_arr, j_arr, values in provider.iter_batches(
            order, config.batch_size, transforms=transforms, samples=samples,
            group_aligned=group_aligned,
        ):
            meter.acquire(len(i_arr))
            nan_cols = np.isnan(values).any(axis=0)
            if nan_cols.any():
                invalid[nan_cols] = True
            for c in consumers:
                c.observe_batch(i_arr, j_arr, values)
            count += len(i_arr)
            meter.release(len(i_arr))
        stats.sweep_records.append(count)

    cells: dict[str, np.ndarray] = {}
    details: dict[str, dict] = {}

    # firing-rate statistics need a dedicated pass over the untransformed column
    gf_stats = dead = None
    if needs["goodfellow"]:
        gf_stats = IdentityStatsConsumer(k, provider.identity_index)
        sweep([gf_stats], SAMPLE_MAJOR, transforms=[provider.identity_index])

    # sample-major sweep: row variances, row distances, firing counts
    row_consumers = []
    tv_consumer = td_consumer = gf_counter = None
    if want_tv:
        tv_consumer = GroupedVarianceConsumer(
            "row", k, shape.m, opts.variance_ddof, config.jobs, pool
        )
        row_consumers.append(tv_consumer)
    if want_td:
        td_consumer = GroupedDistanceConsumer("row", k, opts.distance, config.jobs, pool)
        row_consumers.append(td_consumer)
    if needs["goodfellow"]:
        mean = gf_stats.welford.mean.copy()
        std = np.sqrt(gf_stats.welford.variance(ddof=1))
        dead = std == 0
        gf_counter = FiringCountConsumer(M.goodfellow_threshold(mean, std, opts),
                                         provider.identity_index)
        row_consumers.append(gf_counter)
    if row_consumers:
        sweep(row_consumers, SAMPLE_MAJOR, group_aligned=want_td)
        if td_consumer is not None:
            td_consumer.finish_pass()

    # extra shuffled sweeps refine the distance approximation
    if want_td:
        for p in range(1, opts.distance_passes):
            perm = np.random.default_rng([opts.shuffle_seed, p]).permutation(shape.m)
            sweep([td_consumer], SAMPLE_MAJOR, transforms=perm.tolist(), group_aligned=True)
            td_consumer.finish_pass()

    # transformation-major sweep: column variances/distances, ANOVA group means
    col_consumers = []
    sv_consumer = sd_consumer = anova_means = None
    if want_sv:
        sv_consumer = GroupedVarianceConsumer(
            "col", k, shape.n, opts.variance_ddof, config.jobs, pool
        )
        col_consumers.append(sv_consumer)
    if want_sd:
        sd_consumer = GroupedDistanceConsumer("col", k, opts.distance, config.jobs, pool)
        col_consumers.append(sd_consumer)
    if needs["anova"]:
        anova_means = ColumnMeansConsumer(shape.m, k)
        col_consumers.append(anova_means)
    if col_consumers:
        sweep(col_consumers, TRANSFORMATION_MAJOR, group_aligned=want_sd)
        if sd_consumer is not None:
            sd_consumer.finish_pass()

    if want_sd:
        for p in range(1, opts.distance_passes):
            perm = np.random.default_rng([opts.shuffle_seed, p, 1]).permutation(shape.n)
            sweep([sd_consumer], TRANSFORMATION_MAJOR, samples=perm.tolist(), group_aligned=True)
            sd_consumer.finish_pass()

    ssw_consumer = None
    if needs["anova"]:
        ssw_consumer = WithinGroupSSConsumer(anova_means.means())
        sweep([ssw_consumer], TRANSFORMATION_MAJOR)

    # finalize cell-level values
    if want_tv:
        cells["tv"] = tv_consumer.finish()
    if want_sv:
        cells["sv"] = sv_consumer.finish()
    if want_td:
        cells["td"] = td_consumer.result(shape.m)
    if want_sd:
        cells["sd"] = sd_consumer.result(shape.n)
    if needs["anova"]:
        result = M.anova_from_stats(anova_means.means(), ssw_consumer.ssw, shape.n, opts,
                                    simultaneous_tests=k)
        cells["anova"] = result.rejected
        details["anova"] = {
            "alpha": opts.anova_alpha,
            "bonferroni": opts.bonferroni,
            "rejection_threshold": result.threshold,
            "simultaneous_tests": k,
        }
    if needs["goodfellow"]:
        local = gf_counter.local_count / max(gf_counter.total, 1)
        global_ = gf_counter.global_count / max(gf_counter.identity_total, 1)
        cells["goodfellow"] = M.goodfellow_from_rates(local, global_, dead)
        details["goodfellow"] = {"alpha": opts.goodfellow_alpha, "tail": opts.goodfellow_tail}

    if pool is not None:
        pool.shutdown()
    stats.peak_retained = meter.peak

    return assemble_report(
        manifest=provider.manifest,
        st_shape=shape,
        measure_ids=measure_ids,
        cells=cells,
        invalid_cells=invalid,
        opts=opts,
        provenance={**provider.provenance(), "seed": config.seed, **config.provenance_extra},
        details=details,
    )


def export_provider_dump(provider, path, batch_size: int = 64,
                         extra_metadata: dict | None = None) -> None:
    """Sweep the provider once in sample-major order and write the records
    as an STDUMP file; measures over the file match the in-process path
    because taps are float32-quantized on both routes."""
    from .model import write_dump

    def records():
        for _, _, values in provider.iter_batches(SAMPLE_MAJOR, batch_size):
            yield from values

    meta = {**provider.provenance(), **(extra_metadata or {})}
    write_dump(path, provider.manifest, provider.st_shape, records(),
               order=SAMPLE_MAJOR, extra_metadata=meta)


def distance_pass(
    config: RunConfig, axis: str, opts: M.MeasureOptions = M.DEFAULT_OPTIONS
):
    """Run only the distance sweeps for one axis; returns the per-cell
    pooled accumulators (shared pair count, per-cell sums)."""
    from .core import DistanceAccumulator

    if config.batch_size < 2:
        raise BatchTooSmallError("distance blocks need batch size >= 2")
    provider = config.provider
    shape = provider.st_shape
    consumer = GroupedDistanceConsumer(
        "row" if axis == M.TRANSFORMATION else "col", shape.k, opts.distance
    )
    order = SAMPLE_MAJOR if axis == M.TRANSFORMATION else TRANSFORMATION_MAJOR
    axis_len = shape.m if axis == M.TRANSFORMATION else shape.n
    for p in range(opts.distance_passes):
        if p == 0:
            reorder = None
        else:
            reorder = np.random.default_rng([opts.shuffle_seed, p]).permutation(axis_len).tolist()
        kwargs = {"transforms": reorder} if axis == M.TRANSFORMATION else {"samples": reorder}
        for i_arr, j_arr, values in provider.iter_batches(
            order, config.batch_size, group_aligned=True, **kwargs
        ):
            consumer.observe_batch(i_arr, j_arr, values)
        consumer.finish_pass()
    # fold the ordered-pair normalization into the sums so acc.mean is the
    # diagonal-inclusive estimate directly
    scale = (axis_len - 1) / axis_len
    return [
        DistanceAccumulator(pair_count=consumer.pair_count, distance_sum=float(s) * scale)
        for s in consumer.sums
    ]
