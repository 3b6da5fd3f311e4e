"""Invariance measures over the sample x transformation activation cube.

Variance family: mean per-row variance (over transformations), mean
per-column variance (over samples), and their dimensionless ratio.  Distance
family: the same construction with mean pairwise distances, block-
approximated.  Plus a one-way ANOVA test per activation, the firing-rate
ratio measure with a fitted-normal threshold, and the empirical check that
ReLU-family activation functions never increase variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from statistics import NormalDist
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .core import (
    DistanceAccumulator,
    VarianceAccumulator,
    absolute_difference,
    squared_difference,
)
from .errors import (
    BatchTooSmallError,
    EmptyLayerError,
    InsufficientSamplesError,
    InsufficientTransformationsError,
    PreconditionViolatedError,
    ShapeError,
)

TRANSFORMATION = "transformation"
SAMPLE = "sample"

AGGREGATE_BEFORE = "before"
AGGREGATE_AFTER = "after"

DISTANCE_FUNCTIONS = {
    "squared-euclidean": squared_difference,
    "absolute": absolute_difference,
}

MEASURE_IDS = ("tv", "sv", "nv", "td", "sd", "nd", "anova", "goodfellow")


@dataclass(frozen=True)
class MeasureOptions:
    """Knobs shared by all measures; defaults follow the library's report
    conventions (sample variance with denominator n-1, exact-zero dead test,
    aggregation of feature maps before normalization)."""

    use_std_instead_of_variance: bool = False
    dead_epsilon: float = 0.0
    nv_aggregation: str = AGGREGATE_BEFORE
    anova_alpha: float = 0.01
    bonferroni: bool = True
    goodfellow_alpha: float = 0.01
    goodfellow_tail: str = "upper"
    invp_proportion: float = 1.0
    distance: str = "squared-euclidean"
    distance_passes: int = 1
    shuffle_seed: int = 0
    variance_ddof: int = 1

    def __post_init__(self):
        if not (0.0 < self.anova_alpha < 1.0):
            raise ValueError("anova_alpha must be in (0, 1)")
        if not (0.0 < self.goodfellow_alpha < 1.0):
            raise ValueError("goodfellow_alpha must be in (0, 1)")
        if not (0.0 < self.invp_proportion <= 1.0):
            raise ValueError("invp_proportion must be in (0, 1]")
        if self.dead_epsilon < 0.0:
            raise ValueError("dead_epsilon must be >= 0")
        if self.nv_aggregation not in (AGGREGATE_BEFORE, AGGREGATE_AFTER):
            raise ValueError(f"unknown nv_aggregation {self.nv_aggregation!r}")
        if self.distance not in DISTANCE_FUNCTIONS:
            raise ValueError(f"unknown distance {self.distance!r}")
        if self.distance_passes < 1:
            raise ValueError("distance_passes must be >= 1")
        if self.goodfellow_tail not in ("upper", "lower"):
            raise ValueError("goodfellow_tail must be 'upper' or 'lower'")
        if self.variance_ddof not in (0, 1):
            raise ValueError("variance_ddof must be 0 or 1")

    def distance_function(self) -> Callable:
        return DISTANCE_FUNCTIONS[self.distance]


DEFAULT_OPTIONS = MeasureOptions()


@dataclass
class MeasureValue:
    """One activation's score; ``value`` is a float, +inf, or None when the
    activation could not be measured (NaNs, dead denominator statistics)."""

    activation_name: str
    value: float | None
    components: tuple[float, float] | None = None

    @property
    def is_invalid(self) -> bool:
        return self.value is None or (isinstance(self.value, float) and math.isnan(self.value))

    @property
    def is_infinite(self) -> bool:
        return self.value is not None and math.isinf(self.value)


# ---------------------------------------------------------------------------
# Variance family
# ---------------------------------------------------------------------------

def transformation_variance(
    row_accumulators: Sequence[VarianceAccumulator], opts: MeasureOptions = DEFAULT_OPTIONS
) -> float:
    """Mean over samples of the per-row variance across transformations."""
    if not row_accumulators:
        raise InsufficientSamplesError("no per-sample accumulators")
    for acc in row_accumulators:
        if acc.count < 2:
            raise InsufficientTransformationsError(
                f"row accumulator has count {acc.count}, need >= 2"
            )
    return float(np.mean([acc.variance(opts.variance_ddof) for acc in row_accumulators]))


def sample_variance(
    col_accumulators: Sequence[VarianceAccumulator], opts: MeasureOptions = DEFAULT_OPTIONS
) -> float:
    """Mean over transformations of the per-column variance across samples."""
    if not col_accumulators:
        raise InsufficientTransformationsError("no per-transformation accumulators")
    for acc in col_accumulators:
        if acc.count < 2:
            raise InsufficientSamplesError(f"column accumulator has count {acc.count}, need >= 2")
    return float(np.mean([acc.variance(opts.variance_ddof) for acc in col_accumulators]))


def ratio_with_conventions(numerator, denominator, eps: float = 0.0):
    """num/den with the dead/degenerate conventions, vectorized.

    Both sides <= eps marks a dead activation and maps to 1; a zero-ish
    denominator with a live numerator maps to +inf.  NaN propagates.
    """
    num = np.asarray(numerator, dtype=np.float64)
    den = np.asarray(denominator, dtype=np.float64)
    dead = (num <= eps) & (den <= eps)
    blown = (den <= eps) & (num > eps)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = num / den
    out = np.where(dead, 1.0, out)
    out = np.where(blown, np.inf, out)
    out = np.where(np.isnan(num) | np.isnan(den), np.nan, out)
    return out if out.ndim else float(out)


def normalized_variance(
    tv: float, sv: float, opts: MeasureOptions = DEFAULT_OPTIONS, activation_name: str = ""
) -> MeasureValue:
    """Ratio of transformation variance to sample variance (on standard
    deviations instead when configured)."""
    num, den = float(tv), float(sv)
    if opts.use_std_instead_of_variance:
        if not math.isnan(num):
            num = math.sqrt(max(num, 0.0))
        if not math.isnan(den):
            den = math.sqrt(max(den, 0.0))
    value = ratio_with_conventions(num, den, opts.dead_epsilon)
    if math.isnan(value):
        return MeasureValue(activation_name, None, components=(num, den))
    return MeasureValue(activation_name, float(value), components=(num, den))


def aggregate_feature_map(
    tv_cells, sv_cells, opts: MeasureOptions = DEFAULT_OPTIONS
) -> tuple[float, float, float]:
    """Collapse per-cell TV/SV of one feature map into (TV_F, SV_F, NV_F).

    Default aggregates the variances spatially before taking the ratio; the
    alternative averages per-cell ratios, which can blow up to +inf when any
    cell has a zero-ish denominator.
    """
    tv_cells = np.asarray(tv_cells, dtype=np.float64).ravel()
    sv_cells = np.asarray(sv_cells, dtype=np.float64).ravel()
    if tv_cells.size == 0 or tv_cells.shape != sv_cells.shape:
        raise ShapeError("per-cell TV and SV grids must be nonempty and congruent")
    tv_f = float(tv_cells.mean())
    sv_f = float(sv_cells.mean())
    if opts.nv_aggregation == AGGREGATE_BEFORE:
        nv_f = normalized_variance(tv_f, sv_f, opts).value
    else:
        per_cell = np.array(
            [normalized_variance(t, s, opts).value for t, s in zip(tv_cells, sv_cells)],
            dtype=np.float64,
        )
        nv_f = float(per_cell.mean())
    return tv_f, sv_f, math.nan if nv_f is None else nv_f


# ---------------------------------------------------------------------------
# Distance family
# ---------------------------------------------------------------------------

def _block_partitions(length: int, batch_size: int, passes: int, seed: int):
    """Index blocks per pass: natural order first, then seeded reshuffles."""
    for p in range(passes):
        if p == 0:
            order = np.arange(length)
        else:
            order = np.random.default_rng((seed, p)).permutation(length)
        for start in range(0, length, batch_size):
            yield order[start : start + batch_size]


def block_mean_pairwise(
    vectors: np.ndarray,
    batch_size: int | None,
    opts: MeasureOptions = DEFAULT_OPTIONS,
    d: Callable | None = None,
) -> DistanceAccumulator:
    """Pooled pairwise-distance state over one axis.

    ``vectors`` has the axis first (length L); remaining dims are carried
    through elementwise.  Only ordered pairs inside each size-b block are
    evaluated; the accumulator pools their off-diagonal sums and counts, so
    the distinct-pair mean stays consistent as passes add pairs.  The
    diagonal-inclusive mean over all L^2 ordered pairs is the accumulator
    mean scaled by (L-1)/L; ``axis_mean_from_accumulator`` applies that.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    length = vectors.shape[0]
    if batch_size is None:
        batch_size = length
    if batch_size < 2:
        raise BatchTooSmallError(f"distance blocks need batch size >= 2, got {batch_size}")
    d = d or opts.distance_function()
    acc = DistanceAccumulator()
    for block in _block_partitions(length, batch_size, opts.distance_passes, opts.shuffle_seed):
        vals = vectors[block]
        b = len(vals)
        if d is squared_difference:
            total = 2.0 * float(b * (vals * vals).sum() - (vals.sum(axis=0) ** 2).sum())
            total = max(total, 0.0)
        else:
            total = 0.0
            for p in range(b):
                for q in range(p + 1, b):
                    total += 2.0 * float(np.sum(d(vals[p], vals[q])))
        acc.add(total, b * (b - 1))
    return acc


def axis_mean_from_accumulator(acc: DistanceAccumulator, axis_length: int) -> float:
    """Mean over all axis_length^2 ordered pairs implied by pooled
    off-diagonal state; exact when blocks covered the whole axis."""
    if axis_length == 1:
        return 0.0
    if acc.pair_count == 0:
        raise BatchTooSmallError("no distance pairs accumulated")
    return acc.mean * (axis_length - 1) / axis_length


def distance_measure(
    st: np.ndarray,
    role: str,
    opts: MeasureOptions = DEFAULT_OPTIONS,
    batch_size: int | None = None,
) -> float:
    """Mean over rows (transformation role) or columns (sample role) of the
    block-approximated mean pairwise distance.  ``st`` is (n, m) with scalar
    entries."""
    st = np.asarray(st, dtype=np.float64)
    if st.ndim != 2:
        raise ShapeError(f"expected an n x m matrix, got shape {st.shape}")
    axis_vectors = st if role == TRANSFORMATION else st.T
    means = []
    for vec in axis_vectors:
        acc = block_mean_pairwise(vec[:, None], batch_size, opts)
        means.append(axis_mean_from_accumulator(acc, vec.size))
    return float(np.mean(means))


def normalized_distance(
    td: float, sd: float, opts: MeasureOptions = DEFAULT_OPTIONS, activation_name: str = ""
) -> MeasureValue:
    """Same contract and conventions as the variance ratio."""
    value = ratio_with_conventions(float(td), float(sd), opts.dead_epsilon)
    if math.isnan(value):
        return MeasureValue(activation_name, None, components=(float(td), float(sd)))
    return MeasureValue(activation_name, float(value), components=(float(td), float(sd)))


def mean_squared_map_difference(a: np.ndarray, b: np.ndarray) -> float:
    """Default feature-map distance: mean squared elementwise difference."""
    diff = np.subtract(a, b, dtype=np.float64)
    return float(np.mean(diff * diff))


def feature_map_distance_measure(
    maps: np.ndarray,
    role: str,
    opts: MeasureOptions = DEFAULT_OPTIONS,
    batch_size: int | None = None,
    d: Callable | None = None,
) -> float:
    """Distance measure where each cube entry is a whole h x w map and ``d``
    compares maps; defaults to the mean squared elementwise difference."""
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim != 4:
        raise ShapeError(f"expected (n, m, h, w) maps, got shape {maps.shape}")
    if d is None:
        d = mean_squared_map_difference
    axis_first = maps if role == TRANSFORMATION else maps.transpose(1, 0, 2, 3)
    means = []
    for row in axis_first:
        acc = block_mean_pairwise(row, batch_size, opts, d=d)
        means.append(axis_mean_from_accumulator(acc, row.shape[0]))
    return float(np.mean(means))


# ---------------------------------------------------------------------------
# ANOVA measure
# ---------------------------------------------------------------------------

@dataclass
class AnovaResult:
    rejected: np.ndarray  # {0,1} per activation
    f_statistic: np.ndarray
    p_value: np.ndarray
    threshold: float


def anova_from_stats(
    group_means: np.ndarray,
    ssw: np.ndarray,
    n: int,
    opts: MeasureOptions = DEFAULT_OPTIONS,
    simultaneous_tests: int | None = None,
) -> AnovaResult:
    """One-way ANOVA from sufficient statistics.

    ``group_means`` is (m, k) with one group per transformation and n
    observations per group; ``ssw`` is the (k,) within-group sum of squares.
    """
    group_means = np.atleast_2d(np.asarray(group_means, dtype=np.float64))
    ssw = np.atleast_1d(np.asarray(ssw, dtype=np.float64))
    m = group_means.shape[0]
    if m < 2:
        raise InsufficientTransformationsError("ANOVA needs at least 2 groups")
    if n < 2:
        raise InsufficientSamplesError("ANOVA needs at least 2 observations per group")
    grand = group_means.mean(axis=0)
    ssb = n * ((group_means - grand) ** 2).sum(axis=0)
    df_between = m - 1
    df_within = m * (n - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = (ssb / df_between) / (ssw / df_within)
    p = np.empty_like(ssb)
    regular = (ssw > 0) & ~np.isnan(ssb)
    p[regular] = special.fdtrc(df_between, df_within, f[regular])
    # degenerate groups: no within-group scatter
    both_zero = (ssw == 0) & (ssb == 0)
    separated = (ssw == 0) & (ssb > 0)
    p[both_zero] = 1.0
    f[both_zero] = 0.0
    p[separated] = 0.0
    f[separated] = np.inf
    invalid = np.isnan(ssb) | np.isnan(ssw)
    p[invalid] = np.nan
    f[invalid] = np.nan

    k_tests = simultaneous_tests if simultaneous_tests is not None else p.size
    threshold = opts.anova_alpha / max(k_tests, 1) if opts.bonferroni else opts.anova_alpha
    rejected = np.where(np.isnan(p), np.nan, (p < threshold).astype(np.float64))
    return AnovaResult(rejected=rejected, f_statistic=f, p_value=p, threshold=threshold)


def anova_measure(
    st: np.ndarray, opts: MeasureOptions = DEFAULT_OPTIONS, simultaneous_tests: int | None = None
) -> AnovaResult:
    """One-way ANOVA on an in-memory cube (n, m) or (n, m, k), with
    transformations as treatments; two-pass computation."""
    st = np.asarray(st, dtype=np.float64)
    squeeze = st.ndim == 2
    if squeeze:
        st = st[:, :, None]
    n, m, _ = st.shape
    group_means = st.mean(axis=0)  # (m, k)
    ssw = ((st - group_means[None, :, :]) ** 2).sum(axis=(0, 1))
    return anova_from_stats(group_means, ssw, n, opts, simultaneous_tests)


# ---------------------------------------------------------------------------
# Firing-rate (Goodfellow) measure
# ---------------------------------------------------------------------------

@dataclass
class GoodfellowResult:
    gf: np.ndarray  # per-activation ratio; NaN = invalid
    local_rate: np.ndarray
    global_rate: np.ndarray
    threshold: np.ndarray
    dead: np.ndarray  # sigma = 0 on the untransformed dataset


def goodfellow_threshold(mean, std, opts: MeasureOptions = DEFAULT_OPTIONS):
    """Fitted-normal firing threshold.

    Upper tail (default): the fitted normal fires with probability alpha,
    P(a > U) = alpha.  The lower-tail variant puts alpha of the mass below
    the threshold instead.
    """
    alpha = opts.goodfellow_alpha
    q = 1.0 - alpha if opts.goodfellow_tail == "upper" else alpha
    z = NormalDist().inv_cdf(q)
    return np.asarray(mean, dtype=np.float64) + np.asarray(std, dtype=np.float64) * z


def goodfellow_from_rates(
    local_rate: np.ndarray, global_rate: np.ndarray, dead: np.ndarray
) -> np.ndarray:
    local_rate = np.asarray(local_rate, dtype=np.float64)
    global_rate = np.asarray(global_rate, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        gf = local_rate / global_rate
    gf = np.where(np.asarray(dead, dtype=bool) | (global_rate == 0), np.nan, gf)
    return gf


def goodfellow_measure(
    st: np.ndarray,
    identity_index: int = 0,
    opts: MeasureOptions = DEFAULT_OPTIONS,
) -> GoodfellowResult:
    """Firing-rate ratio on an in-memory cube (n, m) or (n, m, k).

    The untransformed dataset is the identity column; its mean/std fit the
    threshold, the local rate averages firing over every transformed
    version, the global rate is the untransformed firing fraction.
    """
    st = np.asarray(st, dtype=np.float64)
    if st.ndim == 2:
        st = st[:, :, None]
    identity = st[:, identity_index, :]  # (n, k)
    mean = identity.mean(axis=0)
    std = identity.std(axis=0, ddof=1)
    dead = std == 0
    threshold = goodfellow_threshold(mean, std, opts)
    firing = st > threshold[None, None, :]
    local = firing.mean(axis=(0, 1))
    global_ = firing[:, identity_index, :].mean(axis=0)
    gf = goodfellow_from_rates(local, global_, dead)
    return GoodfellowResult(gf=gf, local_rate=local, global_rate=global_,
                            threshold=threshold, dead=dead)


def invp_aggregate(deepest_layer_values, p: float) -> float:
    """Mean of the ceil(p * count) largest values."""
    values = np.asarray(list(deepest_layer_values), dtype=np.float64)
    if values.size == 0:
        raise EmptyLayerError("invp_aggregate of empty layer")
    if not (0.0 < p <= 1.0):
        raise ValueError("proportion must be in (0, 1]")
    top = max(1, math.ceil(p * values.size))
    return float(np.sort(values)[-top:].mean())


# ---------------------------------------------------------------------------
# Activation functions never increase variance
# ---------------------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0.0)


def leaky_relu(x, alpha: float):
    return np.where(x >= 0.0, x, alpha * x)


def prelu(x, alpha: float):
    return leaky_relu(x, alpha)


def elu(x, alpha: float = 1.0):
    return np.where(x >= 0.0, x, alpha * np.expm1(np.minimum(x, 0.0)))


def make_checked_activation(name: str, alpha: float | None = None) -> Callable:
    """Activation function admissible for the variance bound; rejects
    parameter choices for which the bound is not guaranteed."""
    if name == "relu":
        return relu
    if name in ("leaky-relu", "prelu"):
        if alpha is None or not (alpha < 1.0):
            raise PreconditionViolatedError(f"{name} requires alpha < 1, got {alpha}")
        fn = leaky_relu if name == "leaky-relu" else prelu
        return lambda x: fn(x, alpha)
    if name == "elu":
        if alpha is None or alpha > 1.0:
            raise PreconditionViolatedError(f"elu requires alpha <= 1, got {alpha}")
        return lambda x: elu(x, alpha)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class VarianceBoundReport:
    """Worst empirical margins of the three moment inequalities the
    ReLU-family bound rests on: Var(f(x)) <= Var(x), E(f(x)) >= E(x),
    E(f(x)^2) <= E(x^2).  Positive violation = inequality broken."""

    distributions_checked: int
    max_variance_violation: float
    max_mean_violation: float
    max_second_moment_violation: float

    def passed(self, tolerance: float = 1e-12) -> bool:
        return (
            self.max_variance_violation <= tolerance
            and self.max_mean_violation <= tolerance
            and self.max_second_moment_violation <= tolerance
        )


def check_variance_nonincreasing(
    f: Callable, sample_distributions: Sequence[np.ndarray]
) -> VarianceBoundReport:
    """Empirically verify the variance bound on each supplied distribution.

    Uses population moments, under which the inequalities hold exactly for
    any empirical distribution of an admissible f.
    """
    worst_var = worst_mean = worst_sq = -math.inf
    count = 0
    for x in sample_distributions:
        x = np.asarray(x, dtype=np.float64)
        fx = f(x)
        worst_var = max(worst_var, float(fx.var() - x.var()))
        worst_mean = max(worst_mean, float(x.mean() - fx.mean()))
        worst_sq = max(worst_sq, float(np.mean(fx * fx) - np.mean(x * x)))
        count += 1
    if count == 0:
        raise EmptyLayerError("no sample distributions supplied")
    return VarianceBoundReport(
        distributions_checked=count,
        max_variance_violation=worst_var,
        max_mean_violation=worst_mean,
        max_second_moment_violation=worst_sq,
    )


def options_with(opts: MeasureOptions, **kwargs) -> MeasureOptions:
    return replace(opts, **kwargs)
