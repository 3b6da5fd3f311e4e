"""Data model for the sample x transformation activation cube and the
streaming accumulators every measure is built on.

The cube has one row per sample, one column per transformation and one slice
per scalar activation.  It is never materialized: providers stream one
record (= one forward pass) at a time and accumulators reduce it online.
Accumulators are plain values; parallelism is per-thread accumulation plus
``welford_merge`` / ``DistanceAccumulator.merge`` at the end.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import EmptyVectorError, InsufficientSamplesError, InsufficientTransformationsError

SCALAR_VECTOR = "scalar-vector"
FEATURE_MAP = "feature-map"


# ---------------------------------------------------------------------------
# Manifest / cube shape
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    """One tapped tensor: a named layer output with a fixed shape.

    ``kind`` is ``scalar-vector`` for flat outputs (dense layers) and
    ``feature-map`` for spatial tensors, in which case ``shape`` is [H, W, C].
    """

    name: str
    layer_index: int
    shape: tuple[int, ...]
    kind: str

    def __post_init__(self):
        if self.layer_index < 0:
            raise ValueError(f"negative layer_index for {self.name!r}")
        if not self.shape or any(s < 1 for s in self.shape):
            raise ValueError(f"non-positive dimension in shape of {self.name!r}")
        if self.kind not in (SCALAR_VECTOR, FEATURE_MAP):
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.kind == FEATURE_MAP and len(self.shape) != 3:
            raise ValueError(f"feature-map entry {self.name!r} must have shape [H, W, C]")

    @property
    def cell_count(self) -> int:
        """Number of scalar activations in this entry."""
        return int(np.prod(self.shape))

    @property
    def unit_count(self) -> int:
        """Number of reported activations: channels for feature maps
        (spatial dims are aggregated), individual scalars otherwise."""
        if self.kind == FEATURE_MAP:
            return self.shape[2]
        return self.cell_count


class ActivationManifest:
    """Ordered list of tapped tensors; fixes the record layout of the cube."""

    def __init__(self, entries: Sequence[ManifestEntry]):
        if not entries:
            raise ValueError("manifest needs at least one entry")
        names = [e.name for e in entries]
        if len(set(names)) != len(names):
            raise ValueError("duplicate activation names in manifest")
        indices = [e.layer_index for e in entries]
        if any(b < a for a, b in zip(indices, indices[1:])):
            raise ValueError("layer_index must be non-decreasing in entry order")
        self.entries: tuple[ManifestEntry, ...] = tuple(entries)

    @property
    def cell_count(self) -> int:
        return sum(e.cell_count for e in self.entries)

    @property
    def unit_count(self) -> int:
        return sum(e.unit_count for e in self.entries)

    def cell_slices(self) -> list[slice]:
        """Per-entry slices into a flat record of all cells."""
        out, start = [], 0
        for e in self.entries:
            out.append(slice(start, start + e.cell_count))
            start += e.cell_count
        return out

    def unit_names(self) -> list[str]:
        """Names of the reported activations, entry by entry."""
        names = []
        for e in self.entries:
            if e.unit_count == 1:
                names.append(e.name)
            else:
                names.extend(f"{e.name}[{i}]" for i in range(e.unit_count))
        return names

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, ActivationManifest) and self.entries == other.entries

    def to_json_entries(self) -> list[dict]:
        return [
            {"name": e.name, "layer_index": e.layer_index, "shape": list(e.shape), "kind": e.kind}
            for e in self.entries
        ]

    @classmethod
    def from_json_entries(cls, entries: Iterable[dict]) -> "ActivationManifest":
        return cls(
            [
                ManifestEntry(
                    name=d["name"],
                    layer_index=int(d["layer_index"]),
                    shape=tuple(int(s) for s in d["shape"]),
                    kind=d["kind"],
                )
                for d in entries
            ]
        )


@dataclass(frozen=True)
class STShape:
    """Dimensions of one full pass: n samples x m transformations x k cells."""

    n: int
    m: int
    k: int

    def __post_init__(self):
        if self.n < 2:
            raise InsufficientSamplesError(f"need at least 2 samples, got {self.n}")
        if self.m < 2:
            raise InsufficientTransformationsError(f"need at least 2 transformations, got {self.m}")
        if self.k < 1:
            raise ValueError(f"need at least 1 activation, got {self.k}")

    @property
    def record_count(self) -> int:
        return self.n * self.m


@dataclass(frozen=True)
class STRecord:
    """Activations of one (sample, transformation) pair, flat in manifest
    order and upcast to float64."""

    sample_index: int
    transformation_index: int
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))


# ---------------------------------------------------------------------------
# Welford accumulator (scalar)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VarianceAccumulator:
    """Mergeable running mean/variance state (count, mean, sum of squared
    deviations).  All arithmetic in float64 regardless of input precision."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def variance(self, ddof: int = 1) -> float:
        """Finalized variance; ``ddof=1`` gives the n-1 sample variance,
        ``ddof=0`` the population variance."""
        if self.count < 2:
            raise ValueError(f"variance undefined for count={self.count}")
        return self.m2 / (self.count - ddof)


def welford_update(acc: VarianceAccumulator, x: float) -> VarianceAccumulator:
    """Fold one observation into the accumulator.

    NaN inputs propagate into mean/m2; callers flag the activation invalid
    downstream rather than aborting the stream.
    """
    count = acc.count + 1
    delta = x - acc.mean
    mean = acc.mean + delta / count
    m2 = acc.m2 + delta * (x - mean)
    # rounding can push m2 infinitesimally negative
    if m2 < 0.0:
        m2 = 0.0
    return VarianceAccumulator(count, mean, m2)


def welford_accumulate(values: Iterable[float]) -> VarianceAccumulator:
    acc = VarianceAccumulator()
    for x in values:
        acc = welford_update(acc, x)
    return acc


def welford_merge(a: VarianceAccumulator, b: VarianceAccumulator) -> VarianceAccumulator:
    """Combine two accumulators as if their streams had been concatenated.

    Commutative and associative up to floating-point reassociation.
    """
    if a.count == 0:
        return b
    if b.count == 0:
        return a
    count = a.count + b.count
    delta = b.mean - a.mean
    mean = a.mean + delta * (b.count / count)
    m2 = a.m2 + b.m2 + delta * delta * (a.count * b.count / count)
    if m2 < 0.0:
        m2 = 0.0
    return VarianceAccumulator(count, mean, m2)


# ---------------------------------------------------------------------------
# Welford accumulator (vectorized, engine-internal)
# ---------------------------------------------------------------------------

class ArrayWelford:
    """Welford state over a vector of activations updated one record at a
    time.  Same recurrences as the scalar accumulator, shared count."""

    __slots__ = ("count", "mean", "m2")

    def __init__(self, size: int):
        self.count = 0
        self.mean = np.zeros(size, dtype=np.float64)
        self.m2 = np.zeros(size, dtype=np.float64)

    def update(self, x: np.ndarray) -> None:
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    def variance(self, ddof: int = 1) -> np.ndarray:
        if self.count < 2:
            raise ValueError(f"variance undefined for count={self.count}")
        return np.maximum(self.m2, 0.0) / (self.count - ddof)

    def reset(self) -> None:
        self.count = 0
        self.mean[:] = 0.0
        self.m2[:] = 0.0


# ---------------------------------------------------------------------------
# Pairwise distances
# ---------------------------------------------------------------------------

def squared_difference(a, b):
    """Default scalar distance; broadcasts over arrays."""
    d = np.subtract(a, b)
    return d * d


def absolute_difference(a, b):
    return np.abs(np.subtract(a, b))


@dataclass
class DistanceAccumulator:
    """Pooled pairwise-distance state: mean distance = sum / pair count."""

    pair_count: int = 0
    distance_sum: float = 0.0

    def add(self, distance_sum: float, pair_count: int) -> None:
        self.distance_sum += distance_sum
        self.pair_count += pair_count

    def merge(self, other: "DistanceAccumulator") -> "DistanceAccumulator":
        return DistanceAccumulator(
            self.pair_count + other.pair_count,
            self.distance_sum + other.distance_sum,
        )

    @property
    def mean(self) -> float:
        if self.pair_count == 0:
            raise ValueError("mean distance undefined with no pairs")
        return self.distance_sum / self.pair_count


def mean_pairwise_distance(values, d: Callable = squared_difference) -> float:
    """Mean of d over all ordered pairs of ``values``, diagonal included.

    ``d`` must be symmetric with d(x, x) = 0 and broadcast over numpy arrays.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise EmptyVectorError("mean_pairwise_distance of empty vector")
    pair = d(v[:, None], v[None, :])
    return float(pair.sum() / (v.size * v.size))
