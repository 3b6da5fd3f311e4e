"""Invariance measurement for neural network activations.

Quantifies how much a network's internal activations change when its inputs
are transformed by a finite set of affine transformations.  Activations are
streamed as a samples x transformations cube and reduced online into
variance-, distance-, ANOVA- and firing-rate-based invariance scores.
"""

__version__ = "0.1.0"

from .core import (
    ActivationManifest,
    DistanceAccumulator,
    ManifestEntry,
    STRecord,
    STShape,
    VarianceAccumulator,
    mean_pairwise_distance,
    welford_merge,
    welford_update,
)

__all__ = [
    "ActivationManifest",
    "DistanceAccumulator",
    "ManifestEntry",
    "STRecord",
    "STShape",
    "VarianceAccumulator",
    "mean_pairwise_distance",
    "welford_merge",
    "welford_update",
]
