"""Built-in oracle suites: quick self-contained checks of the numerical
foundations, runnable from the CLI as a health gate.

Each suite returns (passed, detail); they are intentionally independent of
the engine plumbing so a failure points at the math, not the wiring.
"""

from __future__ import annotations

import os
from typing import Callable

import numpy as np

from .core import mean_pairwise_distance, squared_difference, welford_accumulate, welford_merge
from .measures import anova_measure, check_variance_nonincreasing, make_checked_activation

FAULT_ENV = "TM_SELFCHECK_FAULT"


def check_distance_variance_identity(trials: int = 200, seed: int = 0) -> tuple[bool, str]:
    """Mean pairwise squared difference equals twice the population variance."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(2, 64))
        scale = 10.0 ** rng.uniform(-3, 3)
        x = rng.normal(0.0, scale, size=n)
        d = mean_pairwise_distance(x, squared_difference)
        v = 2.0 * x.var()  # population variance
        worst = max(worst, abs(d - v) / max(v, 1e-30))
    return worst <= 1e-9, f"worst relative gap {worst:.3e} over {trials} draws"


def check_streaming_variance(seed: int = 0) -> tuple[bool, str]:
    """Welford matches the two-pass variance; block merges match sequential."""
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 1.0, size=100_000) * 10.0 ** rng.uniform(-6, 6, size=100_000)
    acc = welford_accumulate(x)
    two_pass = float(np.sum((x - x.mean()) ** 2) / (x.size - 1))
    rel = abs(acc.variance() - two_pass) / max(two_pass, 1e-30)

    blocks = np.array_split(x, 8)
    merged = welford_accumulate(())
    for b in blocks:
        merged = welford_merge(merged, welford_accumulate(b))
    rel_merge = abs(merged.variance() - two_pass) / max(two_pass, 1e-30)
    ok = rel <= 1e-10 and rel_merge <= 1e-9
    return ok, f"stream rel {rel:.3e}, 8-block merge rel {rel_merge:.3e}"


def check_activation_variance_bound(distributions: int = 1000, seed: int = 0) -> tuple[bool, str]:
    """ReLU-family activation functions never increase empirical variance."""
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(distributions):
        kind = rng.integers(0, 3)
        n = int(rng.integers(10, 400))
        if kind == 0:
            samples.append(rng.normal(rng.uniform(-2, 2), rng.uniform(0.1, 3), size=n))
        elif kind == 1:
            samples.append(rng.uniform(-5, 5, size=n))
        else:
            mix = rng.normal(-2, 0.5, size=n // 2 + 1), rng.normal(3, 1.0, size=n // 2 + 1)
            samples.append(np.concatenate(mix))
    worst = -np.inf
    for name, alpha in (("relu", None), ("leaky-relu", 0.1), ("prelu", 0.5), ("elu", 1.0)):
        fn = make_checked_activation(name, alpha)
        rep = check_variance_nonincreasing(fn, samples)
        worst = max(worst, rep.max_variance_violation, rep.max_mean_violation,
                    rep.max_second_moment_violation)
    return worst <= 1e-12, f"worst inequality violation {worst:.3e}"


def check_anova_calibration(trials: int = 10_000, n: int = 30, m: int = 30,
                            alpha: float = 0.01, seed: int = 0) -> tuple[bool, str]:
    """Null rejections of uncorrected per-activation tests track alpha."""
    from .measures import MeasureOptions

    rng = np.random.default_rng(seed)
    cube = rng.standard_normal((n, m, trials))
    opts = MeasureOptions(anova_alpha=alpha, bonferroni=False)
    result = anova_measure(cube, opts)
    rate = float(np.nanmean(result.rejected))
    return abs(rate - alpha) <= 0.005, f"null rejection rate {rate:.4f} (alpha {alpha})"


SUITES: dict[str, Callable[[], tuple[bool, str]]] = {
    "variance-distance-identity": check_distance_variance_identity,
    "streaming-variance": check_streaming_variance,
    "activation-variance-bound": check_activation_variance_bound,
    "anova-calibration": check_anova_calibration,
}


def run_suites(names=None) -> list[tuple[str, bool, str]]:
    names = list(names) if names else list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ValueError(f"unknown suites {unknown}; available: {sorted(SUITES)}")
    results = []
    fault = os.environ.get(FAULT_ENV) == "1"
    for name in names:
        passed, detail = SUITES[name]()
        if fault:
            passed, detail = False, f"injected fault ({FAULT_ENV}=1)"
        results.append((name, passed, detail))
    return results
