"""Acceptance suite: one test per criterion, each printing a pass/fail line
and enforcing its runtime budget.  Run with ``pytest -s`` to see the lines.
"""

import time
from contextlib import contextmanager

import numpy as np
import pytest

from tmeasure import measures as M
from tmeasure.core import (
    ActivationManifest,
    ManifestEntry,
    STShape,
    welford_accumulate,
    welford_merge,
)
from tmeasure.data import synthetic_dataset
from tmeasure.engine import (
    BuiltinModelProvider,
    DumpProvider,
    RunConfig,
    RunStats,
    estimate_memory,
    run_measure,
)
from tmeasure.errors import FormatError, TruncatedFileError
from tmeasure.model import (
    Dense,
    Flatten,
    NetworkSpec,
    WeightBundle,
    random_init,
    read_dump,
    read_weights,
    simpleconv_spec,
    write_dump,
    write_weights,
)
from tmeasure.report import (
    anderson_darling_k_sample,
    convergence_study,
    layer_aggregate,
    _unit_slices,
)
from tmeasure.transforms import rotation_set


@contextmanager
def criterion(number: int, label: str, limit_seconds: float):
    start = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"[FAIL] criterion {number}: {label}")
        raise
    elapsed = time.perf_counter() - start
    ok = elapsed < limit_seconds
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {label} "
          f"({elapsed:.2f}s < {limit_seconds:.0f}s)")
    assert ok, f"criterion {number} exceeded its runtime budget"


def write_cube_dump(path, cube):
    n, m, k = cube.shape
    manifest = ActivationManifest([ManifestEntry("a", 0, (k,), "scalar-vector")])
    write_dump(path, manifest, STShape(n, m, k),
               (cube[i, j] for i in range(n) for j in range(m)))
    return path


def test_criterion_01_worked_st_oracle(tmp_path):
    with criterion(1, "worked-ST oracle TV=1 SV=0.5 NV=2", 1.0):
        path = write_cube_dump(tmp_path / "st.stdump",
                               np.array([[[1.0], [3.0]], [[2.0], [2.0]]]))
        rep = run_measure(RunConfig(provider=DumpProvider(path), batch_size=4),
                          ["tv", "sv", "nv"])
        assert abs(rep.measures["tv"][0].value - 1.0) <= 1e-12
        assert abs(rep.measures["sv"][0].value - 0.5) <= 1e-12
        assert abs(rep.measures["nv"][0].value - 2.0) <= 1e-12


def test_criterion_02_distance_variance_equivalence():
    with criterion(2, "unbatched squared distance equals population variance", 5.0):
        rng = np.random.default_rng(202)
        for _ in range(200):
            n = int(rng.integers(2, 17))
            m = int(rng.integers(2, 65))
            st = rng.normal(0.0, 10.0 ** rng.uniform(-2, 2), size=(n, m))
            td = M.distance_measure(st, M.TRANSFORMATION)
            sd = M.distance_measure(st, M.SAMPLE)
            tv_pop = float(np.mean([np.var(row) for row in st]))
            sv_pop = float(np.mean([np.var(col) for col in st.T]))
            assert abs(td - 2 * tv_pop) <= 1e-9 * max(2 * tv_pop, 1e-30)
            assert abs(sd - 2 * sv_pop) <= 1e-9 * max(2 * sv_pop, 1e-30)
            nd = M.normalized_distance(td, sd).value
            nv_pop = tv_pop / sv_pop
            assert abs(nd - nv_pop) <= 1e-9 * nv_pop


def test_criterion_03_welford_fidelity():
    with criterion(3, "streaming variance matches two-pass; merges agree", 5.0):
        rng = np.random.default_rng(303)
        x = rng.standard_normal(100_000) * 10.0 ** rng.uniform(-6, 6, size=100_000)
        two_pass = float(np.sum((x - x.sum() / x.size) ** 2) / (x.size - 1))
        acc = welford_accumulate(x)
        assert abs(acc.variance() - two_pass) <= 1e-10 * two_pass
        for trial in range(10):
            cuts = np.sort(rng.choice(np.arange(1, x.size), size=7, replace=False))
            blocks = np.split(x, cuts)
            assert len(blocks) == 8
            merged = welford_accumulate(())
            order = rng.permutation(8)
            for b in order:
                merged = welford_merge(merged, welford_accumulate(blocks[b]))
            assert abs(merged.variance() - two_pass) <= 1e-9 * two_pass


def test_criterion_04_exact_invariance_zero():
    with criterion(4, "pixel-mean activation invariant to quarter turns", 10.0):
        h = w = 24
        spec = NetworkSpec([Flatten(), Dense(2)], input_shape=(h, w, 1))
        weight = np.zeros((h * w, 2), dtype=np.float32)
        weight[:, 0] = 1.0 / (h * w)  # global pixel mean
        weight[0, 1] = 1.0  # single corner pixel
        weights = WeightBundle({1: {"weight": weight, "bias": np.zeros(2)}})
        dataset = synthetic_dataset(32, h, w, 1, seed=404)
        provider = BuiltinModelProvider(spec, weights, dataset, rotation_set(4))
        rep = run_measure(RunConfig(provider=provider, batch_size=16), ["nv"])
        mean_nv = rep.measures["nv"][0].value
        corner_nv = rep.measures["nv"][1].value
        assert mean_nv <= 1e-9
        assert corner_nv > 0.1


def test_criterion_05_anova_calibration():
    with criterion(5, "ANOVA null rate ~ alpha; separated means always reject", 60.0):
        rng = np.random.default_rng(505)
        null_cube = rng.standard_normal((30, 30, 10_000))
        opts = M.MeasureOptions(anova_alpha=0.01, bonferroni=False)
        rate = float(np.nanmean(M.anova_measure(null_cube, opts).rejected))
        assert abs(rate - 0.01) <= 0.005
        # separated columns: 0 vs 10 with sigma = 0.01
        sep = np.zeros((3, 2, 100))
        sep[:, 1, :] = 10.0
        sep += 0.01 * rng.standard_normal(sep.shape)
        rejected = M.anova_measure(sep, opts).rejected
        assert np.all(rejected == 1.0)


def test_criterion_06_goodfellow_sanity():
    with criterion(6, "firing-rate ratio worked values and top-p mean", 5.0):
        rng = np.random.default_rng(606)
        identity = rng.standard_normal(400)
        invariant = np.tile(identity[:, None], (1, 25))
        res = M.goodfellow_measure(invariant)
        assert abs(res.gf[0] - 1.0) <= 1e-9
        only_identity = np.full((400, 25), -1e9)
        only_identity[:, 0] = identity
        res = M.goodfellow_measure(only_identity)
        assert abs(res.gf[0] - 0.04) <= 1e-9
        assert M.invp_aggregate([4.0, 1.0, 3.0, 2.0], 0.5) == 3.5


def test_criterion_07_activation_variance_bound():
    with criterion(7, "ReLU-family functions never raise variance", 30.0):
        rng = np.random.default_rng(707)
        distributions = []
        for _ in range(1000):
            kind = rng.integers(0, 3)
            size = int(rng.integers(8, 300))
            if kind == 0:
                distributions.append(rng.normal(rng.uniform(-3, 3), rng.uniform(0.1, 2), size))
            elif kind == 1:
                distributions.append(rng.uniform(-5, 5, size))
            else:
                distributions.append(
                    np.concatenate([rng.normal(-2, 0.4, size), rng.normal(2.5, 1.0, size)])
                )
        for name, alpha in (("relu", None), ("leaky-relu", 0.1), ("prelu", 0.5), ("elu", 1.0)):
            fn = M.make_checked_activation(name, alpha)
            report = M.check_variance_nonincreasing(fn, distributions)
            assert report.max_variance_violation <= 1e-12, name
            assert report.max_mean_violation <= 1e-12, name
            assert report.max_second_moment_violation <= 1e-12, name


def test_criterion_08_memory_budget(tmp_path):
    with criterion(8, "memory model and per-worker record retention", 30.0):
        assert estimate_memory(10**6, 8) == 32 * 10**6
        assert estimate_memory(10**7, 512) == 20480 * 10**6
        cube = np.random.default_rng(808).random((100, 100, 8))  # n*m = 10^4
        path = write_cube_dump(tmp_path / "big.stdump", cube)
        stats = RunStats()
        run_measure(RunConfig(provider=DumpProvider(path), batch_size=32),
                    ["nv", "nd"], stats=stats)
        assert stats.peak_retained <= 32


def test_criterion_09_convergence_analogue():
    with criterion(9, "errors shrink with dataset and transform sizes", 600.0):
        spec = simpleconv_spec((28, 28, 1), base_filters=4)
        weights = random_init(spec, seed=0)
        pool = synthetic_dataset(500, 28, 28, 1, seed=42)

        def run_cell(n, m):
            provider = BuiltinModelProvider(spec, weights, pool.take(n), rotation_set(m))
            return run_measure(RunConfig(provider=provider, batch_size=64), ["nv"])

        grid = convergence_study(run_cell, [24, 96, 384], [4, 8, 16, 24])
        sample_profile, transform_profile = grid.axis_profiles()
        assert np.all(np.diff(sample_profile) <= 1e-12), sample_profile
        assert np.all(np.diff(transform_profile) <= 1e-12), transform_profile
        # largest non-reference cell: full sample row, second-largest transforms
        assert grid.median_rel_error[-1, -2] < 0.15


def test_criterion_10_stability_analogue():
    with criterion(10, "per-layer means stable across initializations", 600.0):
        spec = simpleconv_spec((28, 28, 1), base_filters=4)
        pool = synthetic_dataset(96, 28, 28, 1, seed=42)
        reports = []
        for seed in range(5):
            provider = BuiltinModelProvider(spec, random_init(spec, seed), pool, rotation_set(8))
            reports.append(
                run_measure(RunConfig(provider=provider, batch_size=64, deterministic=True),
                            ["nv"])
            )
        layer_means = np.array(
            [[s.mean for s in layer_aggregate(r, "nv")] for r in reports]
        )
        cov = layer_means.std(axis=0, ddof=1) / np.abs(layer_means.mean(axis=0))
        assert np.all(cov < 0.5), cov

        # same-seed pair: distributions identical, so the test never rejects
        provider = BuiltinModelProvider(spec, random_init(spec, 0), pool, rotation_set(8))
        rep_again = run_measure(
            RunConfig(provider=provider, batch_size=32, deterministic=True), ["nv"]
        )
        rep_first = reports[0]
        for sl in _unit_slices(rep_first.manifest):
            groups = []
            for rep in (rep_first, rep_again):
                groups.append(np.array([
                    v.value for v in rep.measures["nv"][sl]
                    if v.value is not None and np.isfinite(v.value)
                ]))
            if any(len(g) < 2 for g in groups):
                continue
            res = anderson_darling_k_sample(groups, alpha=0.01, seed=10)
            assert not res.reject


def test_criterion_11_ad_calibration():
    with criterion(11, "permutation p-values calibrated; separation detected", 300.0):
        rng = np.random.default_rng(1111)
        rejections = 0
        trials = 1000
        for t in range(trials):
            groups = [rng.standard_normal(50) for _ in range(5)]
            res = anderson_darling_k_sample(groups, alpha=0.01, n_permutations=2000, seed=t)
            rejections += res.reject
        rate = rejections / trials
        assert abs(rate - 0.01) <= 0.01, rate
        far = anderson_darling_k_sample(
            [rng.normal(0, 1, 50), rng.normal(10, 1, 50)],
            alpha=0.01, n_permutations=2000, seed=7,
        )
        assert far.reject and far.p_value < 0.001


def test_criterion_12_format_golden(tmp_path):
    with criterion(12, "containers round-trip; corruption raises named errors", 1.0):
        # NNW: write -> read -> rewrite, byte-identical
        spec = simpleconv_spec((16, 16, 1), base_filters=2)
        weights = random_init(spec, seed=12)
        nnw_a, nnw_b = tmp_path / "a.nnw", tmp_path / "b.nnw"
        write_weights(nnw_a, spec, weights)
        spec2, weights2 = read_weights(nnw_a)
        write_weights(nnw_b, spec2, weights2)
        assert nnw_a.read_bytes() == nnw_b.read_bytes()

        # STDUMP: write -> read -> rewrite, byte-identical
        cube = np.random.default_rng(12).random((3, 2, 4)).astype(np.float32)
        dump_a = write_cube_dump(tmp_path / "a.stdump", cube)
        stream, manifest, shape = read_dump(dump_a)
        dump_b = tmp_path / "b.stdump"
        write_dump(dump_b, manifest, shape, (r.values for r in stream))
        assert dump_a.read_bytes() == dump_b.read_bytes()

        # corrupted magic and truncation raise the named errors
        bad = tmp_path / "bad.stdump"
        blob = bytearray(dump_a.read_bytes())
        blob[:4] = b"MDTS"
        bad.write_bytes(bytes(blob))
        with pytest.raises(FormatError) as err:
            read_dump(bad)
        assert err.value.code == "format-error"
        short = tmp_path / "short.stdump"
        short.write_bytes(dump_a.read_bytes()[:-4])
        with pytest.raises(TruncatedFileError) as err:
            read_dump(short)
        assert err.value.code == "truncated-file"
        bad_nnw = tmp_path / "bad.nnw"
        blob = bytearray(nnw_a.read_bytes())
        blob[:4] = b"1WNN"
        bad_nnw.write_bytes(bytes(blob))
        with pytest.raises(FormatError) as err:
            read_weights(bad_nnw)
        assert err.value.code == "format-error"
        short_nnw = tmp_path / "short.nnw"
        short_nnw.write_bytes(nnw_a.read_bytes()[:-10])
        with pytest.raises(TruncatedFileError) as err:
            read_weights(short_nnw)
        assert err.value.code == "truncated-file"
