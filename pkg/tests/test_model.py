"""Forward engine, weight init, and the binary container formats."""

import numpy as np
import pytest

from tmeasure.core import STShape
from tmeasure.errors import FormatError, ShapeError, TruncatedFileError
from tmeasure.model import (
    Activation,
    ActivationTapPolicy,
    Conv2d,
    Dense,
    Flatten,
    MaxPool2d,
    NetworkSpec,
    WeightBundle,
    build_manifest,
    forward_batch,
    forward_with_taps,
    random_init,
    read_dump,
    read_weights,
    simpleconv_spec,
    write_dump,
    write_weights,
)


def tap_count_oracle(spec, policy):
    """Shape arithmetic, independent of the manifest builder."""
    total = 0
    shape = spec.input_shape
    for idx, layer in enumerate(spec.layers):
        shape = spec.layer_shapes[idx]
        if isinstance(layer, Conv2d) and policy.post_conv:
            total += int(np.prod(shape))
        elif isinstance(layer, Activation) and policy.post_activation:
            total += int(np.prod(shape))
        elif isinstance(layer, MaxPool2d) and policy.post_pool:
            total += int(np.prod(shape))
        elif isinstance(layer, Dense) and policy.post_dense:
            total += int(np.prod(shape))
        elif isinstance(layer, Flatten) and not policy.exclude_reshapes:
            total += int(np.prod(shape))
    return total


class TestForward:
    def test_zero_weights_zero_taps(self):
        spec = NetworkSpec(
            [Conv2d(3), Activation("elu"), Flatten(), Dense(4)], input_shape=(6, 6, 1)
        )
        zeros = WeightBundle(
            {
                0: {"kernel": np.zeros((3, 3, 1, 3)), "bias": np.zeros(3)},
                3: {"weight": np.zeros((108, 4)), "bias": np.zeros(4)},
            }
        )
        values, _ = forward_with_taps(spec, zeros, np.random.default_rng(0).random((6, 6, 1)))
        assert np.all(values == 0.0)

    def test_dense_affine_arithmetic(self):
        spec = NetworkSpec([Flatten(), Dense(1)], input_shape=(1, 1, 1))
        weights = WeightBundle({1: {"weight": np.array([[2.0]]), "bias": np.array([1.0])}})
        values, manifest = forward_with_taps(spec, weights, np.array([[[3.0]]]))
        assert values.tolist() == [7.0]
        assert [e.name for e in manifest.entries] == ["dense1"]

    def test_manifest_counts_match_shape_arithmetic(self):
        spec = simpleconv_spec((28, 28, 1), base_filters=4)
        weights = random_init(spec, seed=0)
        for policy in (
            ActivationTapPolicy(),
            ActivationTapPolicy(post_conv=False),
            ActivationTapPolicy(post_pool=False, exclude_reshapes=False),
        ):
            manifest = build_manifest(spec, policy)
            assert manifest.cell_count == tap_count_oracle(spec, policy)
            values, _ = forward_with_taps(
                spec, weights, np.random.default_rng(1).random((28, 28, 1)), policy
            )
            assert values.size == manifest.cell_count

    def test_flatten_excluded_by_default(self):
        manifest = build_manifest(simpleconv_spec((28, 28, 1)))
        assert not any("flatten" in e.name for e in manifest.entries)

    def test_deterministic_and_batch_size_independent(self):
        spec = simpleconv_spec((16, 16, 1), base_filters=2)
        weights = random_init(spec, seed=5)
        x = np.random.default_rng(2).random((5, 16, 16, 1))
        whole = forward_batch(spec, weights, x)
        again = forward_batch(spec, weights, x)
        singles = np.concatenate([forward_batch(spec, weights, x[i : i + 1]) for i in range(5)])
        assert np.array_equal(whole, again)
        assert np.array_equal(whole, singles)

    def test_elu_definition(self):
        spec = NetworkSpec([Flatten(), Dense(1), Activation("elu")], input_shape=(1, 1, 1))
        weights = WeightBundle({1: {"weight": np.array([[1.0]]), "bias": np.array([0.0])}})
        neg, _ = forward_with_taps(spec, weights, np.array([[[-1.5]]]))
        assert abs(neg[1] - np.expm1(np.float32(-1.5))) < 1e-7  # alpha = 1 branch
        pos, _ = forward_with_taps(spec, weights, np.array([[[0.5]]]))
        assert pos[1] == pos[0]

    def test_shape_mismatch_rejected(self):
        spec = simpleconv_spec((16, 16, 1), base_filters=2)
        weights = random_init(spec, seed=0)
        with pytest.raises(ShapeError):
            forward_batch(spec, weights, np.zeros((1, 8, 8, 1)))

    def test_softmax_must_be_terminal(self):
        with pytest.raises(ShapeError):
            NetworkSpec(
                [Flatten(), Dense(2), Activation("softmax"), Dense(2)], input_shape=(2, 2, 1)
            )


class TestRandomInit:
    def test_same_seed_identical(self):
        spec = simpleconv_spec((16, 16, 1), base_filters=2)
        assert random_init(spec, 9) == random_init(spec, 9)

    def test_different_seeds_differ(self):
        spec = simpleconv_spec((16, 16, 1), base_filters=2)
        assert random_init(spec, 1) != random_init(spec, 2)

    def test_fan_in_bound(self):
        spec = simpleconv_spec((16, 16, 3), base_filters=4)
        bundle = random_init(spec, 0)
        for idx, shapes in spec.parameter_shapes().items():
            for name, shape in shapes.items():
                if name == "bias":
                    continue
                fan_in = int(np.prod(shape[:-1]))
                bound = np.sqrt(6.0 / fan_in)
                assert np.abs(bundle.params[idx][name]).max() <= bound


class TestNNW:
    def test_round_trip(self, tmp_path):
        spec = simpleconv_spec((16, 16, 1), base_filters=2)
        bundle = random_init(spec, 4)
        path = tmp_path / "m.nnw"
        write_weights(path, spec, bundle)
        spec2, bundle2 = read_weights(path)
        assert spec2.to_json_layers() == spec.to_json_layers()
        assert bundle2 == bundle

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.nnw"
        path.write_bytes(b"XXXX" + bytes(16))
        with pytest.raises(FormatError):
            read_weights(path)

    def test_truncated(self, tmp_path):
        spec = simpleconv_spec((16, 16, 1), base_filters=2)
        path = tmp_path / "m.nnw"
        write_weights(path, spec, random_init(spec, 0))
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 50])
        with pytest.raises(TruncatedFileError):
            read_weights(path)


class TestSTDump:
    def _manifest(self):
        from tmeasure.core import ActivationManifest, ManifestEntry

        return ActivationManifest(
            [
                ManifestEntry("a", 0, (2,), "scalar-vector"),
                ManifestEntry("b", 1, (1, 2, 1), "feature-map"),
            ]
        )

    def test_count_arithmetic(self, tmp_path):
        man = self._manifest()
        shape = STShape(2, 3, man.cell_count)
        rng = np.random.default_rng(0)
        records = [rng.random(4) for _ in range(6)]
        path = tmp_path / "d.stdump"
        write_dump(path, man, shape, records)
        stream, manifest, got_shape = read_dump(path)
        recs = list(stream)
        assert got_shape == shape
        assert len(recs) == 6
        assert all(r.values.size == 4 for r in recs)
        assert [(r.sample_index, r.transformation_index) for r in recs[:4]] == [
            (0, 0), (0, 1), (0, 2), (1, 0),
        ]

    def test_round_trip_values(self, tmp_path):
        man = self._manifest()
        shape = STShape(2, 2, man.cell_count)
        records = [np.random.default_rng(i).random(4).astype(np.float32) for i in range(4)]
        path = tmp_path / "d.stdump"
        write_dump(path, man, shape, records)
        stream, _, _ = read_dump(path)
        for rec, original in zip(stream, records):
            assert np.array_equal(rec.values, original.astype(np.float64))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.stdump"
        path.write_bytes(b"MDTS" + bytes(32))
        with pytest.raises(FormatError):
            read_dump(path)

    def test_truncation_detected(self, tmp_path):
        man = self._manifest()
        shape = STShape(2, 2, man.cell_count)
        path = tmp_path / "d.stdump"
        write_dump(path, man, shape, [np.zeros(4)] * 4)
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(TruncatedFileError):
            read_dump(path)
