"""Transformation set builders and image resampling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmeasure import transforms as T
from tmeasure.errors import FormatError, ImageTooSmallError


def gradient_image(h=28, w=28, c=1):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = 0.3 * yy / (h - 1) + 0.7 * xx / (w - 1)
    return np.repeat(img[:, :, None], c, axis=2)


class TestBuilders:
    def test_rotation_four(self):
        angles = [t.rotation_degrees for t in T.rotation_set(4)]
        assert angles == [0.0, 90.0, 180.0, 270.0]

    def test_rotation_twentyfive(self):
        rs = T.rotation_set(25)
        assert len(rs) == 25
        steps = np.diff([t.rotation_degrees for t in rs])
        assert np.allclose(steps, 14.4)

    def test_rotation_identity_only(self):
        rs = T.rotation_set(1)
        assert len(rs) == 1 and rs[0].is_identity

    def test_scale_counts(self):
        assert len(T.scale_set(8)) == 25
        assert len(T.scale_set(1)) == 4

    def test_scale_factors_inside_open_interval(self):
        for t in T.scale_set(8):
            for s in (t.scale_h, t.scale_w):
                assert 0.5 < s < 1.25 or s == 1.0

    def test_scale_aspect_variants(self):
        ss = T.scale_set(1)
        combos = {(t.scale_h, t.scale_w) for t in ss}
        s = [t for t in ss if not t.is_identity][0].scale_w
        assert (1.0, 1.0) in combos and len(combos) == 4

    def test_translation_counts_and_offsets(self):
        ts = T.translation_set([0.05, 0.10, 0.15])
        assert len(ts) == 25
        ts1 = T.translation_set([0.1])
        assert len(ts1) == 9
        offsets = {(t.translate_h_fraction, t.translate_w_fraction) for t in ts1}
        assert (0.0, 0.1) in offsets and (-0.1, -0.1) in offsets

    def test_translation_factor_range(self):
        with pytest.raises(ValueError):
            T.translation_set([0.6])
        with pytest.raises(ValueError):
            T.translation_set([0.0])

    @given(st.integers(1, 40))
    @settings(max_examples=30, deadline=None)
    def test_identity_always_first(self, m):
        for ts in (T.rotation_set(m), T.scale_set(m)):
            assert ts[0].is_identity
            assert ts.identity_index == 0
            assert sum(t.is_identity for t in ts) == 1

    @given(st.integers(1, 30))
    @settings(max_examples=30, deadline=None)
    def test_builder_cardinalities(self, count):
        assert len(T.rotation_set(count)) == count
        assert len(T.scale_set(count)) == 3 * count + 1
        factors = [0.05 + 0.01 * i for i in range(count % 6 + 1)]
        assert len(T.translation_set(factors)) == 8 * len(factors) + 1


class TestApply:
    def test_identity_bit_identical(self):
        img = np.random.default_rng(0).random((16, 16, 3))
        assert np.array_equal(T.apply(T.IDENTITY, img), img)

    def test_deterministic(self):
        img = np.random.default_rng(1).random((12, 12, 1))
        t = T.AffineTransform(rotation_degrees=33.0, scale_h=0.8, scale_w=1.1,
                              translate_h_fraction=0.07, translate_w_fraction=-0.03)
        assert np.array_equal(T.apply(t, img), T.apply(t, img))

    def test_quarter_turns_close_the_group(self):
        img = np.random.default_rng(2).random((10, 10, 2))
        out = img
        for _ in range(4):
            out = T.apply(T.AffineTransform(rotation_degrees=90.0), out)
        assert np.array_equal(out, img)

    def test_quarter_turn_is_pixel_permutation(self):
        img = np.random.default_rng(3).random((8, 8, 1))
        out = T.apply(T.AffineTransform(rotation_degrees=270.0), img)
        assert np.array_equal(np.sort(out.ravel()), np.sort(img.ravel()))

    def test_integer_translation_shifts_exactly(self):
        img = np.random.default_rng(4).random((10, 10, 1))
        t = T.AffineTransform(translate_h_fraction=0.2, translate_w_fraction=0.0)
        out = T.apply(t, img)
        assert np.array_equal(out[2:, :], img[:-2, :])
        assert np.all(out[:2, :] == 0.0)

    def test_scale_round_trip_on_gradient(self):
        img = gradient_image()
        s = 0.7
        down = T.apply(T.AffineTransform(scale_h=s, scale_w=s), img)
        back = T.apply(T.AffineTransform(scale_h=1 / s, scale_w=1 / s), down)
        crop = slice(7, 21)  # central 50%
        mae = np.abs(back[crop, crop] - img[crop, crop]).mean()
        assert mae < 0.02 * (img.max() - img.min())

    def test_downscale_uses_reflection_not_zero(self):
        img = np.ones((12, 12, 1))
        out = T.apply(T.AffineTransform(scale_h=0.5, scale_w=0.5), img)
        # constant image under reflection fill stays constant; zero fill would not
        assert np.allclose(out, 1.0)

    def test_rotation_fills_corners_with_zero(self):
        img = np.ones((21, 21, 1))
        out = T.apply(T.AffineTransform(rotation_degrees=45.0), img)
        assert out[0, 0, 0] == 0.0 and out[-1, -1, 0] == 0.0

    def test_general_path_matches_fast_path_at_quarter_turn(self):
        img = gradient_image(16, 16)
        fast = T.apply(T.AffineTransform(rotation_degrees=90.0), img)
        general = T.apply(T.AffineTransform(rotation_degrees=90.0 + 1e-9), img)
        assert np.abs(fast - general).max() < 1e-6

    def test_too_small_rejected(self):
        with pytest.raises(ImageTooSmallError):
            T.apply(T.IDENTITY, np.ones((1, 5, 1)))


class TestGrammar:
    def test_rotation_spec(self):
        ts = T.parse_transform_spec("rotation:25")
        assert len(ts) == 25 and ts.label == "rotation:25"

    def test_scale_spec(self):
        assert len(T.parse_transform_spec("scale:8")) == 25

    def test_translation_spec(self):
        assert len(T.parse_transform_spec("translation:0.05,0.1,0.15")) == 25

    def test_file_spec(self, tmp_path):
        path = tmp_path / "set.txt"
        path.write_text(
            "rot=0 sh=1 sw=1 th=0 tw=0\n"
            "rot=45\n"
            "sh=0.8 sw=0.8\n"
            "# comment\n"
            "th=0.1 tw=-0.1\n"
        )
        ts = T.parse_transform_spec(f"file:{path}")
        assert len(ts) == 4
        assert ts[1].rotation_degrees == 45.0

    def test_file_without_identity_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("rot=45\n")
        with pytest.raises(ValueError):
            T.parse_transform_spec(f"file:{path}")

    def test_file_bad_token(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("rot=0 bogus=1\n")
        with pytest.raises(FormatError):
            T.parse_transform_spec(f"file:{path}")

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            T.parse_transform_spec("shear:3")
