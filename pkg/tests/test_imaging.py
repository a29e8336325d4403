import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sketchbridge.errors import (
    BadConfig,
    CoincidentLandmarks,
    InvalidImage,
    OddDimensions,
    OutOfBounds,
)
from sketchbridge.imaging import (
    AugmentConfig,
    AugmentParams,
    Image,
    Landmarks,
    align_face,
    apply_augment,
    augment,
    canonical_eyes,
    downsample2x,
    eye_alignment_transform,
    hflip,
    load_landmarks,
    read_png,
    resize_bilinear,
    save_landmarks,
    write_png,
)


def random_image(rng, h=32, w=32, tag="sketch"):
    return Image(rng.random((h, w)), tag)


class TestImage:
    def test_rejects_out_of_range(self):
        with pytest.raises(InvalidImage):
            Image(np.full((8, 8), 1.5), "sketch")

    def test_rejects_tiny(self):
        with pytest.raises(InvalidImage):
            Image(np.zeros((7, 8)), "sketch")

    def test_rejects_unknown_tag(self):
        with pytest.raises(InvalidImage):
            Image(np.zeros((8, 8)), "painting")

    def test_pixels_are_a_readonly_copy(self, rng):
        src = rng.random((8, 8))
        im = Image(src, "photo")
        src[0, 0] = 0.5
        assert im.pixels[0, 0] != 0.5 or src[0, 0] == im.pixels[0, 0]
        with pytest.raises(ValueError):
            im.pixels[0, 0] = 0.0

    def test_domain_tag_immutable(self, rng):
        im = random_image(rng)
        with pytest.raises(AttributeError):
            im.domain_tag = "photo"

    def test_png_round_trip_quantizes_to_8_bits(self, rng, tmp_path):
        im = random_image(rng, 16, 12)
        back = read_png(write_png(im, tmp_path / "a.png"), "sketch")
        assert back.shape == im.shape
        assert np.max(np.abs(back.pixels - im.pixels)) <= 0.5 / 255 + 1e-12

    def test_rgb_png_round_trip(self, rng, tmp_path):
        im = Image(rng.random((10, 9, 3)), "photo")
        back = read_png(write_png(im, tmp_path / "c.png"), "photo")
        assert back.channels == 3


class TestAlignment:
    def test_identity_when_eyes_are_canonical(self, rng):
        size = 40
        le, re = canonical_eyes(size)
        im = random_image(rng, size, size, "photo")
        out = align_face(im, Landmarks(le, re), size)
        np.testing.assert_allclose(out.pixels, im.pixels, atol=1e-12)

    def test_vertical_eyes_map_to_canonical(self):
        lm = Landmarks((10.0, 20.0), (30.0, 20.0))
        t = eye_alignment_transform(lm, 64)
        mapped = t.apply([lm.left_eye, lm.right_eye])
        np.testing.assert_allclose(mapped, np.array(canonical_eyes(64)), atol=0.5)

    def test_coincident(self):
        with pytest.raises(CoincidentLandmarks):
            Landmarks((5, 5), (5, 5))

    def test_out_of_bounds(self, rng):
        with pytest.raises(OutOfBounds):
            align_face(random_image(rng, 16, 16), Landmarks((2, 2), (2, 40)), 16)

    def test_white_fill_outside_frame(self):
        im = Image(np.zeros((32, 32)), "photo")
        # eyes far apart -> the face shrinks, the output corners sample outside it
        out = align_face(im, Landmarks((16, 1), (16, 30)), 32)
        assert out.pixels[0, 0] == 1.0

    def test_landmark_json_round_trip(self, tmp_path):
        lm = Landmarks((1.5, 2.0), (3.0, 9.25))
        save_landmarks(lm, tmp_path / "lm.json")
        assert json.loads((tmp_path / "lm.json").read_text())["left_eye"] == [1.5, 2.0]
        assert load_landmarks(tmp_path / "lm.json") == lm

    @settings(max_examples=50, deadline=None)
    @given(st.floats(2, 60), st.floats(2, 60), st.floats(2, 60), st.floats(2, 60))
    def test_canonical_positions_property(self, r1, c1, r2, c2):
        if abs(r1 - r2) + abs(c1 - c2) < 1e-3:
            return
        lm = Landmarks((r1, c1), (r2, c2))
        mapped = eye_alignment_transform(lm, 64).apply([lm.left_eye, lm.right_eye])
        np.testing.assert_allclose(mapped, np.array(canonical_eyes(64)), atol=0.5)


class TestAugment:
    def test_bad_config(self):
        with pytest.raises(BadConfig):
            AugmentConfig(resize_to=10, crop_to=12)

    def test_pinned_draw_is_top_left_crop(self, rng):
        cfg = AugmentConfig(resize_to=40, crop_to=32)
        im = random_image(rng, 32, 32)
        out = apply_augment(im, cfg, AugmentParams(0, 0, False))
        expect = resize_bilinear(im.pixels, 40)[:32, :32]
        assert np.array_equal(out.pixels, expect)

    def test_shape_and_range(self, rng):
        cfg = AugmentConfig(resize_to=36, crop_to=32, seed=3)
        for seed in range(5):
            out = augment(random_image(rng, 32, 32), cfg, np.random.default_rng(seed))
            assert out.shape == (32, 32)
            assert 0.0 <= out.pixels.min() and out.pixels.max() <= 1.0

    def test_flip_involution(self, rng):
        im = random_image(rng)
        assert hflip(hflip(im)) == im

    def test_seeded_call_is_pure(self, rng):
        cfg = AugmentConfig(resize_to=36, crop_to=32, seed=9)
        im = random_image(rng, 32, 32)
        assert augment(im, cfg) == augment(im, cfg)


class TestDownsample:
    def test_halves(self):
        assert downsample2x(Image(np.zeros((512, 512)), "sketch")).shape == (256, 256)

    def test_constant(self):
        out = downsample2x(Image(np.full((16, 16), 0.3), "sketch"))
        assert np.all(out.pixels == 0.3)

    def test_hand_computed_block(self):
        out = downsample2x(np.array([[0.0, 0.2], [0.4, 1.0]]))
        assert out.shape == (1, 1)
        assert out[0, 0] == pytest.approx(0.4, abs=1e-15)

    def test_odd(self):
        with pytest.raises(OddDimensions):
            downsample2x(Image(np.zeros((9, 8)), "sketch"))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(4, 16), st.integers(4, 16), st.integers(0, 2**32 - 1))
    def test_mean_preserved(self, hh, hw, seed):
        px = np.random.default_rng(seed).random((2 * hh, 2 * hw))
        assert downsample2x(px).mean() == pytest.approx(px.mean(), abs=1e-12)
