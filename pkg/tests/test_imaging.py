from dataclasses import replace

import numpy as np
import pytest
from PIL import Image

from hierarchical_cxr.core.errors import ImagingError
from hierarchical_cxr.core.imaging import (
    MONOCHROME1,
    MONOCHROME2,
    PreprocessCache,
    RawImage,
    center_square_crop,
    invert_if_needed,
    load_raw_image,
    normalize,
    preprocess,
    resize_to_model,
)


class TestRawImage:

    def test_dimensions(self):
        img = RawImage(np.zeros((800, 1000), dtype=np.uint8))
        assert (img.width, img.height) == (1000, 800)
        assert img.max_value == 255

    def test_out_of_range_rejected(self):
        with pytest.raises(ImagingError):
            RawImage(np.full((4, 4), 300), bit_depth=8)

    def test_unknown_photometric(self):
        with pytest.raises(ImagingError):
            RawImage(np.zeros((4, 4)), photometric="RGB")

    def test_empty_rejected(self):
        with pytest.raises(ImagingError):
            RawImage(np.zeros((0, 4)))


class TestInvert:

    def test_eight_bit_endpoint(self):
        out = invert_if_needed(RawImage(np.zeros((2, 2), dtype=np.int64), MONOCHROME1, 8))
        assert np.all(out.pixels == 255)
        assert out.photometric == MONOCHROME2

    def test_twelve_bit(self):
        out = invert_if_needed(RawImage(np.full((3, 3), 1000), MONOCHROME1, 12))
        assert np.all(out.pixels == 3095)

    def test_monochrome2_untouched(self, rng):
        img = RawImage(rng.integers(0, 256, size=(5, 7)), MONOCHROME2, 8)
        assert invert_if_needed(img) is img

    def test_involution(self, rng):
        img = RawImage(rng.integers(0, 4096, size=(6, 6)), MONOCHROME1, 12)
        twice = invert_if_needed(replace(invert_if_needed(img), photometric=MONOCHROME1))
        assert np.array_equal(twice.pixels, img.pixels)


class TestCrop:

    def test_landscape_offset(self, rng):
        pixels = rng.integers(0, 256, size=(800, 1000))
        out = center_square_crop(RawImage(pixels))
        assert out.pixels.shape == (800, 800)
        assert np.array_equal(out.pixels, pixels[:, 100:900])

    def test_square_unchanged(self, rng):
        pixels = rng.integers(0, 256, size=(299, 299))
        assert np.array_equal(center_square_crop(RawImage(pixels)).pixels, pixels)

    def test_marker_position(self):
        pixels = np.zeros((480, 640), dtype=np.int64)
        pixels[240, 320] = 255
        out = center_square_crop(RawImage(pixels)).pixels
        assert out.shape == (480, 480)
        assert out[240, 240] == 255
        assert out.sum() == 255

    def test_portrait_floor_offset(self):
        pixels = np.arange(5 * 2).reshape(5, 2)
        out = center_square_crop(RawImage(pixels, bit_depth=8)).pixels
        assert np.array_equal(out, pixels[1:3])


class TestResize:

    def test_constant_stays_constant(self):
        out = resize_to_model(np.full((598, 598), 77.0))
        assert out.shape == (299, 299)
        assert np.all(out == 77.0)

    def test_model_size_identity(self, rng):
        pixels = rng.uniform(0, 255, size=(299, 299))
        assert np.array_equal(resize_to_model(pixels), pixels)

    def test_checkerboard_mean(self):
        board = np.array([[0.0, 1.0], [1.0, 0.0]])
        up = resize_to_model(board, size=8)
        down = resize_to_model(up, size=2)
        assert abs(up.mean() - board.mean()) < 1e-6
        assert abs(down.mean() - board.mean()) < 1e-6

    def test_values_within_input_range(self, rng):
        pixels = rng.uniform(10, 200, size=(640, 640))
        out = resize_to_model(pixels)
        assert out.min() >= pixels.min()
        assert out.max() <= pixels.max()

    def test_non_square_rejected(self):
        with pytest.raises(ImagingError):
            resize_to_model(np.zeros((10, 12)))


class TestNormalize:

    def test_constant_is_zero(self):
        assert np.all(normalize(np.full((8, 8), 5.0)) == 0.0)

    def test_two_values(self):
        arr = np.array([[0.0, 2.0], [2.0, 0.0]])
        assert np.array_equal(normalize(arr), np.array([[-1.0, 1.0], [1.0, -1.0]]))

    def test_random_moments(self, rng):
        out = normalize(rng.uniform(0, 4095, size=(299, 299)))
        assert abs(out.mean()) < 1e-5
        assert abs(out.std() - 1.0) < 1e-3

    def test_variance_mode(self):
        arr = np.array([[0.0, 4.0], [4.0, 0.0]])
        assert np.array_equal(normalize(arr, mode="variance"), np.array([[-0.5, 0.5], [0.5, -0.5]]))

    def test_unknown_mode(self):
        with pytest.raises(ImagingError):
            normalize(np.arange(4.0).reshape(2, 2), mode="minmax")


class TestPreprocess:

    def test_constant_square(self):
        out = preprocess(RawImage(np.full((299, 299), 128), MONOCHROME2, 8))
        assert out.shape == (299, 299)
        assert np.all(out == 0.0)

    def test_constant_monochrome1(self):
        out = preprocess(RawImage(np.full((299, 299), 128), MONOCHROME1, 8))
        assert np.all(out == 0.0)

    def test_deterministic(self, rng):
        img = RawImage(rng.integers(0, 4096, size=(800, 1000)), MONOCHROME2, 12)
        first = preprocess(img)
        assert first.shape == (299, 299)
        assert np.array_equal(first, preprocess(img))

    def test_affine_invariance(self, rng):
        pixels = rng.uniform(0, 100, size=(400, 450))
        base = preprocess(RawImage(pixels, MONOCHROME2, 12))
        shifted = preprocess(RawImage(3.0 * pixels + 50.0, MONOCHROME2, 12))
        assert np.max(np.abs(base - shifted)) < 1e-5

    def test_monochrome1_is_negated_monochrome2(self, rng):
        pixels = rng.integers(0, 256, size=(320, 300))
        plain = preprocess(RawImage(pixels, MONOCHROME2, 8))
        inverted = preprocess(RawImage(pixels, MONOCHROME1, 8))
        assert np.allclose(plain, -inverted, atol=1e-9)

    def test_custom_size(self, rng):
        out = preprocess(RawImage(rng.integers(0, 256, size=(100, 80))), size=32)
        assert out.shape == (32, 32)


class TestLoading:

    def test_eight_bit_png(self, tmp_path, rng):
        pixels = rng.integers(0, 256, size=(20, 30)).astype(np.uint8)
        Image.fromarray(pixels).save(tmp_path / "a.png")
        img = load_raw_image(tmp_path / "a.png", MONOCHROME1)
        assert img.bit_depth == 8
        assert img.photometric == MONOCHROME1
        assert np.array_equal(img.pixels, pixels)

    def test_sixteen_bit_png(self, tmp_path, rng):
        pixels = rng.integers(0, 4096, size=(16, 16)).astype(np.uint16)
        Image.fromarray(pixels).save(tmp_path / "b.png")
        img = load_raw_image(tmp_path / "b.png")
        assert img.bit_depth == 16
        assert np.array_equal(img.pixels, pixels)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ImagingError):
            load_raw_image(tmp_path / "missing.png")


def test_cache_computes_once(tmp_path):
    cache = PreprocessCache(tmp_path / "cache")
    calls = []

    def compute():
        calls.append(1)
        return np.ones((4, 4))

    first = cache.get_or_compute("img/1", compute)
    second = cache.get_or_compute("img/1", compute)
    assert len(calls) == 1
    assert np.array_equal(first, second)
    assert (cache.hits, cache.misses) == (1, 1)
    assert cache.path_for("img/1").name.startswith("img_1-")


def test_cache_ids_that_sanitize_alike_stay_apart(tmp_path):
    cache = PreprocessCache(tmp_path / "cache")
    cache.get_or_compute("a/b", lambda: np.zeros((2, 2)))
    second = cache.get_or_compute("a_b", lambda: np.ones((2, 2)))
    assert np.array_equal(second, np.ones((2, 2)))
    assert cache.path_for("a/b") != cache.path_for("a_b")
    assert (cache.hits, cache.misses) == (0, 2)


def test_cache_separates_preprocessing_settings(tmp_path):
    small = PreprocessCache.for_settings(tmp_path, size=4, mode="std", eps=1e-8)
    large = PreprocessCache.for_settings(tmp_path, size=8, mode="std", eps=1e-8)
    small.get_or_compute("x", lambda: np.zeros((4, 4)))
    arr = large.get_or_compute("x", lambda: np.zeros((8, 8)))
    assert arr.shape == (8, 8)
    assert large.misses == 1
    assert small.cache_dir != large.cache_dir


def test_cache_recomputes_on_shape_mismatch(tmp_path):
    PreprocessCache(tmp_path).get_or_compute("x", lambda: np.zeros((4, 4)))
    cache = PreprocessCache(tmp_path, shape=(8, 8))
    arr = cache.get_or_compute("x", lambda: np.ones((8, 8)))
    assert arr.shape == (8, 8)
    assert (cache.hits, cache.misses) == (0, 1)
    assert cache.get_or_compute("x", lambda: np.zeros((8, 8))).sum() == 64
