"""Synthetic data generators and the PNG directory layout."""

import numpy as np
import pytest

from robustlab.datasets import (
    NUM_SHAPE_CLASSES,
    denoising_images,
    load_png_dataset,
    save_png_dataset,
    shape_classification_dataset,
)


class TestShapeDataset:
    def test_shapes_and_range(self):
        x, y = shape_classification_dataset(30, size=24, channels=1, seed=0)
        assert x.shape == (30, 1, 24, 24)
        assert y.shape == (30,)
        assert x.min() >= 0.0 and x.max() <= 1.0

    def test_labels_balanced(self):
        _, y = shape_classification_dataset(100, size=20, seed=1)
        counts = np.bincount(y, minlength=NUM_SHAPE_CLASSES)
        assert np.all(counts == 10)

    def test_deterministic(self):
        a, la = shape_classification_dataset(20, size=20, seed=5)
        b, lb = shape_classification_dataset(20, size=20, seed=5)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(la, lb)

    def test_seed_changes_content(self):
        a, _ = shape_classification_dataset(10, size=20, seed=5)
        b, _ = shape_classification_dataset(10, size=20, seed=6)
        assert np.abs(a - b).max() > 0.01

    def test_classes_visually_distinct(self):
        # Mean image per class should differ between classes; glyphs with
        # random pose must still leave a class signature.
        x, y = shape_classification_dataset(200, size=24, seed=2)
        means = np.stack([x[y == c].mean(axis=0) for c in range(NUM_SHAPE_CLASSES)])
        for a in range(NUM_SHAPE_CLASSES):
            for b in range(a + 1, NUM_SHAPE_CLASSES):
                assert np.abs(means[a] - means[b]).mean() > 0.005

    def test_rgb_channels(self):
        x, _ = shape_classification_dataset(6, size=16, channels=3, seed=0)
        assert x.shape[1] == 3


class TestDenoisingImages:
    def test_shape_range_determinism(self):
        a = denoising_images(5, size=32, channels=1, seed=3)
        b = denoising_images(5, size=32, channels=1, seed=3)
        assert a.shape == (5, 1, 32, 32)
        assert a.min() >= 0.0 and a.max() <= 1.0
        np.testing.assert_array_equal(a, b)

    def test_images_have_structure(self):
        imgs = denoising_images(4, size=32, seed=0)
        for img in imgs:
            assert img.std() > 0.01  # not constant


class TestPngRoundTrip:
    def test_grayscale_round_trip(self, tmp_path):
        imgs = denoising_images(3, size=16, channels=1, seed=1)
        save_png_dataset(tmp_path, "test", imgs)
        loaded = load_png_dataset(tmp_path, "test")
        assert loaded.shape == imgs.shape
        assert np.abs(loaded - imgs).max() <= 0.5 / 255 + 1e-9  # 8-bit quantization

    def test_rgb_round_trip(self, tmp_path):
        imgs = denoising_images(2, size=16, channels=3, seed=2)
        save_png_dataset(tmp_path, "train", imgs, names=["a", "b"])
        loaded = load_png_dataset(tmp_path, "train")
        assert loaded.shape == imgs.shape
        assert np.abs(loaded - imgs).max() <= 0.5 / 255 + 1e-9

    def test_missing_split_rejected(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_png_dataset(tmp_path, "nope")

    def test_malformed_shape_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            save_png_dataset(tmp_path, "x", np.zeros((2, 2, 8, 8)))
