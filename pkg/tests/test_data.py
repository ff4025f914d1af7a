"""Datasets and augmentation."""

import numpy as np
import pytest

from templateconv.data import (
    Dataset,
    augment,
    load_cifar10_binary,
    make_synthetic_dataset,
)
from templateconv.errors import CheckpointError
from templateconv.tensor import Tensor4


class TestDataset:
    def test_label_count_must_match(self):
        with pytest.raises(CheckpointError):
            Dataset(Tensor4.zeros(3, 3, 4, 4), np.zeros(2, dtype=np.int64))


class TestSynthetic:
    def test_shapes_and_balanced_labels(self):
        ds = make_synthetic_dataset(4, 64, seed=0)
        assert ds.images.dims == (64, 3, 32, 32)
        assert ds.labels.shape == (64,)
        counts = np.bincount(ds.labels, minlength=4)
        assert counts.tolist() == [16, 16, 16, 16]

    def test_deterministic_per_seed(self):
        a = make_synthetic_dataset(3, 12, seed=5)
        b = make_synthetic_dataset(3, 12, seed=5)
        c = make_synthetic_dataset(3, 12, seed=6)
        np.testing.assert_array_equal(a.images.data, b.images.data)
        assert not np.allclose(a.images.data, c.images.data)

    def test_requires_at_least_two_classes(self):
        with pytest.raises(ValueError):
            make_synthetic_dataset(1, 8, seed=0)

    def test_custom_size(self):
        ds = make_synthetic_dataset(2, 4, seed=0, size=16)
        assert ds.images.dims == (4, 3, 16, 16)


class TestCifarLoader:
    def _write_records(self, path, labels, fill):
        recs = []
        for label, value in zip(labels, fill):
            rec = np.full(3073, value, dtype=np.uint8)
            rec[0] = label
            recs.append(rec)
        np.concatenate(recs).tofile(path)

    def test_reads_labels_and_standardizes(self, tmp_path):
        path = tmp_path / "batch.bin"
        self._write_records(path, [0, 3, 9, 1], [10, 100, 200, 50])
        ds = load_cifar10_binary(path)
        assert ds.labels.tolist() == [0, 3, 9, 1]
        assert ds.images.dims == (4, 3, 32, 32)
        np.testing.assert_allclose(ds.images.data.mean(axis=(0, 2, 3)), 0.0,
                                   atol=1e-10)

    def test_max_items(self, tmp_path):
        path = tmp_path / "batch.bin"
        self._write_records(path, [1, 2, 3], [1, 2, 3])
        ds = load_cifar10_binary(path, max_items=2)
        assert ds.labels.tolist() == [1, 2]

    def test_directory_layout(self, tmp_path):
        for i in range(1, 6):
            self._write_records(tmp_path / f"data_batch_{i}.bin", [i % 10], [i])
        ds = load_cifar10_binary(tmp_path, split="train")
        assert len(ds.labels) == 5

    def test_bad_record_size_raises(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"\x00" * 100)
        with pytest.raises(CheckpointError):
            load_cifar10_binary(path)

    def test_bad_label_raises(self, tmp_path):
        path = tmp_path / "bad.bin"
        self._write_records(path, [12], [1])
        with pytest.raises(CheckpointError):
            load_cifar10_binary(path)


class TestAugment:
    def test_all_flags_off_is_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 3, 8, 8))
        assert augment(x) is x

    def test_flip_reverses_some_rows(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(32, 1, 4, 4))
        out = augment(x, flip=True, rng=np.random.default_rng(2))
        flipped = np.array([np.allclose(out[i], x[i, :, :, ::-1])
                            for i in range(32)])
        same = np.array([np.allclose(out[i], x[i]) for i in range(32)])
        assert (flipped | same).all()
        assert flipped.any() and same.any()

    def test_crop_preserves_shape_and_content_window(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 2, 8, 8))
        out = augment(x, crop=True, rng=np.random.default_rng(4))
        assert out.shape == x.shape

    def test_rotate_preserves_center_pixel_energy(self):
        x = np.zeros((1, 1, 9, 9))
        x[0, 0, 4, 4] = 1.0
        out = augment(x, rotate=True, rng=np.random.default_rng(5))
        assert out[0, 0, 4, 4] == pytest.approx(1.0, abs=1e-10)

    def test_rotate_rejects_non_square(self):
        with pytest.raises(ValueError):
            augment(np.zeros((1, 1, 4, 6)), rotate=True,
                    rng=np.random.default_rng(6))

    def test_deterministic_with_seeded_rng(self):
        x = np.random.default_rng(7).normal(size=(4, 1, 6, 6))
        a = augment(x, flip=True, crop=True, rng=np.random.default_rng(8))
        b = augment(x, flip=True, crop=True, rng=np.random.default_rng(8))
        np.testing.assert_array_equal(a, b)
