import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qpvm.data import (
    DataError,
    Dataset,
    batch_iter,
    load_cifar,
    load_idx,
    one_hot,
    read_idx_images,
    subset,
    synthetic_dataset,
    write_idx,
)


def _hand_written_fixture(tmp_path):
    """Two 28x28 images written byte by byte, independent of write_idx."""
    pixels = np.zeros((2, 28, 28), dtype=np.uint8)
    pixels[0, 0, 0] = 255
    pixels[1, 27, 27] = 128
    pixels[1, 3, 5] = 7
    img = tmp_path / "img.idx"
    lab = tmp_path / "lab.idx"
    img.write_bytes(bytes([0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 28, 0, 0, 0, 28]) + pixels.tobytes())
    lab.write_bytes(bytes([0, 0, 8, 1, 0, 0, 0, 2, 7, 3]))
    return img, lab, pixels


class TestIdx:
    def test_hand_written_fixture(self, tmp_path):
        img, lab, pixels = _hand_written_fixture(tmp_path)
        ds = load_idx(img, lab, num_classes=10)
        assert ds.images.shape == (2, 28, 28, 1)
        np.testing.assert_array_equal(ds.labels, [7, 3])
        assert ds.images[0, 0, 0, 0] == 1.0
        assert ds.images[1, 27, 27, 0] == 128 / 255
        assert ds.images[0, 1, 1, 0] == 0.0
        np.testing.assert_array_equal(ds.images[..., 0], pixels / 255.0)

    def test_round_trip_gzip(self, tmp_path):
        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 256, (5, 6, 4), dtype=np.uint8)
        labels = [0, 1, 2, 1, 0]
        write_idx(tmp_path / "i.gz", tmp_path / "l.gz", pixels, labels)
        assert (tmp_path / "i.gz").read_bytes()[:2] == b"\x1f\x8b"
        ds = load_idx(tmp_path / "i.gz", tmp_path / "l.gz")
        assert ds.num_classes == 3
        np.testing.assert_array_equal(np.rint(ds.images[..., 0] * 255).astype(np.uint8), pixels)
        np.testing.assert_array_equal(ds.labels, labels)

    def test_dataset_round_trip_bit_identical(self, tmp_path):
        ds = load_idx(*_hand_written_fixture(tmp_path)[:2], num_classes=10)
        write_idx(tmp_path / "a", tmp_path / "b", ds.images[..., 0], ds.labels)
        again = load_idx(tmp_path / "a", tmp_path / "b", num_classes=10)
        np.testing.assert_array_equal(again.images, ds.images)

    def test_label_offset(self, tmp_path):
        write_idx(tmp_path / "i", tmp_path / "l", np.zeros((2, 2, 2), np.uint8), [1, 26])
        ds = load_idx(tmp_path / "i", tmp_path / "l", num_classes=26, label_offset=1)
        np.testing.assert_array_equal(ds.labels, [0, 25])

    def test_bad_magic(self, tmp_path):
        img, lab, _ = _hand_written_fixture(tmp_path)
        with pytest.raises(DataError, match="magic"):
            load_idx(lab, lab)
        with pytest.raises(DataError, match="magic"):
            load_idx(img, img)

    def test_truncated(self, tmp_path):
        img, lab, _ = _hand_written_fixture(tmp_path)
        img.write_bytes(img.read_bytes()[:-1])
        with pytest.raises(DataError, match="truncated"):
            read_idx_images(img)
        (tmp_path / "short").write_bytes(b"\x00\x00")
        with pytest.raises(DataError, match="truncated"):
            read_idx_images(tmp_path / "short")

    def test_count_mismatch(self, tmp_path):
        img, lab, _ = _hand_written_fixture(tmp_path)
        lab.write_bytes(bytes([0, 0, 8, 1, 0, 0, 0, 3, 1, 2, 3]))
        with pytest.raises(DataError, match="count mismatch"):
            load_idx(img, lab)


class TestCifar:
    def test_planar_layout(self, tmp_path):
        rec = np.zeros(3073, dtype=np.uint8)
        rec[0] = 6
        rec[1 + 0 * 1024 + 5] = 255  # R plane, row 0 col 5
        rec[1 + 2 * 1024 + 32 * 2 + 1] = 51  # B plane, row 2 col 1
        path = tmp_path / "batch.bin"
        path.write_bytes(rec.tobytes() + rec.tobytes())
        ds = load_cifar([path])
        assert ds.images.shape == (2, 32, 32, 3)
        assert ds.images[0, 0, 5, 0] == 1.0
        assert ds.images[0, 2, 1, 2] == 0.2
        assert ds.images.sum() == pytest.approx(2 * 1.2)
        np.testing.assert_array_equal(ds.labels, [6, 6])

    def test_bad_size(self, tmp_path):
        path = tmp_path / "x.bin"
        path.write_bytes(b"\x00" * 3000)
        with pytest.raises(DataError):
            load_cifar([path])


class TestOneHot:
    def test_examples(self):
        np.testing.assert_array_equal(one_hot(2, 4), [0, 0, 1, 0])
        np.testing.assert_array_equal(one_hot(0, 1), [1])

    def test_out_of_range(self):
        with pytest.raises(DataError):
            one_hot(4, 4)


class TestBatching:
    def _ds(self, n=10):
        return Dataset(np.arange(n, dtype=float).reshape(n, 1, 1, 1), np.arange(n) % 2, 2)

    def test_sizes(self):
        assert [len(b.labels) for b in batch_iter(self._ds(), 4)] == [4, 4, 2]

    def test_no_shuffle_keeps_order(self):
        flat = np.concatenate([b.images.ravel() for b in batch_iter(self._ds(), 3, shuffle=False)])
        np.testing.assert_array_equal(flat, np.arange(10))

    def test_seeded(self):
        a = [b.images.ravel().tolist() for b in batch_iter(self._ds(), 4, seed=3, epoch=1)]
        b = [b.images.ravel().tolist() for b in batch_iter(self._ds(), 4, seed=3, epoch=1)]
        c = [b.images.ravel().tolist() for b in batch_iter(self._ds(), 4, seed=3, epoch=2)]
        assert a == b and a != c
        assert sorted(sum(a, [])) == list(range(10))

    def test_onehot_batch(self):
        batch = next(batch_iter(self._ds(), 3, shuffle=False))
        np.testing.assert_array_equal(batch.onehot(2), [[1, 0], [0, 1], [1, 0]])

    def test_bad_batch_size(self):
        with pytest.raises(DataError):
            list(batch_iter(self._ds(), 0))


class TestSubset:
    def _ten_class(self):
        labels = np.repeat(np.arange(10), 5)
        return Dataset(np.zeros((50, 2, 2, 1)), labels, 10)

    def test_stratified(self):
        sub = subset(self._ten_class(), n_per_class=2, seed=1)
        assert len(sub) == 20
        np.testing.assert_array_equal(np.bincount(sub.labels), np.full(10, 2))

    def test_total_is_permutation(self):
        ds = Dataset(np.arange(8.0).reshape(8, 1, 1, 1), np.zeros(8, int), 1)
        sub = subset(ds, total=8, seed=0)
        np.testing.assert_array_equal(np.sort(sub.images.ravel()), np.arange(8.0))

    def test_insufficient(self):
        with pytest.raises(DataError):
            subset(self._ten_class(), n_per_class=6)
        with pytest.raises(DataError):
            subset(self._ten_class(), total=51)

    def test_exactly_one_mode(self):
        with pytest.raises(DataError):
            subset(self._ten_class())


class TestSynthetic:
    def test_corner_class_zero(self):
        ds = synthetic_dataset("corner_blobs", 40, image_dim=8, seed=0)
        for img in ds.images[ds.labels == 0, ..., 0]:
            assert img[:4, :4].mean() > img[4:, 4:].mean()

    @pytest.mark.parametrize("kind", ["corner_blobs", "bars_stripes"])
    def test_balanced_and_bounded(self, kind):
        ds = synthetic_dataset(kind, 100, num_classes=4, seed=2)
        np.testing.assert_array_equal(np.bincount(ds.labels), [25] * 4)
        assert ds.images.min() >= 0 and ds.images.max() <= 1

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=10, deadline=None)
    def test_seeded(self, seed):
        a = synthetic_dataset("bars_stripes", 12, seed=seed)
        b = synthetic_dataset("bars_stripes", 12, seed=seed)
        np.testing.assert_array_equal(a.images, b.images)

    def test_invalid(self):
        with pytest.raises(DataError):
            synthetic_dataset("spirals", 10)
        with pytest.raises(DataError):
            synthetic_dataset("corner_blobs", 10, num_classes=5)
        with pytest.raises(DataError):
            synthetic_dataset("corner_blobs", 10, image_dim=3)


def test_gzip_detection_ignores_suffix(tmp_path):
    raw = struct.pack(">II", 0x801, 2) + bytes([4, 5])
    (tmp_path / "labels.idx").write_bytes(gzip.compress(raw))
    write_idx(tmp_path / "img", tmp_path / "unused", np.zeros((2, 1, 1), np.uint8), [0, 0])
    ds = load_idx(tmp_path / "img", tmp_path / "labels.idx", num_classes=6)
    np.testing.assert_array_equal(ds.labels, [4, 5])
