import gzip
import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ugmpost.data import (DatasetError, DatasetSpec, bars_and_stripes, binarize, downsample,
                          load_dataset, parse_idx, read_idx, write_idx)


def mnist_dir(tmp_path, n_train=60, n_test=10):
    rng = np.random.default_rng(0)
    write_idx(tmp_path / "train-images-idx3-ubyte.gz", rng.integers(0, 256, (n_train, 28, 28)))
    write_idx(tmp_path / "t10k-images-idx3-ubyte", rng.integers(0, 256, (n_test, 28, 28)))
    return tmp_path


class TestIdx:
    def test_header_dims(self, tmp_path):
        arr = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
        write_idx(tmp_path / "x", arr)
        blob = (tmp_path / "x").read_bytes()
        assert struct.unpack(">IIII", blob[:16]) == (0x803, 2, 3, 4)
        np.testing.assert_array_equal(read_idx(tmp_path / "x"), arr)

    def test_labels(self, tmp_path):
        write_idx(tmp_path / "l.gz", np.array([1, 2, 3]))
        np.testing.assert_array_equal(read_idx(tmp_path / "l.gz"), [1, 2, 3])

    def test_bad_magic(self):
        with pytest.raises(DatasetError, match="magic"):
            parse_idx(struct.pack(">II", 0x804, 1) + b"\0")

    @pytest.mark.parametrize("blob", [b"\0\0", struct.pack(">I", 0x803) + b"\0\0\0\1"])
    def test_truncated_header(self, blob):
        with pytest.raises(DatasetError, match="truncated"):
            parse_idx(blob)

    def test_truncated_payload(self):
        with pytest.raises(DatasetError, match="truncated"):
            parse_idx(struct.pack(">IIII", 0x803, 2, 2, 2) + bytes(7))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetError):
            read_idx(tmp_path / "nope")


class TestPreprocessing:
    def test_threshold(self):
        np.testing.assert_array_equal(binarize(np.array([0.6, 0.5, 0.4])), [1.0, 0.0, 0.0])

    def test_stochastic_fixed_seed(self):
        x = np.full(1000, 0.3)
        a, b = binarize(x, "stochastic-fixed-seed", 1), binarize(x, "stochastic-fixed-seed", 1)
        np.testing.assert_array_equal(a, b)
        assert 0.25 < a.mean() < 0.35

    def test_downsample(self):
        img = np.arange(16.0).reshape(1, 4, 4)
        np.testing.assert_allclose(downsample(img, 2)[0], [[2.5, 4.5], [10.5, 12.5]])
        with pytest.raises(ValueError):
            downsample(np.zeros((1, 5, 5)), 2)

    def test_bars_and_stripes(self):
        bs = bars_and_stripes(4)
        assert len(bs) == 30 and len(np.unique(bs, axis=0)) == 30


class TestLoad:
    def test_spec_validation(self):
        with pytest.raises(ValueError):
            DatasetSpec(source="cifar")
        with pytest.raises(ValueError):
            DatasetSpec(binarization="otsu")
        with pytest.raises(ValueError):
            DatasetSpec(downsample=0)

    def test_mnist_idx(self, tmp_path):
        root = mnist_dir(tmp_path)
        s = load_dataset(DatasetSpec("mnist-idx", root=str(root), downsample=2, subset=20))
        assert s.train.shape == (20, 196) and s.valid.shape == (10, 196) and s.test.shape == (10, 196)
        assert set(np.unique(s.train)) <= {0.0, 1.0}

    def test_env_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv("UGM_DATA_DIR", str(mnist_dir(tmp_path)))
        assert load_dataset(DatasetSpec("mnist-idx")).train.shape[1] == 784

    def test_checksum(self, tmp_path):
        root = mnist_dir(tmp_path)
        good = hashlib.sha256((root / "train-images-idx3-ubyte.gz").read_bytes()).hexdigest()
        load_dataset(DatasetSpec("mnist-idx", root=str(root), sha256=good))
        with pytest.raises(DatasetError, match="checksum"):
            load_dataset(DatasetSpec("mnist-idx", root=str(root), sha256="0" * 64))

    def test_missing_root(self, monkeypatch):
        monkeypatch.delenv("UGM_DATA_DIR", raising=False)
        with pytest.raises(DatasetError):
            load_dataset(DatasetSpec("mnist-idx"))

    def test_omniglot(self, tmp_path):
        from scipy import io
        rng = np.random.default_rng(0)
        io.savemat(tmp_path / "chardata.mat", {"data": rng.random((784, 30)), "testdata": rng.random((784, 5))})
        s = load_dataset(DatasetSpec("omniglot-raw", root=str(tmp_path)))
        assert s.train.shape == (27, 784) and s.test.shape == (5, 784)

    def test_digits(self):
        s = load_dataset(DatasetSpec(subset=1000))
        assert s.train.shape == (1000, 64)
        assert set(np.unique(s.train)) == {0.0, 1.0}

    def test_synthetic_sources(self):
        s = load_dataset(DatasetSpec("synthetic-mixture", side=3, size=50))
        assert s.train.shape == (50, 9)
        b = load_dataset(DatasetSpec("synthetic-bars-stripes", side=3))
        assert b.train.shape == (14, 9)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=50), st.sampled_from(["threshold-0.5", "stochastic-fixed-seed"]))
def test_binarized_pixels_are_binary(xs, method):
    out = binarize(np.array(xs), method)
    assert set(np.unique(out)) <= {0.0, 1.0}
