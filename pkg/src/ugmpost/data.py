"""Binary image datasets: IDX files, bundled digits and synthetic sources."""
from __future__ import annotations

import gzip
import hashlib
import itertools
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ugm import make_bit_mixture

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801

SOURCES = ("mnist-idx", "omniglot-raw", "synthetic-bars-stripes", "synthetic-mixture",
           "sklearn-digits")
BINARIZATIONS = ("threshold-0.5", "stochastic-fixed-seed")


class DatasetError(ValueError):
    """Malformed or missing dataset files."""


@dataclass
class DatasetSpec:
    """Where the images come from and how they are preprocessed.

    ``subset`` keeps the first ``subset`` training rows; ``downsample``
    averages ``k x k`` pixel blocks before binarization.  ``root`` defaults to
    the ``UGM_DATA_DIR`` environment variable.  ``sha256`` optionally pins the
    training image file.
    """

    source: str = "sklearn-digits"
    binarization: str = "threshold-0.5"
    subset: int | None = None
    downsample: int = 1
    root: str | None = None
    seed: int = 0
    side: int = 4
    components: int = 3
    size: int = 1000
    sha256: str | None = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if self.binarization not in BINARIZATIONS:
            raise ValueError(f"unknown binarization {self.binarization!r}")
        if self.downsample < 1:
            raise ValueError("downsample factor must be >= 1")


@dataclass
class Splits:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing file {path}")
    raw = path.read_bytes()
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


def parse_idx(blob: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX image (``0x803``) or label (``0x801``) blob."""
    if len(blob) < 4:
        raise DatasetError("truncated IDX header")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise DatasetError(f"bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(blob) < head:
        raise DatasetError("truncated IDX header")
    dims = struct.unpack(f">{ndim}I", blob[4:head])
    count = int(np.prod(dims))
    if len(blob) - head < count:
        raise DatasetError(f"truncated IDX payload: need {count} bytes, have {len(blob) - head}")
    return np.frombuffer(blob, np.uint8, count, head).reshape(dims)


def read_idx(path) -> np.ndarray:
    return parse_idx(_read_bytes(path))


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (3-d arrays as images, 1-d as labels)."""
    array = np.asarray(array, dtype=np.uint8)
    if array.ndim not in (1, 3):
        raise ValueError("IDX writer supports 1-d labels and 3-d images")
    magic = IDX_IMAGES if array.ndim == 3 else IDX_LABELS
    blob = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    Path(path).write_bytes(gzip.compress(blob) if str(path).endswith(".gz") else blob)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def binarize(x: np.ndarray, method: str = "threshold-0.5", seed: int = 0) -> np.ndarray:
    """Map intensities in [0, 1] to {0, 1}.

    ``threshold-0.5`` sets pixels strictly above 0.5; ``stochastic-fixed-seed``
    draws ``Bernoulli(x)`` once with a fixed seed.
    """
    x = np.asarray(x, dtype=np.float64)
    if method == "threshold-0.5":
        return (x > 0.5).astype(np.float64)
    if method == "stochastic-fixed-seed":
        return (np.random.default_rng(seed).random(x.shape) < x).astype(np.float64)
    raise ValueError(f"unknown binarization {method!r}")


def downsample(images: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping ``factor x factor`` blocks of ``(n, h, w)`` images."""
    if factor == 1:
        return images
    n, h, w = images.shape
    if h % factor or w % factor:
        raise ValueError(f"image size {h}x{w} is not divisible by {factor}")
    return images.reshape(n, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def bars_and_stripes(side: int = 4) -> np.ndarray:
    """All distinct bars-and-stripes patterns, flattened (``2 * 2**side - 2`` rows)."""
    out = set()
    for bits in itertools.product((0, 1), repeat=side):
        rows = np.repeat(np.array(bits)[:, None], side, axis=1)
        out.add(tuple(rows.reshape(-1)))
        out.add(tuple(rows.T.reshape(-1)))
    return np.array(sorted(out), dtype=np.float64)


# ---------------------------------------------------------------------------
# sources
# ---------------------------------------------------------------------------

def _data_root(spec: DatasetSpec) -> Path:
    root = spec.root or os.environ.get("UGM_DATA_DIR")
    if not root:
        raise DatasetError("no dataset root: set UGM_DATA_DIR or DatasetSpec.root")
    return Path(root)


def _find(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (root / name).exists():
            return root / name
    raise DatasetError(f"missing {stem} under {root}")


def _check_sha(path: Path, expected: str | None) -> None:
    if expected is None:
        return
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    if digest != expected.lower():
        raise DatasetError(f"checksum mismatch for {path.name}")


def _mnist(spec: DatasetSpec):
    root = _data_root(spec)
    train_path = _find(root, "train-images-idx3-ubyte")
    _check_sha(train_path, spec.sha256)
    train = read_idx(train_path).astype(np.float64) / 255.0
    test = read_idx(_find(root, "t10k-images-idx3-ubyte")).astype(np.float64) / 255.0
    n_valid = min(10_000, len(train) // 6)
    return train[:-n_valid], train[-n_valid:], test


def _omniglot(spec: DatasetSpec):
    """``chardata.mat`` with ``data`` / ``testdata`` arrays of 784 x N (column-major images)."""
    from scipy import io

    root = _data_root(spec)
    path = root / "chardata.mat"
    if not path.exists():
        raise DatasetError(f"missing {path}")
    _check_sha(path, spec.sha256)
    mat = io.loadmat(path)
    train = mat["data"].T.reshape(-1, 28, 28, order="F").astype(np.float64)
    test = mat["testdata"].T.reshape(-1, 28, 28, order="F").astype(np.float64)
    n_valid = max(1, len(train) // 10)
    return train[:-n_valid], train[-n_valid:], test


def _digits(spec: DatasetSpec):
    """The 1797 8x8 digits bundled with scikit-learn, intensities scaled to [0, 1]."""
    from sklearn.datasets import load_digits

    images = load_digits().images / 16.0
    return images[:1297], images[1297:1547], images[1547:]


def load_dataset(spec: DatasetSpec) -> Splits:
    """Train/valid/test arrays of flattened binary images."""
    if spec.source == "synthetic-bars-stripes":
        patterns = bars_and_stripes(spec.side)
        rng = np.random.default_rng(spec.seed)
        n = spec.subset or len(patterns)
        draw = lambda k: patterns[rng.integers(0, len(patterns), k)]
        train = patterns if spec.subset is None else draw(n)
        return Splits(train, draw(max(1, n // 5)), draw(max(1, n // 5)))
    if spec.source == "synthetic-mixture":
        rng = np.random.default_rng(spec.seed)
        mix = make_bit_mixture(spec.side * spec.side, spec.components, rng)
        n = spec.subset or spec.size

        def draw(k):
            comp = rng.choice(len(mix.weights), size=k, p=mix.weights)
            probs = 1.0 / (1.0 + np.exp(-mix.logits[comp]))
            return (rng.random(probs.shape) < probs).astype(np.float64)

        return Splits(draw(n), draw(max(1, n // 5)), draw(max(1, n // 5)))
    loader = {"mnist-idx": _mnist, "omniglot-raw": _omniglot, "sklearn-digits": _digits}[spec.source]
    parts = loader(spec)
    out = []
    for k, imgs in enumerate(parts):
        imgs = downsample(imgs, spec.downsample)
        flat = imgs.reshape(len(imgs), -1)
        out.append(binarize(flat, spec.binarization, spec.seed + k))
    train = out[0] if spec.subset is None else out[0][:spec.subset]
    return Splits(train, out[1], out[2])
