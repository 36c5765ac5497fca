"""Datasets: MNIST IDX files, synthetic Gaussian classes, minibatch samplers."""

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ConsistencyError, DomainError, FormatError
from .tensor import RngStream

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MNIST_CLASSES = 10
DATA_DIR_ENV = "VARIGRAD_DATA_DIR"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    name: str = ""
    n_classes: int = 0

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.X.shape[0] == 0:
            raise ConsistencyError(f"X must be a non-empty N x D matrix, got {self.X.shape}")
        if self.y.shape != (self.X.shape[0],):
            raise ConsistencyError(f"{self.X.shape[0]} feature rows but {self.y.shape} labels")
        if not self.n_classes:
            self.n_classes = int(self.y.max()) + 1
        if self.y.min() < 0 or self.y.max() >= self.n_classes:
            raise ConsistencyError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(self.X)):
            raise ConsistencyError("features must be finite")

    @property
    def N(self):
        return self.X.shape[0]

    @property
    def D(self):
        return self.X.shape[1]

    @property
    def C(self):
        return self.n_classes

    def subset(self, indices, name=None):
        return Dataset(self.X[indices], self.y[indices], name or self.name, self.n_classes)

    def split(self, n_tail):
        """Split off the last ``n_tail`` rows, e.g. as a validation set."""
        if not 0 < n_tail < self.N:
            raise ConfigurationError(f"cannot split {n_tail} rows off a dataset of {self.N}")
        head = np.arange(self.N - n_tail)
        tail = np.arange(self.N - n_tail, self.N)
        return self.subset(head, self.name), self.subset(tail, self.name + ":tail")


def _read_idx(path, magic_expected, n_dims):
    with open(path, "rb") as f:
        head = f.read(4)
        if len(head) < 4:
            raise OSError(f"{path}: truncated IDX header")
        magic = struct.unpack(">I", head)[0]
        if magic != magic_expected:
            raise FormatError(f"{path}: bad IDX magic 0x{magic:08x} "
                              f"(expected 0x{magic_expected:08x})")
        raw = f.read(4 * n_dims)
        if len(raw) < 4 * n_dims:
            raise OSError(f"{path}: truncated IDX header")
        dims = struct.unpack(f">{n_dims}I", raw)
        count = int(np.prod(dims))
        body = f.read(count)
        if len(body) < count:
            raise OSError(f"{path}: truncated IDX body ({len(body)} of {count} bytes)")
    return dims, np.frombuffer(body, dtype=np.uint8)


def load_mnist_idx(images_path, labels_path, n_classes=MNIST_CLASSES):
    """Parse an IDX image/label pair; pixels are scaled to [0, 1]."""
    (n, rows, cols), pixels = _read_idx(images_path, IMAGE_MAGIC, 3)
    (n_labels,), labels = _read_idx(labels_path, LABEL_MAGIC, 1)
    if n != n_labels:
        raise ConsistencyError(f"{n} images but {n_labels} labels")
    if labels.size and labels.max() >= n_classes:
        raise ConsistencyError(f"label {int(labels.max())} outside [0, {n_classes})")
    X = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    return Dataset(X, labels.astype(np.int64), os.path.basename(str(images_path)), n_classes)


def write_idx_images(path, images):
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, labels.size))
        f.write(labels.tobytes())


def mnist_paths(split="train", data_dir=None):
    data_dir = data_dir or os.environ.get(DATA_DIR_ENV)
    if not data_dir:
        raise ConfigurationError(f"MNIST needs data_dir or ${DATA_DIR_ENV}", field="data_dir")
    images, labels = MNIST_FILES[split]
    return os.path.join(data_dir, images), os.path.join(data_dir, labels)


def synthetic_gaussian_classes(n_per_class, d, c, separation, seed, stream_id=0):
    """``c`` unit-covariance Gaussian clusters in ``d`` dimensions.

    Class k is centred at ``separation * e_k`` (``-separation * e_{k-d}`` once
    the positive axes run out). Rows are shuffled; output depends only on
    the arguments.
    """
    if n_per_class <= 0 or d <= 0 or c <= 0:
        raise DomainError("n_per_class, d and c must be positive")
    if c > 2 * d:
        raise DomainError(f"at most 2*d = {2 * d} axis-aligned classes fit in d = {d}")
    rng = RngStream(seed, stream_id)
    n = n_per_class * c
    means = np.zeros((c, d))
    for k in range(c):
        means[k, k % d] = separation if k < d else -separation
    y = np.repeat(np.arange(c), n_per_class)
    X = means[y] + rng.normal((n, d))
    order = rng.permutation(n)
    return Dataset(X[order], y[order], f"gauss-{c}x{d}-sep{separation:g}", c)


class MinibatchSampler:
    """Draws index minibatches of size ``M`` from ``N`` points.

    With replacement: i.i.d. uniform indices. Without: consecutive slices of
    a per-epoch permutation (the last slice of an epoch may be short),
    reshuffled at each epoch boundary.
    """

    def __init__(self, N, M, rng, with_replacement=True):
        if M < 1:
            raise ConfigurationError("minibatch size must be positive", field="M")
        if not with_replacement and M > N:
            raise ConfigurationError(f"M={M} exceeds N={N} without replacement", field="M")
        self.N = N
        self.M = M
        self.rng = rng
        self.with_replacement = with_replacement
        self._perm = None
        self._pos = 0
        self.epoch = 0

    def next_indices(self):
        if self.with_replacement:
            return self.rng.integers(self.N, self.M)
        if self._perm is None or self._pos >= self.N:
            if self._perm is not None:
                self.epoch += 1
            self._perm = self.rng.permutation(self.N)
            self._pos = 0
        idx = self._perm[self._pos:self._pos + self.M]
        self._pos += self.M
        return idx


def next_batch(sampler, dataset):
    idx = sampler.next_indices()
    return dataset.X[idx], dataset.y[idx], idx
