"""Datasets: 2D cluster generators, MNIST IDX reader, semi-supervised splits."""

from __future__ import annotations

import csv
import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import ConfigurationError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
LAYOUTS = ("two_moons", "gaussian_ring", "gaussian_blobs")
DATA_DIR_ENV = "FATSSL_DATA_DIR"


class IdxFormatError(ValueError):
    def __init__(self, path, field_name, detail):
        super().__init__(f"{path}: bad {field_name}: {detail}")
        self.path = str(path)
        self.field = field_name


@dataclass
class Normalization:
    """Stored X = (raw - shift) / scale, per feature."""

    shift: np.ndarray
    scale: np.ndarray

    def apply(self, raw):
        return (np.asarray(raw, dtype=np.float64) - self.shift) / self.scale

    def invert(self, X):
        return np.asarray(X, dtype=np.float64) * self.scale + self.shift


@dataclass
class SslDataset:
    labeled_X: np.ndarray
    labeled_y: np.ndarray
    unlabeled_X: np.ndarray
    val_X: np.ndarray
    val_y: np.ndarray
    test_X: np.ndarray
    test_y: np.ndarray
    n_classes: int
    normalization: Normalization
    # index bookkeeping into the source pool, per split
    record: dict = field(default_factory=dict)
    description: str = ""

    @property
    def input_dim(self) -> int:
        return self.unlabeled_X.shape[1]

    def diameter(self) -> float:
        """Length of the bounding-box diagonal of the unlabeled inputs."""
        span = self.unlabeled_X.max(axis=0) - self.unlabeled_X.min(axis=0)
        return float(np.linalg.norm(span))


def _two_moons(rng, counts, spread):
    parts = []
    for k, n in enumerate(counts):
        t = rng.uniform(0.0, np.pi, n)
        if k == 0:
            pts = np.column_stack([np.cos(t), np.sin(t)])
        else:
            pts = np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
        parts.append(pts + rng.normal(0.0, spread, (n, 2)))
    return parts


def _ring(rng, counts, spread):
    parts = []
    for k, n in enumerate(counts):
        t = rng.uniform(0.0, 2 * np.pi, n)
        r = (k + 1) + rng.normal(0.0, spread, n)
        parts.append(np.column_stack([r * np.cos(t), r * np.sin(t)]))
    return parts


def _blobs(rng, counts, spread):
    K = len(counts)
    parts = []
    for k, n in enumerate(counts):
        angle = 2 * np.pi * k / K + np.pi / 2
        center = 2.0 * np.array([np.cos(angle), np.sin(angle)])
        parts.append(center + rng.normal(0.0, spread, (n, 2)))
    return parts


_GENERATORS = {"two_moons": _two_moons, "gaussian_ring": _ring, "gaussian_blobs": _blobs}


def _draw(rng, layout, K, n, spread):
    counts = [n // K + (1 if k < n % K else 0) for k in range(K)]
    parts = _GENERATORS[layout](rng, counts, spread)
    X = np.concatenate(parts)
    y = np.concatenate([np.full(c, k) for k, c in enumerate(counts)])
    order = rng.permutation(n)
    return X[order], y[order]


def make_clusters(n_classes, n_unlabeled, n_labeled_per_class, spread, layout="two_moons",
                  seed=0, n_validation=200) -> SslDataset:
    """2D data obeying the cluster assumption.

    Labeled points are drawn per class from the unlabeled pool and stay in it.
    The test split is the unlabeled pool with its hidden labels, so test
    accuracy is accuracy on the unlabeled data. Validation is a fresh draw.
    """
    if layout not in LAYOUTS:
        raise ConfigurationError(f"unknown layout {layout!r}")
    if n_classes < 2 or n_unlabeled < 1 or n_labeled_per_class < 1 or spread <= 0:
        raise ConfigurationError("cluster parameters must be positive (and K >= 2)")
    if layout == "two_moons" and n_classes != 2:
        raise ConfigurationError("two_moons has exactly two classes")
    if n_labeled_per_class * n_classes > n_unlabeled:
        raise ConfigurationError("more labeled points requested than the pool holds")
    rng = np.random.default_rng(seed)
    X, y = _draw(rng, layout, n_classes, n_unlabeled, spread)
    lab_idx = np.concatenate([
        rng.choice(np.flatnonzero(y == k), n_labeled_per_class, replace=False)
        for k in range(n_classes)
    ])
    if n_validation > 0:
        val_X, val_y = _draw(rng, layout, n_classes, n_validation, spread)
    else:
        val_X, val_y = np.empty((0, 2)), np.empty(0, dtype=int)
    d = 2
    return SslDataset(
        labeled_X=X[lab_idx], labeled_y=y[lab_idx], unlabeled_X=X,
        val_X=val_X, val_y=val_y, test_X=X, test_y=y, n_classes=n_classes,
        normalization=Normalization(np.zeros(d), np.ones(d)),
        record={"labeled": lab_idx, "unlabeled": np.arange(n_unlabeled),
                "labeled_within_unlabeled": True},
        description=f"{layout} K={n_classes} n={n_unlabeled} labeled/class={n_labeled_per_class} "
                    f"spread={spread} seed={seed}",
    )


def _read_idx(path, magic, ndims):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise IdxFormatError(path, "file", str(exc)) from exc
    if len(raw) < 4:
        raise IdxFormatError(path, "magic", "file shorter than 4 bytes")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxFormatError(path, "magic", f"expected 0x{magic:08x}, found 0x{found:08x}")
    header = 4 + 4 * ndims
    if len(raw) < header:
        raise IdxFormatError(path, "dimensions", "header truncated")
    dims = struct.unpack(f">{ndims}I", raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header != expected:
        raise IdxFormatError(path, "payload",
                             f"expected {expected} bytes for dims {dims}, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path):
    """Read an IDX image/label pair. Returns (X in [0,1] as n x pixels, y)."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(labels_path, "count",
                             f"{labels.shape[0]} labels for {images.shape[0]} images")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return X, labels.astype(np.int64)


def write_idx(images, labels, images_path, labels_path) -> None:
    """Write uint8 images (n x rows x cols) and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def _find(directory, stem):
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        p = Path(directory) / name
        if p.exists():
            return p
    raise FileNotFoundError(f"no {stem}[.gz] under {directory}")


def mnist_dir(explicit=None):
    """Resolve the MNIST directory from an explicit path or the environment; None if unset."""
    d = explicit or os.environ.get(DATA_DIR_ENV)
    return Path(d) if d else None


def load_mnist(directory):
    """Returns ((train_X, train_y), (test_X, test_y)) from the four standard IDX files."""
    train = load_idx(_find(directory, "train-images-idx3-ubyte"),
                     _find(directory, "train-labels-idx1-ubyte"))
    test = load_idx(_find(directory, "t10k-images-idx3-ubyte"),
                    _find(directory, "t10k-labels-idx1-ubyte"))
    return train, test


def ssl_split(X, y, n_labeled, n_validation, seed=0, *, n_unlabeled=None, test=None,
              normalization=None, description="") -> SslDataset:
    """Class-balanced labeled draw, held-out validation, the rest unlabeled.

    All three splits are disjoint. ``n_unlabeled`` caps the unlabeled set;
    points beyond the cap are discarded. ``test`` is an optional (X, y) pair.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    classes = np.unique(y)
    K = int(classes.max()) + 1 if len(classes) else 0
    if n_labeled < K or n_labeled % K:
        raise ConfigurationError(f"n_labeled={n_labeled} must be a positive multiple of K={K}")
    if n_labeled + n_validation > n:
        raise ConfigurationError(f"n_labeled + n_validation exceeds {n} points")
    rng = np.random.default_rng(seed)
    per = n_labeled // K
    lab_idx = []
    for k in range(K):
        pool = np.flatnonzero(y == k)
        if len(pool) < per:
            raise ConfigurationError(f"class {k} has only {len(pool)} points, need {per}")
        lab_idx.append(rng.choice(pool, per, replace=False))
    lab_idx = np.sort(np.concatenate(lab_idx))
    rest = np.setdiff1d(np.arange(n), lab_idx)
    rest = rest[rng.permutation(len(rest))]
    val_idx = np.sort(rest[:n_validation])
    unl_idx = rest[n_validation:]
    if n_unlabeled is not None:
        unl_idx = unl_idx[:n_unlabeled]
    unl_idx = np.sort(unl_idx)
    if test is None:
        test_X, test_y = np.empty((0, X.shape[1])), np.empty(0, dtype=np.int64)
    else:
        test_X, test_y = np.asarray(test[0], dtype=np.float64), np.asarray(test[1], dtype=np.int64)
    d = X.shape[1]
    return SslDataset(
        labeled_X=X[lab_idx], labeled_y=y[lab_idx], unlabeled_X=X[unl_idx],
        val_X=X[val_idx], val_y=y[val_idx], test_X=test_X, test_y=test_y, n_classes=K,
        normalization=normalization or Normalization(np.zeros(d), np.ones(d)),
        record={"labeled": lab_idx, "validation": val_idx, "unlabeled": unl_idx},
        description=description,
    )


def export_csv(ds: SslDataset, path) -> None:
    """Write 2D points as x1,x2,label_or_-1 (labeled rows first)."""
    if ds.input_dim != 2:
        raise ConfigurationError("CSV export is for 2D datasets")
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x1", "x2", "label_or_-1"])
        for x, lab in zip(ds.labeled_X, ds.labeled_y):
            w.writerow([repr(float(x[0])), repr(float(x[1])), int(lab)])
        labeled = set(np.asarray(ds.record.get("labeled", []), dtype=int).tolist())
        for i, x in enumerate(ds.unlabeled_X):
            if ds.record.get("labeled_within_unlabeled") and i in labeled:
                continue
            w.writerow([repr(float(x[0])), repr(float(x[1])), -1])
