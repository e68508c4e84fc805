"""Datasets, small-file ingestion and context-point distributions."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CONTEXT_KINDS = ("train-inputs", "train-corrupted", "external-dataset", "uniform-box", "fixed-batches")

# per-level magnitudes: noise standard deviation / erased fraction
DEFAULT_MAGNITUDES = {
    "gaussian-noise": (0.05, 0.1, 0.2, 0.35, 0.5),
    "random-erasure": (0.1, 0.2, 0.3, 0.4, 0.5),
}


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    split: str = "train"
    n_classes: int | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be N x D, got shape {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError(f"{self.inputs.shape[0]} inputs but labels of shape {self.labels.shape}")
        if self.split not in ("train", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx, name: str | None = None) -> Dataset:
        return Dataset(self.inputs[idx], self.labels[idx], name or self.name, self.split, self.n_classes)


# ---------------------------------------------------------------------------
# generators


def gen_two_moons(n: int = 500, noise_sd: float = 0.1, seed: int = 0, label_noise: float = 0.0) -> Dataset:
    """Two interleaved half circles with isotropic Gaussian noise.

    Class 0 lies on the upper unit semicircle centred at the origin, class 1
    on the reflected semicircle centred at (1, 0.5). ``label_noise`` is the
    fraction of labels flipped to the other class.
    """
    if n < 2 or n % 2:
        raise ValueError(f"n must be even and >= 2, got {n}")
    if noise_sd < 0:
        raise ValueError("noise_sd must be nonnegative")
    if not 0 <= label_noise <= 1:
        raise ValueError("label_noise must lie in [0, 1]")
    half = n // 2
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, np.pi, half)
    upper = np.column_stack([np.cos(t), np.sin(t)])
    lower = np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
    x = np.vstack([upper, lower])
    y = np.repeat([0, 1], half)
    if noise_sd > 0:
        x = x + rng.normal(0.0, noise_sd, size=x.shape)
    if label_noise > 0:
        flip = rng.choice(n, size=int(round(label_noise * n)), replace=False)
        y[flip] = 1 - y[flip]
    return Dataset(x, y, "two-moons", n_classes=2)


def gen_gaussian_blobs(n: int, centers, sd: float = 1.0, seed: int = 0, name: str = "blobs") -> Dataset:
    """Point ``i`` is drawn around ``centers[i % C]`` and labelled ``i % C``."""
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if sd < 0:
        raise ValueError("sd must be nonnegative")
    rng = np.random.default_rng(seed)
    y = np.arange(n) % len(centers)
    x = centers[y] + (rng.normal(0.0, sd, size=(n, centers.shape[1])) if sd > 0 else 0.0)
    return Dataset(x, y, name, n_classes=len(centers))


# ---------------------------------------------------------------------------
# ingestion


def _open_maybe_gzip(path: Path) -> bytes:
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _read_idx(path: Path, magic: int) -> np.ndarray:
    buf = _open_maybe_gzip(path)
    if len(buf) < 8:
        raise DataFormatError(f"{path}: file too short for an IDX header ({len(buf)} bytes)")
    (found,) = struct.unpack_from(">I", buf, 0)
    if found != magic:
        raise DataFormatError(f"{path}: magic 0x{found:08x} at offset 0, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise DataFormatError(f"{path}: truncated header, expected {header} bytes")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    count = int(np.prod(dims))
    if len(buf) - header != count:
        raise DataFormatError(f"{path}: payload at offset {header} has {len(buf) - header} bytes, expected {count}")
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def _load_csv(path: Path, n_classes: int | None) -> Dataset:
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    d = len(header) - 1
    if d < 1 or header[-1] != "label" or header[:-1] != [f"x{i}" for i in range(d)]:
        raise DataFormatError(f"{path}:1: malformed header {header}, expected x0,...,x{{D-1}},label")
    body = [r for r in rows[1:] if r]
    if not body:
        raise DataFormatError(f"{path}: no data rows")
    x = np.empty((len(body), d))
    y = np.empty(len(body), dtype=np.int64)
    for i, row in enumerate(body):
        lineno = i + 2
        if len(row) != d + 1:
            raise DataFormatError(f"{path}:{lineno}: expected {d + 1} fields, found {len(row)}")
        try:
            x[i] = [float(v) for v in row[:-1]]
            label = float(row[-1])
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
        if label != int(label) or label < 0 or (n_classes is not None and label >= n_classes):
            raise DataFormatError(f"{path}:{lineno}: label {row[-1]} out of range")
        y[i] = int(label)
    return Dataset(x, y, path.stem, n_classes=n_classes)


def load_tabular(path, format: str = "csv-labeled", labels_path=None, n_classes: int | None = None) -> Dataset:
    """Read a labelled dataset.

    ``csv-labeled`` expects a header ``x0,...,x{D-1},label`` and takes values
    verbatim. ``idx-pair`` reads an IDX image file (``path``) and its label
    file (``labels_path``), flattening images and scaling bytes to [0, 1].
    Gzipped IDX files are accepted.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if format == "csv-labeled":
        return _load_csv(path, n_classes)
    if format != "idx-pair":
        raise ValueError(f"unknown format {format!r}")
    if labels_path is None:
        raise ValueError("idx-pair needs labels_path")
    images = _read_idx(path, IDX_IMAGES_MAGIC)
    labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC).astype(np.int64)
    if len(labels) != len(images):
        raise DataFormatError(f"{len(images)} images but {len(labels)} labels")
    if n_classes is not None and len(labels) and labels.max() >= n_classes:
        bad = int(np.argmax(labels >= n_classes))
        raise DataFormatError(f"{labels_path}: label {labels[bad]} at offset {8 + bad} out of range")
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(x, labels, path.stem, n_classes=n_classes)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array in IDX layout (images are 3-D, labels 1-D)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def write_csv(path, dataset: Dataset) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(dataset.input_dim)] + ["label"])
        for xi, yi in zip(dataset.inputs, dataset.labels):
            w.writerow([repr(float(v)) for v in xi] + [int(yi)])


# ---------------------------------------------------------------------------
# corruptions and context distributions


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str = "gaussian-noise"
    level: int = 3
    magnitudes: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in DEFAULT_MAGNITUDES:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        table = self.table
        if len(table) != 5 or any(b <= a for a, b in zip(table, table[1:])) or min(table) < 0:
            raise ValueError(f"magnitudes must be 5 nonnegative, strictly increasing values: {table}")
        if self.kind == "random-erasure" and max(table) > 1:
            raise ValueError("erasure fractions must not exceed 1")
        if self.level not in range(1, 6):
            raise ValueError(f"level must be in 1..5, got {self.level}")

    @property
    def table(self) -> tuple[float, ...]:
        return tuple(self.magnitudes) if self.magnitudes is not None else DEFAULT_MAGNITUDES[self.kind]

    @property
    def magnitude(self) -> float:
        return self.table[self.level - 1]


def corrupt(x, spec: CorruptionSpec, seed: int) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    m = spec.magnitude
    if spec.kind == "gaussian-noise":
        return x + rng.normal(0.0, m, size=x.shape) if m > 0 else x
    n_erase = int(round(m * x.shape[1]))
    for row in x:
        row[rng.choice(x.shape[1], size=n_erase, replace=False)] = 0.0
    return x


@dataclass
class ContextDistribution:
    """Sampling rule for context points.

    ``fixed-batches`` is a finite-support distribution: each draw returns one
    of ``batches`` verbatim, chosen uniformly.
    """

    kind: str
    source: Dataset | None = None
    low: np.ndarray | None = None
    high: np.ndarray | None = None
    corruption: CorruptionSpec | None = None
    batches: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in CONTEXT_KINDS:
            raise ValueError(f"unknown context kind {self.kind!r}")
        if self.kind == "uniform-box":
            if self.low is None or self.high is None:
                raise ValueError("uniform-box needs low and high bounds")
            self.low = np.asarray(self.low, dtype=np.float64).ravel()
            self.high = np.asarray(self.high, dtype=np.float64).ravel()
            if self.low.shape != self.high.shape or not np.all(np.isfinite(self.low) & np.isfinite(self.high)):
                raise ValueError("box bounds must be finite and of equal length")
            if np.any(self.low >= self.high):
                raise ValueError("box bounds need low < high in every dimension")
        elif self.kind == "fixed-batches":
            self.batches = [np.asarray(b, dtype=np.float64) for b in self.batches]
        if self.kind == "train-corrupted" and self.corruption is None:
            self.corruption = CorruptionSpec()

    @classmethod
    def train_inputs(cls, dataset: Dataset) -> ContextDistribution:
        return cls("train-inputs", source=dataset)

    @classmethod
    def train_corrupted(cls, dataset: Dataset, corruption: CorruptionSpec | None = None) -> ContextDistribution:
        return cls("train-corrupted", source=dataset, corruption=corruption)

    @classmethod
    def external(cls, dataset: Dataset) -> ContextDistribution:
        return cls("external-dataset", source=dataset)

    @classmethod
    def uniform_box(cls, low, high) -> ContextDistribution:
        return cls("uniform-box", low=low, high=high)

    @classmethod
    def fixed(cls, *batches) -> ContextDistribution:
        return cls("fixed-batches", batches=list(batches))

    @property
    def input_dim(self) -> int:
        if self.kind == "uniform-box":
            return len(self.low)
        if self.kind == "fixed-batches":
            return self.batches[0].shape[1]
        return self.source.input_dim


def sample_context(dist: ContextDistribution, m: int | None, seed: int) -> np.ndarray:
    """Draw an ``m x D`` batch of context points."""
    rng = np.random.default_rng(seed)
    if dist.kind == "fixed-batches":
        if not dist.batches:
            raise ValueError("context distribution has no batches")
        batch = dist.batches[rng.integers(len(dist.batches))]
        return batch
    if m is None or m < 1:
        raise ValueError(f"context batch size must be >= 1, got {m}")
    if dist.kind == "uniform-box":
        return dist.low + (dist.high - dist.low) * rng.random((m, len(dist.low)))
    if dist.source is None or len(dist.source) == 0:
        raise ValueError(f"{dist.kind} context distribution has an empty source")
    n = len(dist.source)
    idx = rng.choice(n, size=m, replace=m > n)
    x = dist.source.inputs[idx]
    if dist.corruption is not None:
        x = corrupt(x, dist.corruption, int(rng.integers(2**63)))
    return x


def minibatches(dataset: Dataset, batch_size: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded permutation of ``dataset`` cut into consecutive batches."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    return [
        (dataset.inputs[perm[i : i + batch_size]], dataset.labels[perm[i : i + batch_size]])
        for i in range(0, len(dataset), batch_size)
    ]


def take_fraction(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Seeded subsample keeping ``round(fraction * N)`` points (at least one)."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if fraction == 1:
        return dataset
    n = max(1, int(round(fraction * len(dataset))))
    idx = np.sort(np.random.default_rng(seed).choice(len(dataset), size=n, replace=False))
    return dataset.subset(idx)


def bounding_box(inputs: np.ndarray, margin: float) -> tuple[np.ndarray, np.ndarray]:
    return inputs.min(axis=0) - margin, inputs.max(axis=0) + margin

