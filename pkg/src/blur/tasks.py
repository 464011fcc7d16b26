"""Classification tasks: toy 2-D generators, IDX image datasets and batch streams.

Every stream is an infinite iterator of :class:`TaskBatch` objects and is
fully determined by its seed.  A :class:`Task` bundles a training stream
and a disjoint evaluation stream for the inner loop.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    ConfigurationError,
    IdxCountMismatchError,
    IdxFormatError,
    IdxTruncatedError,
    ValidationError,
)

IDX_IMAGES_MAGIC = 0x00000803  # 2051
IDX_LABELS_MAGIC = 0x00000801  # 2049

BOOLEAN_OPS = {
    "and": lambda a, b: a & b,
    "or": lambda a, b: a | b,
    "xor": lambda a, b: a ^ b,
    "nand": lambda a, b: 1 - (a & b),
    "nor": lambda a, b: 1 - (a | b),
    "xnor": lambda a, b: 1 - (a ^ b),
}
# jittered corners are clipped to this box
BOOLEAN_RANGE = (-2.0, 2.0)


@dataclass(frozen=True)
class TaskBatch:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.inputs.ndim != 2:
            raise ValidationError("inputs must be a (batch, dim) matrix")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValidationError("labels must have one entry per input row")
        if not np.all(np.isfinite(self.inputs)):
            raise ValidationError("inputs contain non-finite values")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError("labels outside [0, num_classes)")

    def __len__(self):
        return self.inputs.shape[0]

    def scaled(self, factor):
        return TaskBatch(self.inputs * factor, self.labels, self.num_classes)


@dataclass
class Dataset:
    inputs: np.ndarray          # (N, dim) float
    labels: np.ndarray          # (N,) int
    num_classes: int

    def __len__(self):
        return len(self.labels)


@dataclass
class RawDataset:
    images: np.ndarray          # (N, H, W) uint8
    labels: np.ndarray          # (N,) uint8


# -- balanced label helper -----------------------------------------------------

def _balanced_labels(rng, n, num_classes):
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    return labels


# -- toy generators ------------------------------------------------------------

def boolean_corners(op):
    """The four noiseless corners and their labels for a Boolean operator."""
    if op not in BOOLEAN_OPS:
        raise ValidationError(f"unknown Boolean operator {op!r}")
    bits = np.array([[1, 1], [1, 0], [0, 1], [0, 0]])
    corners = np.where(bits == 1, 1.0, -1.0)
    labels = BOOLEAN_OPS[op](bits[:, 0], bits[:, 1])
    return corners, labels


def gen_boolean(op: str, n: int, noise: float, seed: int) -> Iterator[TaskBatch]:
    """Batches of ``n`` jittered corners of {-1, 1}^2 labelled by ``op``.

    A bit is 1 where the coordinate is positive.  Classes are balanced
    within each batch; corners are uniform within a class.
    """
    corners, corner_labels = boolean_corners(op)
    by_class = [np.flatnonzero(corner_labels == c) for c in (0, 1)]
    rng = np.random.default_rng(seed)
    while True:
        labels = _balanced_labels(rng, n, 2)
        idx = np.empty(n, dtype=np.int64)
        for c in (0, 1):
            mask = labels == c
            idx[mask] = rng.choice(by_class[c], size=int(mask.sum()))
        x = corners[idx] + noise * rng.standard_normal((n, 2))
        yield TaskBatch(np.clip(x, *BOOLEAN_RANGE), labels.astype(np.int64), 2)


def gen_moons(n: int, noise: float, seed: int) -> Iterator[TaskBatch]:
    """Two interleaved half circles, rescaled from [-1, 2] x [-0.5, 1] to [-1, 1]^2."""
    rng = np.random.default_rng(seed)
    while True:
        labels = _balanced_labels(rng, n, 2)
        t = rng.uniform(0.0, np.pi, size=n)
        x = np.where(labels == 0, np.cos(t), 1.0 - np.cos(t))
        y = np.where(labels == 0, np.sin(t), 0.5 - np.sin(t))
        pts = np.stack([x, y], axis=1) + noise * rng.standard_normal((n, 2))
        pts = (pts - np.array([0.5, 0.25])) / np.array([1.5, 0.75])
        yield TaskBatch(np.clip(pts, -1.0, 1.0), labels.astype(np.int64), 2)


def blob_centers(num_classes: int, centers_seed: int = 0, box: float = 0.7) -> np.ndarray:
    return np.random.default_rng(centers_seed).uniform(-box, box, size=(num_classes, 2))


def gen_blobs(n: int, num_classes: int = 5, seed: int = 0, cluster_std: float = 0.1,
              centers: Optional[np.ndarray] = None, centers_seed: int = 0) -> Iterator[TaskBatch]:
    """Isotropic Gaussian clusters inside [-1, 1]^2.

    Centers are fixed by ``centers_seed`` (the task identity) and shared by
    all streams of the same task; ``seed`` only drives the sampling.
    """
    if centers is None:
        centers = blob_centers(num_classes, centers_seed)
    centers = np.asarray(centers, dtype=np.float64)
    num_classes = len(centers)
    rng = np.random.default_rng(seed)
    while True:
        labels = _balanced_labels(rng, n, num_classes)
        pts = centers[labels] + cluster_std * rng.standard_normal((n, 2))
        yield TaskBatch(np.clip(pts, -1.0, 1.0), labels.astype(np.int64), num_classes)


# -- IDX files -------------------------------------------------------------------

def _open(path, mode="rb"):
    path = Path(path)
    if path.suffix == ".gz":
        # mtime=0 keeps written archives byte-identical across runs
        return gzip.GzipFile(path, mode, mtime=0) if "w" in mode else gzip.open(path, mode)
    return open(path, mode)


def _read_idx(path, magic, ndim):
    with _open(path) as fh:
        data = fh.read()
    header = 4 + 4 * ndim
    if len(data) < 4:
        raise IdxTruncatedError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise IdxFormatError(f"{path}: bad magic number {found:#010x}, expected {magic:#010x}")
    if len(data) < header:
        raise IdxTruncatedError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, data[4:header])
    count = int(np.prod(dims))
    if len(data) - header < count:
        raise IdxTruncatedError(
            f"{path}: payload has {len(data) - header} bytes, header promises {count}"
        )
    arr = np.frombuffer(data, dtype=np.uint8, count=count, offset=header)
    return arr.reshape(dims)


def idx_load(images_path, labels_path) -> RawDataset:
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    return RawDataset(images.copy(), labels.copy())


def idx_write(images_path, labels_path, images, labels):
    """Write uint8 arrays in IDX format (used for fixtures and data conversion)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with _open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with _open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


# -- preprocessing -----------------------------------------------------------------

def _box_matrix(src, dst):
    """(dst, src) averaging matrix with fractional overlaps."""
    scale = src / dst
    m = np.zeros((dst, src))
    for o in range(dst):
        lo, hi = o * scale, (o + 1) * scale
        for i in range(int(np.floor(lo)), min(src, int(np.ceil(hi)))):
            m[o, i] = max(0.0, min(hi, i + 1) - max(lo, i))
    return m / scale


def preprocess(raw: RawDataset, crop: int, resize: int,
               pixel_range: Tuple[float, float] = (-1.0, 1.0)) -> Dataset:
    """Center crop, box-average downsample, map pixels to ``pixel_range``, flatten."""
    n, h, w = raw.images.shape
    if not 1 <= crop <= min(h, w):
        raise ConfigurationError(f"crop {crop} does not fit {h}x{w} images")
    if not 1 <= resize <= crop:
        raise ConfigurationError(f"resize {resize} must lie in [1, crop]")
    top, left = (h - crop) // 2, (w - crop) // 2
    img = raw.images[:, top:top + crop, left:left + crop].astype(np.float64) / 255.0
    if resize != crop:
        r = _box_matrix(crop, resize)
        img = np.einsum("oi,nij,pj->nop", r, img, r)
    lo, hi = pixel_range
    img = lo + (hi - lo) * img
    labels = raw.labels.astype(np.int64)
    num_classes = int(labels.max()) + 1 if labels.size else 0
    return Dataset(img.reshape(n, resize * resize), labels, num_classes)


def class_subset(dataset: Dataset, classes: Sequence[int]) -> Dataset:
    """Keep only ``classes``; relabel them 0..len(classes)-1 in the given order."""
    classes = [int(c) for c in classes]
    if not classes:
        raise ConfigurationError("class subset must not be empty")
    if len(set(classes)) != len(classes):
        raise ConfigurationError("class subset has duplicates")
    lookup = np.full(max(max(classes), int(dataset.labels.max())) + 1, -1, dtype=np.int64)
    lookup[classes] = np.arange(len(classes))
    new = lookup[dataset.labels]
    keep = new >= 0
    return Dataset(dataset.inputs[keep], new[keep], len(classes))


def batch_stream(dataset: Dataset, batch_size: int = 128, seed: int = 0) -> Iterator[TaskBatch]:
    """Shuffled fixed-size batches; each epoch is a fresh permutation.

    Batches straddle epoch boundaries rather than coming up short, so every
    sample appears exactly once per epoch and every batch is full.
    """
    if batch_size < 1:
        raise ConfigurationError("batch_size must be positive")
    n = len(dataset)
    if n == 0:
        raise ConfigurationError("cannot stream an empty dataset")
    rng = np.random.default_rng(seed)
    buf = np.empty(0, dtype=np.int64)
    while True:
        while buf.size < batch_size:
            buf = np.concatenate([buf, rng.permutation(n)])
        idx, buf = buf[:batch_size], buf[batch_size:]
        yield TaskBatch(dataset.inputs[idx], dataset.labels[idx], dataset.num_classes)


# -- tasks -------------------------------------------------------------------------

@dataclass
class Task:
    """A named task producing independent train and eval streams.

    Toy tasks sample fresh points for both streams; dataset tasks stream the
    train split for learning and the eval split (or the train split under
    another seed when no eval split exists) for evaluation.
    """

    name: str
    kind: str
    input_dim: int
    num_classes: int
    params: dict = field(default_factory=dict)
    train_data: Optional[Dataset] = None
    eval_data: Optional[Dataset] = None

    def streams(self, batch_size: int, seed: int, input_scale: float = 1.0):
        train = self._stream(batch_size, 2 * seed, self.train_data)
        evals = self._stream(batch_size, 2 * seed + 1,
                             self.eval_data if self.eval_data is not None else self.train_data)
        if input_scale != 1.0:
            train = (b.scaled(input_scale) for b in train)
            evals = (b.scaled(input_scale) for b in evals)
        return train, evals

    def _stream(self, batch_size, seed, data):
        p = self.params
        seed = int(seed) + 1_000_003 * int(p.get("task_seed", 0))
        if self.kind == "boolean":
            return gen_boolean(p["op"], batch_size, p.get("noise", 0.1), seed)
        if self.kind == "moons":
            return gen_moons(batch_size, p.get("noise", 0.1), seed)
        if self.kind == "blobs":
            return gen_blobs(batch_size, self.num_classes, seed,
                             cluster_std=p.get("cluster_std", 0.1),
                             centers_seed=p.get("centers_seed", 0))
        if self.kind == "idx_dataset":
            return batch_stream(data, batch_size, seed)
        raise ConfigurationError(f"unknown task kind {self.kind!r}")


def boolean_task(op, noise=0.1):
    boolean_corners(op)
    return Task(op, "boolean", 2, 2, {"op": op, "noise": noise})


def moons_task(noise=0.1):
    return Task("moons", "moons", 2, 2, {"noise": noise})


def blobs_task(num_classes=5, cluster_std=0.1, centers_seed=0):
    return Task(f"blobs{num_classes}", "blobs", 2, num_classes,
                {"cluster_std": cluster_std, "centers_seed": centers_seed})


def dataset_task(name, train: Dataset, eval_data: Optional[Dataset] = None):
    if eval_data is not None and eval_data.inputs.shape[1] != train.inputs.shape[1]:
        raise ConfigurationError("train and eval splits have different input sizes")
    num_classes = max(train.num_classes, eval_data.num_classes if eval_data is not None else 0)
    return Task(name, "idx_dataset", train.inputs.shape[1], num_classes, {}, train, eval_data)
