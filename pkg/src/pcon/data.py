"""Dataset ingestion, synthetic data generation, and stochastic augmentation.

Covers the CIFAR-10 binary record format, a hierarchical Gaussian tree
generator for vector experiments, a procedural 10-class image set for
image-pipeline tests without external data, and the two-view augmentation
policy.  Everything is deterministic under explicit seeds.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

RECORD_BYTES = 3073  # 1 label byte + 32*32*3 channel-planar pixels
HTREE_MAGIC = b"HTREE1"

CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


class DataFormatError(ValueError):
    """Raised for malformed dataset files."""


@dataclass
class ImageRecord:
    """One CIFAR-style record: a label byte and 3072 channel-planar pixels."""

    label: int
    pixels: np.ndarray  # uint8 [3072], order: 1024 R, 1024 G, 1024 B

    def to_float(self) -> np.ndarray:
        """Pixels as float64 [3, 32, 32] in [0, 1]."""
        return self.pixels.reshape(3, 32, 32).astype(np.float64) / 255.0

    def to_bytes(self) -> bytes:
        return bytes([self.label]) + self.pixels.tobytes()


@dataclass
class Dataset:
    """A labeled (or unlabeled) array dataset ready for the training loop."""

    x: np.ndarray  # [n, d] vectors or [n, 3, 32, 32] images in [0, 1]
    y: np.ndarray | None
    kind: str  # "vector" | "image"

    def __len__(self) -> int:
        return self.x.shape[0]


# ---------------------------------------------------------------------------
# CIFAR-10 binary format
# ---------------------------------------------------------------------------


def parse_cifar_binary(path) -> list[ImageRecord]:
    """Read one CIFAR-10 binary batch file into records, in file order."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) % RECORD_BYTES != 0:
        raise DataFormatError(
            f"{path}: size {len(blob)} is not a multiple of {RECORD_BYTES} (truncated?)"
        )
    records = []
    for off in range(0, len(blob), RECORD_BYTES):
        label = blob[off]
        if label > 9:
            raise DataFormatError(f"{path}: label byte {label} > 9 at offset {off}")
        pixels = np.frombuffer(blob, dtype=np.uint8, count=3072, offset=off + 1)
        records.append(ImageRecord(label, pixels.copy()))
    return records


def write_cifar_binary(path, records) -> None:
    with open(path, "wb") as fh:
        for rec in records:
            fh.write(rec.to_bytes())


def records_to_dataset(records) -> Dataset:
    x = np.stack([r.to_float() for r in records]).astype(np.float32)
    y = np.array([r.label for r in records], dtype=np.int64)
    return Dataset(x, y, "image")


def first_k_per_class(records, per_class: int, n_classes: int = 10) -> list[ImageRecord]:
    """Deterministic subset: the first ``per_class`` records of each label."""
    kept = []
    counts = [0] * n_classes
    for rec in records:
        if counts[rec.label] < per_class:
            counts[rec.label] += 1
            kept.append(rec)
        if sum(counts) == per_class * n_classes:
            break
    if sum(counts) < per_class * n_classes:
        raise DataFormatError(
            f"not enough records for {per_class} per class (got {counts})"
        )
    return kept


def load_cifar_desk(root, train_per_class: int = 500, test_per_class: int = 100):
    """The fixed desk-scale CIFAR-10 subset: 5000 train / 1000 test images.

    ``root`` must hold the standard binary batch files.  Records are taken
    first-k per class in file order, so the subset is reproducible.
    """
    train_records = []
    for name in CIFAR_TRAIN_FILES:
        path = os.path.join(root, name)
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing CIFAR batch file: {path}")
        train_records.extend(parse_cifar_binary(path))
    test_path = os.path.join(root, CIFAR_TEST_FILE)
    if not os.path.exists(test_path):
        raise FileNotFoundError(f"missing CIFAR batch file: {test_path}")
    test_records = parse_cifar_binary(test_path)
    train = records_to_dataset(first_k_per_class(train_records, train_per_class))
    test = records_to_dataset(first_k_per_class(test_records, test_per_class))
    return train, test


# ---------------------------------------------------------------------------
# hierarchical tree dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TreeDatasetSpec:
    """A regular tree of Gaussian features: root degree b+1, then b children.

    Level l holds (b + 1) * b**(l - 1) nodes; leaves live at ``depth`` and
    class labels are the index of each leaf's ancestor at ``class_level``.
    """

    branching: int = 2
    depth: int = 3
    class_level: int = 1
    feature_dim: int = 16
    edge_noise: float = 1.0
    obs_noise: float = 0.25

    def __post_init__(self):
        if self.branching < 2 or self.depth < 1:
            raise ValueError("need branching >= 2 and depth >= 1")
        if not (1 <= self.class_level <= self.depth):
            raise ValueError("class_level must be in [1, depth]")

    def nodes_at_level(self, level: int) -> int:
        return (self.branching + 1) * self.branching ** (level - 1)

    @property
    def n_leaves(self) -> int:
        return self.nodes_at_level(self.depth)

    @property
    def n_classes(self) -> int:
        return self.nodes_at_level(self.class_level)


def gen_tree_dataset(spec: TreeDatasetSpec, n_per_leaf: int, seed: int) -> Dataset:
    """Sample a labeled vector dataset from the tree's leaf distributions.

    The root feature is zero; each child adds Gaussian edge noise to its
    parent; each observation adds Gaussian noise to its leaf.
    """
    rng = np.random.default_rng([seed, 101])
    level = [np.zeros((1, spec.feature_dim))]
    ancestry = [np.zeros(1, dtype=np.int64)]
    for depth in range(1, spec.depth + 1):
        fanout = spec.branching + 1 if depth == 1 else spec.branching
        parents = level[-1]
        children = np.repeat(parents, fanout, axis=0)
        children = children + spec.edge_noise * rng.normal(size=children.shape)
        if depth == spec.class_level:
            anc = np.arange(children.shape[0], dtype=np.int64)
        else:
            anc = np.repeat(ancestry[-1], fanout)
        level.append(children)
        ancestry.append(anc)
    leaves = level[-1]
    labels = ancestry[-1]
    xs, ys = [], []
    for leaf, label in zip(leaves, labels):
        noise = spec.obs_noise * rng.normal(size=(n_per_leaf, spec.feature_dim))
        xs.append(leaf[None, :] + noise)
        ys.append(np.full(n_per_leaf, label, dtype=np.int64))
    return Dataset(np.concatenate(xs).astype(np.float64), np.concatenate(ys), "vector")


def write_htree(path, dataset: Dataset) -> None:
    """Headered binary export: magic, u32 n and d, float32 rows, i32 labels."""
    x = dataset.x.reshape(len(dataset), -1).astype("<f4")
    y = (dataset.y if dataset.y is not None else np.full(len(dataset), -1)).astype("<i4")
    with open(path, "wb") as fh:
        fh.write(HTREE_MAGIC)
        fh.write(struct.pack("<II", x.shape[0], x.shape[1]))
        fh.write(x.tobytes())
        fh.write(y.tobytes())


def read_htree(path, kind: str = "vector") -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(HTREE_MAGIC)] != HTREE_MAGIC:
        raise DataFormatError(f"{path}: bad magic, expected {HTREE_MAGIC!r}")
    n, d = struct.unpack_from("<II", blob, len(HTREE_MAGIC))
    off = len(HTREE_MAGIC) + 8
    need = off + 4 * n * d + 4 * n
    if len(blob) != need:
        raise DataFormatError(f"{path}: expected {need} bytes, got {len(blob)}")
    x = np.frombuffer(blob, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    y = np.frombuffer(blob, dtype="<i4", count=n, offset=off + 4 * n * d)
    x = x.astype(np.float64)
    y = y.astype(np.int64)
    if kind == "image":
        if d != 3072:
            raise DataFormatError(f"{path}: image rows must have 3072 features, got {d}")
        x = x.reshape(n, 3, 32, 32)
    labels = None if np.all(y == -1) else y
    return Dataset(x, labels, kind)


# ---------------------------------------------------------------------------
# procedural image set (no external data required)
# ---------------------------------------------------------------------------


def gen_synthetic_images(
    n_per_class: int, n_classes: int = 10, seed: int = 0, start_index: int = 0
) -> Dataset:
    """Low-frequency class-specific gratings with per-sample shift and noise.

    A stand-in image dataset for the desk pipeline when no CIFAR files are
    on disk: class identity is carried by global pattern structure, which
    survives crops and flips but not trivial pixel lookups.
    """
    proto_rng = np.random.default_rng([seed, 7])
    yy, xx = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")
    protos = []
    for _ in range(n_classes):
        pattern = np.zeros((3, 32, 32))
        for ch in range(3):
            for _k in range(3):
                fy, fx = proto_rng.integers(1, 4, size=2)
                phase = proto_rng.uniform(0, 2 * np.pi)
                amp = proto_rng.uniform(0.4, 1.0)
                pattern[ch] += amp * np.cos(2 * np.pi * (fy * yy + fx * xx) / 32 + phase)
        protos.append(pattern / np.max(np.abs(pattern)))
    xs = np.empty((n_classes * n_per_class, 3, 32, 32), dtype=np.float32)
    ys = np.empty(n_classes * n_per_class, dtype=np.int64)
    row = 0
    for label in range(n_classes):
        for k in range(n_per_class):
            rng = np.random.default_rng([seed, label, start_index + k])
            # crop-scale jitter only: larger shifts would put class identity
            # beyond what the augmentation policy can bridge
            dy, dx = rng.integers(-4, 5, size=2)
            img = np.roll(protos[label], (int(dy), int(dx)), axis=(1, 2))
            amp = rng.uniform(0.3, 0.5)
            tint = rng.uniform(-0.08, 0.08, size=3)
            noise = 0.05 * rng.normal(size=(3, 32, 32))
            xs[row] = np.clip(0.5 + amp * img + tint[:, None, None] + noise, 0.0, 1.0)
            ys[row] = label
            row += 1
    return Dataset(xs, ys, "image")


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationPolicy:
    """Stochastic two-view transform: crop, flip, jitter, grayscale.

    Each (seed, draw) pair is an independent deterministic stream, so the
    same draw index always reproduces the same view.
    """

    pad: int = 4
    hflip_p: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    grayscale_p: float = 0.2
    seed: int = 0

    @staticmethod
    def identity(seed: int = 0) -> "AugmentationPolicy":
        return AugmentationPolicy(0, 0.0, 0.0, 0.0, 0.0, seed)


def augment(x: np.ndarray, policy: AugmentationPolicy, draw: int) -> np.ndarray:
    """One stochastic view of image ``x`` ([3, 32, 32] in [0, 1])."""
    rng = np.random.default_rng([policy.seed, draw])
    img = x
    if policy.pad > 0:
        p = policy.pad
        padded = np.pad(img, ((0, 0), (p, p), (p, p)), mode="reflect")
        oy, ox = rng.integers(0, 2 * p + 1, size=2)
        img = padded[:, oy : oy + x.shape[1], ox : ox + x.shape[2]]
    if rng.random() < policy.hflip_p:
        img = img[:, :, ::-1]
    if policy.brightness > 0:
        factors = 1.0 + rng.uniform(-policy.brightness, policy.brightness, size=3)
        img = img * factors[:, None, None]
    if policy.contrast > 0:
        factors = 1.0 + rng.uniform(-policy.contrast, policy.contrast, size=3)
        mean = img.mean(axis=(1, 2), keepdims=True)
        img = mean + factors[:, None, None] * (img - mean)
    if rng.random() < policy.grayscale_p:
        img = np.broadcast_to(img.mean(axis=0, keepdims=True), img.shape)
    return np.clip(img, 0.0, 1.0) if img is not x else x.copy()


def augment_pair(x: np.ndarray, policy: AugmentationPolicy, base_draw: int):
    """The two independent views of one source image."""
    return augment(x, policy, base_draw), augment(x, policy, base_draw + 1)
