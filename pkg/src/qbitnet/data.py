"""Dataset ingestion: MNIST IDX and CIFAR-10 binary formats, batch
normalization/augmentation, and a deterministic synthetic digit corpus
for offline runs.

Images are kept as raw uint8 and normalized per batch with constants
fixed by the caller's config, never computed at runtime.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixels

MNIST_MEAN = (0.1307,)
MNIST_STD = (0.3081,)
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)

DATA_DIR_ENV = "QBIT_DATA_DIR"


class DatasetFormatError(Exception):
    """Raised on magic mismatches, truncation or label corruption; the
    message names the file and byte offset."""


def _open_maybe_gzip(path: Path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, n: int, path, offset: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise DatasetFormatError(
            f"{path}: truncated at byte offset {offset + len(data)} "
            f"(wanted {n} more bytes)")
    return data


def load_idx_images(path) -> np.ndarray:
    """Read an IDX3 image file (magic 0x00000803) into uint8 [N, H, W]."""
    path = Path(path)
    with _open_maybe_gzip(path) as f:
        header = _read_exact(f, 16, path, 0)
        magic, n, h, w = struct.unpack(">IIII", header)
        if magic != IDX_IMAGES_MAGIC:
            raise DatasetFormatError(
                f"{path}: bad magic 0x{magic:08x} at byte offset 0 "
                f"(expected 0x{IDX_IMAGES_MAGIC:08x})")
        raw = _read_exact(f, n * h * w, path, 16)
    return np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w)


def load_idx_labels(path) -> np.ndarray:
    """Read an IDX1 label file (magic 0x00000801) into int64 [N]."""
    path = Path(path)
    with _open_maybe_gzip(path) as f:
        header = _read_exact(f, 8, path, 0)
        magic, n = struct.unpack(">II", header)
        if magic != IDX_LABELS_MAGIC:
            raise DatasetFormatError(
                f"{path}: bad magic 0x{magic:08x} at byte offset 0 "
                f"(expected 0x{IDX_LABELS_MAGIC:08x})")
        raw = _read_exact(f, n, path, 8)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def write_idx_images(path, images: np.ndarray):
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.size))
        f.write(labels.tobytes())


def _find_file(directory: Path, names) -> Path:
    for name in names:
        for candidate in (directory / name, directory / (name + ".gz")):
            if candidate.exists():
                return candidate
    raise DatasetFormatError(
        f"{directory}: missing dataset file (looked for {', '.join(names)})")


@dataclass
class Dataset:
    """Raw uint8 images [N, C, H, W] with labels and normalization
    constants; batches are normalized (and optionally augmented) on the
    fly."""

    images: np.ndarray
    labels: np.ndarray
    mean: tuple
    std: tuple
    name: str = ""
    augment: str = "none"  # none | pad-crop | pad-crop+flip
    pad: int = 4

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError("images must be [N, C, H, W]")
        if len(self.images) != len(self.labels):
            raise ValueError("image/label count mismatch")
        if self.augment not in ("none", "pad-crop", "pad-crop+flip"):
            raise ValueError(f"unknown augmentation {self.augment!r}")
        if len(self.mean) != self.images.shape[1] or len(self.std) != self.images.shape[1]:
            raise ValueError("normalization constants must be per channel")

    def __len__(self):
        return len(self.images)

    @property
    def sample_shape(self):
        return self.images.shape[1:]

    def _normalize(self, raw: np.ndarray) -> np.ndarray:
        x = raw.astype(np.float64) / 255.0
        mean = np.asarray(self.mean).reshape(1, -1, 1, 1)
        std = np.asarray(self.std).reshape(1, -1, 1, 1)
        return (x - mean) / std

    def _augment(self, raw: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        b, c, h, w = raw.shape
        p = self.pad
        padded = np.pad(raw, ((0, 0), (0, 0), (p, p), (p, p)))
        ys = rng.integers(0, 2 * p + 1, size=b)
        xs = rng.integers(0, 2 * p + 1, size=b)
        out = np.empty_like(raw)
        for i in range(b):
            out[i] = padded[i, :, ys[i]:ys[i] + h, xs[i]:xs[i] + w]
        if self.augment == "pad-crop+flip":
            flips = rng.random(b) < 0.5
            out[flips] = out[flips, :, :, ::-1]
        return out

    def batch(self, idx, rng: np.random.Generator | None = None):
        raw = self.images[idx]
        if rng is not None and self.augment != "none":
            raw = self._augment(raw, rng)
        return self._normalize(raw), self.labels[idx]

    def batches(self, batch_size: int):
        """Sequential batches, no shuffling or augmentation."""
        for start in range(0, len(self), batch_size):
            sl = slice(start, start + batch_size)
            yield self._normalize(self.images[sl]), self.labels[sl]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.mean, self.std,
                       self.name, self.augment, self.pad)


def split_validation(ds: Dataset, fraction: float, rng: np.random.Generator):
    """Hold out a validation slice (one tenth by default protocol)."""
    n = len(ds)
    n_val = max(1, int(round(n * fraction)))
    order = rng.permutation(n)
    val = ds.subset(order[:n_val])
    train = ds.subset(order[n_val:])
    return train, val


def _validate_labels(labels, path):
    if labels.size and (labels.min() < 0 or labels.max() > 9):
        raise DatasetFormatError(f"{path}: label out of range 0..9")


def load_mnist(directory, mean=MNIST_MEAN, std=MNIST_STD, augment="none") -> dict:
    """Load the four standard IDX files; returns {'train': ..., 'test': ...}."""
    directory = Path(directory)
    out = {}
    for split, img_name, lab_name in (
        ("train", "train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        ("test", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    ):
        img_path = _find_file(directory, [img_name])
        lab_path = _find_file(directory, [lab_name])
        images = load_idx_images(img_path)
        labels = load_idx_labels(lab_path)
        if len(images) != len(labels):
            raise DatasetFormatError(
                f"{img_path}: {len(images)} images but {len(labels)} labels")
        _validate_labels(labels, lab_path)
        out[split] = Dataset(images[:, None, :, :], labels, mean, std,
                             name=f"mnist-{split}",
                             augment=augment if split == "train" else "none")
    return out


def load_cifar10(directory, mean=CIFAR10_MEAN, std=CIFAR10_STD, augment="none") -> dict:
    """Load CIFAR-10 binary batches (3073-byte records, CHW pixel order)."""
    directory = Path(directory)

    def read_batch(path):
        data = path.read_bytes()
        if len(data) == 0 or len(data) % CIFAR_RECORD_BYTES:
            raise DatasetFormatError(
                f"{path}: size {len(data)} is not a multiple of "
                f"{CIFAR_RECORD_BYTES}-byte records (truncated at byte offset "
                f"{len(data) - len(data) % CIFAR_RECORD_BYTES})")
        records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels = records[:, 0].astype(np.int64)
        _validate_labels(labels, path)
        images = records[:, 1:].reshape(-1, 3, 32, 32)
        return images, labels

    train_parts = []
    for i in range(1, 6):
        path = directory / f"data_batch_{i}.bin"
        if not path.exists():
            raise DatasetFormatError(f"{path}: missing CIFAR-10 batch file")
        train_parts.append(read_batch(path))
    test_path = directory / "test_batch.bin"
    if not test_path.exists():
        raise DatasetFormatError(f"{test_path}: missing CIFAR-10 test file")
    test_images, test_labels = read_batch(test_path)
    images = np.concatenate([p[0] for p in train_parts])
    labels = np.concatenate([p[1] for p in train_parts])
    return {
        "train": Dataset(images, labels, mean, std, name="cifar10-train",
                         augment=augment),
        "test": Dataset(test_images, test_labels, mean, std, name="cifar10-test"),
    }


def detect_kind(directory) -> str:
    directory = Path(directory)
    if any((directory / n).exists() or (directory / (n + ".gz")).exists()
           for n in ("train-images-idx3-ubyte",)):
        return "mnist-idx"
    if (directory / "data_batch_1.bin").exists():
        return "cifar10-binary"
    raise DatasetFormatError(
        f"{directory}: no recognizable dataset (expected MNIST IDX files or "
        f"CIFAR-10 .bin batches)")


def load_dataset(kind: str, directory, mean=None, std=None, augment="none") -> dict:
    if kind == "mnist-idx":
        return load_mnist(directory, mean or MNIST_MEAN, std or MNIST_STD, augment)
    if kind == "cifar10-binary":
        return load_cifar10(directory, mean or CIFAR10_MEAN, std or CIFAR10_STD, augment)
    raise ValueError(f"unknown dataset kind {kind!r}")


def resolve_data_dir(arg) -> Path:
    """CLI dataset directory, falling back to $QBIT_DATA_DIR."""
    if arg:
        return Path(arg)
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    raise DatasetFormatError(
        f"no dataset directory given and {DATA_DIR_ENV} is not set")


# ---------------------------------------------------------------------------
# Synthetic digit corpus
# ---------------------------------------------------------------------------
# Polyline skeletons per digit in a unit box (x right, y down).  Arcs are
# discretized; every sample gets a random affine distortion and stroke
# width, so the rendered corpus behaves like a small handwritten-digit
# task while being fully reproducible offline.

def _arc(cx, cy, rx, ry, a0, a1, n=14):
    t = np.linspace(np.radians(a0), np.radians(a1), n)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _digit_skeletons():
    line = lambda *pts: np.asarray(pts, dtype=np.float64)
    return {
        0: [_arc(0.5, 0.5, 0.30, 0.40, 0, 360, 24)],
        1: [line((0.35, 0.25), (0.55, 0.08)), line((0.55, 0.08), (0.55, 0.92))],
        2: [_arc(0.5, 0.32, 0.28, 0.22, 180, 340, 12),
            line((0.763, 0.245), (0.22, 0.90)), line((0.22, 0.90), (0.80, 0.90))],
        3: [_arc(0.47, 0.30, 0.26, 0.20, 150, 390, 12),
            _arc(0.47, 0.70, 0.28, 0.22, 330, 570, 12)],
        4: [line((0.62, 0.08), (0.18, 0.60)), line((0.18, 0.60), (0.84, 0.60)),
            line((0.64, 0.35), (0.64, 0.92))],
        5: [line((0.76, 0.10), (0.28, 0.10)), line((0.28, 0.10), (0.26, 0.48)),
            _arc(0.48, 0.65, 0.26, 0.24, 215, 480, 14)],
        6: [line((0.68, 0.08), (0.46, 0.28)), line((0.46, 0.28), (0.30, 0.52)),
            line((0.30, 0.52), (0.25, 0.66)),
            _arc(0.48, 0.66, 0.24, 0.24, 0, 360, 18)],
        7: [line((0.20, 0.10), (0.80, 0.10)), line((0.80, 0.10), (0.40, 0.92))],
        8: [_arc(0.5, 0.30, 0.22, 0.20, 0, 360, 18),
            _arc(0.5, 0.70, 0.26, 0.22, 0, 360, 18)],
        9: [_arc(0.52, 0.34, 0.24, 0.24, 0, 360, 18),
            line((0.76, 0.34), (0.73, 0.58)), line((0.73, 0.58), (0.60, 0.90))],
    }


_SKELETONS = _digit_skeletons()


def _render_digit(digit: int, rng: np.random.Generator, size: int = 28) -> np.ndarray:
    angle = rng.uniform(-0.35, 0.35)
    shear = rng.uniform(-0.30, 0.30)
    scale = rng.uniform(0.55, 0.95) * size
    shift = rng.uniform(-2.8, 2.8, size=2)
    thickness = rng.uniform(0.55, 1.6)
    contrast = rng.uniform(0.42, 0.95)
    noise_sigma = rng.uniform(22.0, 48.0)
    cos, sin = np.cos(angle), np.sin(angle)
    rot = np.array([[cos, -sin], [sin, cos]]) @ np.array([[1.0, shear], [0.0, 1.0]])
    center = (size - 1) / 2.0

    ys, xs = np.mgrid[0:size, 0:size]
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    dist = np.full(size * size, np.inf)
    for poly in _SKELETONS[digit]:
        # jitter the control points so strokes wobble like handwriting
        wobble = rng.normal(0.0, 0.02, size=poly.shape)
        pts = (poly + wobble - 0.5) * scale @ rot.T + center + shift
        seg_a, seg_b = pts[:-1], pts[1:]
        d = seg_b - seg_a  # [S, 2]
        len2 = np.maximum((d * d).sum(axis=1), 1e-12)
        rel = pix[:, None, :] - seg_a[None, :, :]
        t = np.clip((rel * d[None]).sum(axis=2) / len2[None], 0.0, 1.0)
        proj = seg_a[None] + t[..., None] * d[None]
        seg_dist = np.sqrt(((pix[:, None, :] - proj) ** 2).sum(axis=2))
        dist = np.minimum(dist, seg_dist.min(axis=1))
    ink = np.clip((thickness + 0.6 - dist) / 0.9, 0.0, 1.0)
    gray = ink * contrast * 255.0 + rng.normal(0.0, noise_sigma, size=size * size)
    img = np.clip(gray, 0, 255).astype(np.uint8)
    return img.reshape(size, size)


def synthesize_digits(n: int, seed: int, size: int = 28):
    """Render n class-balanced synthetic digits; returns (images, labels)."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    rng.shuffle(labels)
    images = np.empty((n, size, size), dtype=np.uint8)
    for i in range(n):
        images[i] = _render_digit(int(labels[i]), rng, size)
    return images, labels.astype(np.int64)


def write_synthetic_mnist(directory, n_train: int, n_test: int, seed: int = 0):
    """Write a synthetic digit corpus in MNIST IDX layout so it flows
    through the exact same ingestion path as the real files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    train_images, train_labels = synthesize_digits(n_train, seed)
    test_images, test_labels = synthesize_digits(n_test, seed + 1)
    write_idx_images(directory / "train-images-idx3-ubyte", train_images)
    write_idx_labels(directory / "train-labels-idx1-ubyte", train_labels)
    write_idx_images(directory / "t10k-images-idx3-ubyte", test_images)
    write_idx_labels(directory / "t10k-labels-idx1-ubyte", test_labels)
    return directory
