import csv
import gzip
import logging
import struct
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from app.errors import ConfigurationError, DataIOError, DomainError, FormatError
from app.models import Dataset

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
GZIP_MAGIC = b"\x1f\x8b"
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
N_CLASSES = 10


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def square_wave_target(m_total: int, n_blocks: int = 2) -> np.ndarray:
    """Alternating +1/-1 blocks of length m_total / n_blocks, starting with +1."""
    if n_blocks < 2 or n_blocks % 2:
        raise ConfigurationError(f"square wave needs an even number of blocks, got {n_blocks}")
    if m_total % n_blocks:
        raise ConfigurationError(f"{n_blocks} blocks do not divide {m_total} points")
    block = np.arange(m_total) // (m_total // n_blocks)
    return np.where(block % 2 == 0, 1.0, -1.0)


def circulant_dataset(m_total: int, n_blocks: int = 2) -> Dataset:
    """M points evenly spaced on the unit circle with a square-wave target."""
    if m_total < 4:
        raise DomainError(f"circulant dataset needs at least 4 points, got {m_total}")
    angle = 2.0 * np.pi * np.arange(m_total) / m_total
    x = np.column_stack([np.cos(angle), np.sin(angle)])
    y = square_wave_target(m_total, n_blocks)
    return Dataset(x=x, y=y.reshape(-1, 1), labels=(y > 0).astype(np.int64))


# ---------------------------------------------------------------------------
# Label handling
# ---------------------------------------------------------------------------

def one_hot(labels: np.ndarray, n_classes: Optional[int] = None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and labels.min() < 0:
        raise DomainError("labels must be non-negative")
    k = n_classes if n_classes is not None else int(labels.max()) + 1
    if labels.size and labels.max() >= k:
        raise DomainError(f"label {int(labels.max())} out of range for {k} classes")
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels] = 1.0
    return out


def labels_to_sign(labels: np.ndarray) -> np.ndarray:
    """{0, 1} labels to {-1, +1} targets."""
    labels = np.asarray(labels)
    if not np.all(np.isin(labels, (0, 1))):
        raise DomainError("sign conversion needs binary {0, 1} labels")
    return np.where(labels == 1, 1.0, -1.0)


def normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise DomainError(f"cannot normalize zero row {int(np.flatnonzero(norms == 0)[0])}")
    return x / norms[:, None]


def to_grayscale(rgb_rows: np.ndarray, width: int, height: int) -> np.ndarray:
    """
    Luma (0.299, 0.587, 0.114) of channel-planar RGB rows.

    Each row holds the red plane, then green, then blue, each width*height long.
    """
    rgb_rows = np.atleast_2d(np.asarray(rgb_rows, dtype=float))
    pixels = width * height
    if rgb_rows.shape[1] != 3 * pixels:
        raise DomainError(
            f"row length {rgb_rows.shape[1]} does not match 3 x {width} x {height}"
        )
    planes = rgb_rows.reshape(rgb_rows.shape[0], 3, pixels)
    return np.tensordot(planes, np.asarray(LUMA_WEIGHTS), axes=([1], [0]))


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def _read_maybe_gzip(path: Path) -> bytes:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}")
    if raw[:2] == GZIP_MAGIC:
        try:
            return gzip.decompress(raw)
        except OSError as exc:
            raise FormatError(f"{path}: corrupt gzip stream: {exc}")
    return raw


def _read_idx_images(path: Path) -> np.ndarray:
    raw = _read_maybe_gzip(path)
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated IDX image header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{path}: bad IDX image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise FormatError(f"{path}: {len(raw)} bytes, header declares {count}x{rows}x{cols} ({expected} bytes)")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16)
    return pixels.reshape(count, rows * cols).astype(float) / 255.0


def _read_idx_labels(path: Path) -> np.ndarray:
    raw = _read_maybe_gzip(path)
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated IDX label header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"{path}: bad IDX label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if len(raw) != 8 + count:
        raise FormatError(f"{path}: {len(raw) - 8} label bytes, header declares {count}")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)
    if labels.size and labels.max() >= N_CLASSES:
        raise FormatError(f"{path}: label {int(labels.max())} outside 0..{N_CLASSES - 1}")
    return labels


def load_idx(images_path: Path, labels_path: Path) -> Dataset:
    """MNIST-style IDX pair (optionally gzipped): pixels scaled to [0, 1], one-hot targets."""
    x = _read_idx_images(images_path)
    labels = _read_idx_labels(labels_path)
    if x.shape[0] != labels.shape[0]:
        raise FormatError(
            f"dimension mismatch: {x.shape[0]} images in {images_path}, {labels.shape[0]} labels in {labels_path}"
        )
    logger.info("loaded %d images of %d pixels from %s", x.shape[0], x.shape[1], images_path)
    return Dataset(x=x, y=one_hot(labels, N_CLASSES), labels=labels)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: Path, labels_path: Path) -> None:
    """Write uint8 images (count x rows x cols) and labels in the IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3:
        raise DomainError(f"images must be count x rows x cols, got shape {images.shape}")
    count, rows, cols = images.shape
    try:
        Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols) + images.tobytes())
        Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())
    except OSError as exc:
        raise DataIOError(f"cannot write IDX files: {exc}")


def load_csv(path: Path, has_header: bool = False) -> Dataset:
    """First column integer label, remaining columns features."""
    labels, rows = [], []
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            if has_header:
                next(reader, None)
            for line_no, record in enumerate(reader, start=2 if has_header else 1):
                if not record:
                    continue
                try:
                    labels.append(int(record[0]))
                    rows.append([float(v) for v in record[1:]])
                except ValueError as exc:
                    raise FormatError(f"{path}:{line_no}: {exc}")
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}")

    if not rows:
        raise FormatError(f"{path}: no data rows")
    width = len(rows[0])
    if width == 0 or any(len(r) != width for r in rows):
        raise FormatError(f"{path}: rows have inconsistent feature counts")
    labels_arr = np.asarray(labels, dtype=np.int64)
    return Dataset(x=np.asarray(rows), y=one_hot(labels_arr), labels=labels_arr)


# ---------------------------------------------------------------------------
# Splits and dataset descriptors
# ---------------------------------------------------------------------------

def subsample(ds: Dataset, p_train: int, seed: int, n_test: Optional[int] = None) -> Dataset:
    """Seeded random train split; the test split is the remainder (or n_test of it)."""
    m = ds.m_total
    if p_train < 1 or p_train > m:
        raise DomainError(f"p_train={p_train} exceeds the pool of {m} samples")
    perm = np.random.default_rng(seed).permutation(m)
    train_idx = np.sort(perm[:p_train])
    rest = perm[p_train:] if n_test is None else perm[p_train:p_train + n_test]
    test_idx = np.sort(rest)
    if test_idx.size == 0:
        logger.warning("training split uses the whole pool; test set is empty")
    return Dataset(x=ds.x, y=ds.y, labels=ds.labels, train_idx=train_idx, test_idx=test_idx)


def split_arrays(ds: Dataset) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(x_train, y_train, x_test, y_test, test_labels) for a subsampled dataset."""
    labels = ds.labels if ds.labels is not None else np.argmax(ds.y, axis=1)
    return (
        ds.x[ds.train_idx],
        ds.y[ds.train_idx],
        ds.x[ds.test_idx],
        ds.y[ds.test_idx],
        labels[ds.test_idx],
    )


def parse_dataset(descriptor: str, normalize: bool = False) -> Dataset:
    """
    Resolve a dataset descriptor:

    circulant:M[:blocks], idx:<images>:<labels>, csv:<path>[:header]
    """
    kind, _, rest = descriptor.partition(":")
    if kind == "circulant":
        parts = rest.split(":") if rest else []
        try:
            m_total = int(parts[0])
            n_blocks = int(parts[1]) if len(parts) > 1 else 2
        except (IndexError, ValueError):
            raise ConfigurationError(f"bad circulant descriptor {descriptor!r}, expected circulant:M:blocks")
        ds = circulant_dataset(m_total, n_blocks)
    elif kind == "idx":
        images, sep, labels = rest.partition(":")
        if not sep or not images or not labels:
            raise ConfigurationError(f"bad idx descriptor {descriptor!r}, expected idx:<images>:<labels>")
        ds = load_idx(Path(images), Path(labels))
    elif kind == "csv":
        path, has_header = rest, False
        if rest.endswith(":header"):
            path, has_header = rest[: -len(":header")], True
        if not path:
            raise ConfigurationError(f"bad csv descriptor {descriptor!r}, expected csv:<path>[:header]")
        ds = load_csv(Path(path), has_header)
    else:
        raise ConfigurationError(f"unknown dataset kind {kind!r} in {descriptor!r}")

    if normalize:
        ds = Dataset(x=normalize_rows(ds.x), y=ds.y, labels=ds.labels)
    return ds
