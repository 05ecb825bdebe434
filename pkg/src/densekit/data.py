"""CIFAR-10 binary ingestion, a synthetic stand-in dataset, normalization,
augmentation and mini-batching."""
from __future__ import annotations

import queue
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .rng import substream

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class Dataset:
    images: np.ndarray          # uint8 [n, 3, 32, 32]
    labels: np.ndarray          # uint8 [n]
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) == 0:
            raise DataError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise DataError("images and labels differ in length")
        if self.labels.max() >= self.num_classes:
            raise DataError(f"label {int(self.labels.max())} >= class count {self.num_classes}")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.split, self.num_classes)


@dataclass
class NormStats:
    mean: np.ndarray   # [3], in [0, 1] scale
    std: np.ndarray    # [3]

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        # a constant channel can come out as a rounding residue instead of exactly 0
        if np.any(self.std <= 1e-8):
            raise DataError(f"channel standard deviation must be positive, got {self.std}")

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(d["mean"], d["std"])


# ---------------------------------------------------------------------------
# CIFAR-10 binary format
# ---------------------------------------------------------------------------

def parse_cifar_bytes(raw: bytes, source: str = "<bytes>") -> tuple:
    """Decode records of 1 label byte followed by 3072 channel-planar pixels."""
    if len(raw) == 0 or len(raw) % RECORD_BYTES:
        raise FormatError(
            f"{source}: length {len(raw)} is not a positive multiple of {RECORD_BYTES}"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].copy()
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise DataError(f"{source}: record {int(bad[0])} has label {int(labels[bad[0]])} >= 10")
    images = rec[:, 1:].reshape(-1, *IMAGE_SHAPE).copy()
    return images, labels


def read_cifar_file(path) -> tuple:
    path = Path(path)
    return parse_cifar_bytes(path.read_bytes(), str(path))


def write_cifar_file(dataset: Dataset, path) -> Path:
    path = Path(path)
    n = len(dataset)
    rec = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = dataset.labels
    rec[:, 1:] = dataset.images.reshape(n, -1)
    path.write_bytes(rec.tobytes())
    return path


def load_cifar10(directory) -> tuple:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"CIFAR-10 directory {directory} does not exist")
    parts = [read_cifar_file(directory / name) for name in CIFAR_TRAIN_FILES]
    train = Dataset(np.concatenate([p[0] for p in parts]),
                    np.concatenate([p[1] for p in parts]), "train")
    test = Dataset(*read_cifar_file(directory / CIFAR_TEST_FILE), "test")
    return train, test


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

# class = half + 2 * hue, where half is top (0) or bottom (1) and hue indexes the
# set of bright channels.  Both survive horizontal flips, and padded crops of at
# most four pixels never move a blob into the other half.
SYNTH_CLASSES = 10
SYNTH_HUES = ((0,), (1,), (2,), (0, 1), (1, 2))
# blob centres sit this far (in pixels) from the nearest image corner, close
# enough to the border for shallow networks to sense the position
_CORNER_OFFSET = (3.0, 8.0)


def synth_label(half: int, hue: int) -> int:
    return half + 2 * hue


def synth_dataset(n: int, seed: int = 0, split: str = "train") -> Dataset:
    """Procedural 32x32 images whose class is fixed by blob height and colour.

    Each image holds one bright Gaussian blob on a dim noisy background, placed
    near one of the four image corners.  Whether the blob sits in the top or the
    bottom half, and which colour channels it lights up, determine the label; the
    left/right choice is random so the classes are unchanged by mirror flips.
    Labels are balanced to within one per class.
    """
    if n < SYNTH_CLASSES:
        raise ConfigError(f"synthetic dataset needs n >= {SYNTH_CLASSES}, got {n}")
    rng = substream(seed, f"synth/{split}")
    labels = rng.permutation(np.arange(n) % SYNTH_CLASSES).astype(np.uint8)
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float64)
    images = np.empty((n, *IMAGE_SHAPE), dtype=np.uint8)
    for i, lab in enumerate(labels):
        half, hue = int(lab) % 2, int(lab) // 2
        dy, dx = rng.uniform(*_CORNER_OFFSET, size=2)
        cy = dy if half == 0 else 31.0 - dy
        cx = dx if rng.random() < 0.5 else 31.0 - dx
        sigma = rng.uniform(2.0, 3.0)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        colour = rng.uniform(40.0, 90.0, size=3)
        for c in SYNTH_HUES[hue]:
            colour[c] = rng.uniform(190.0, 230.0)
        img = rng.uniform(0.0, 40.0, size=IMAGE_SHAPE) + colour[:, None, None] * blob[None]
        images[i] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Dataset(images, labels, split, SYNTH_CLASSES)


def synth_rule_label(image: np.ndarray) -> int:
    """Recover a synthetic label from pixels alone (independent of the generator)."""
    img = image.astype(np.float64)
    energy = img.sum(axis=0)
    # 3x3 box smoothing suppresses single-pixel noise peaks
    padded = np.pad(energy, 1, mode="edge")
    smooth = sum(padded[i:i + 32, j:j + 32] for i in range(3) for j in range(3)) / 9.0
    y, x = np.unravel_index(int(np.argmax(smooth)), smooth.shape)
    half = 1 if y >= 16 else 0
    # background-corrected channel energy in a 5x5 window around the peak
    window = img[:, max(0, y - 2):y + 3, max(0, x - 2):x + 3]
    excess = (window - np.median(img, axis=(1, 2))[:, None, None]).sum(axis=(1, 2))
    bright = tuple(int(c) for c in np.flatnonzero(excess >= 0.65 * excess.max()))
    if bright not in SYNTH_HUES:
        raise DataError(f"no synthetic hue has bright channels {bright}")
    return synth_label(half, SYNTH_HUES.index(bright))


def parse_data_spec(spec: str, seed: int = 0) -> tuple:
    """``"synthetic:N"`` or a CIFAR-10 binary directory -> (train, test)."""
    if spec.startswith("synthetic:"):
        try:
            n = int(spec.split(":", 1)[1])
        except ValueError as exc:
            raise ConfigError(f"bad synthetic data spec {spec!r}") from exc
        n_test = max(SYNTH_CLASSES, n // 5)
        return synth_dataset(n, seed, "train"), synth_dataset(n_test, seed, "test")
    return load_cifar10(spec)


# ---------------------------------------------------------------------------
# normalization and augmentation
# ---------------------------------------------------------------------------

def compute_norm_stats(train: Dataset) -> NormStats:
    x = train.images.astype(np.float64) / 255.0
    return NormStats(x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3)))


def normalize(images: np.ndarray, stats: NormStats) -> np.ndarray:
    """``(pixel/255 - mean_c) / std_c`` for a single image [3,H,W] or a batch [n,3,H,W]."""
    x = images.astype(np.float32) / np.float32(255.0)
    shape = (3, 1, 1) if x.ndim == 3 else (1, 3, 1, 1)
    mean = stats.mean.astype(np.float32).reshape(shape)
    std = stats.std.astype(np.float32).reshape(shape)
    return (x - mean) / std


def denormalize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    shape = (3, 1, 1) if x.ndim == 3 else (1, 3, 1, 1)
    return x * stats.std.reshape(shape) + stats.mean.reshape(shape)


PAD = 4


def augment(image: np.ndarray, rng: np.random.Generator, return_params: bool = False):
    """Zero-pad by 4, take a random 32x32 crop, then mirror with probability 1/2."""
    c, h, w = image.shape
    dy, dx = (int(v) for v in rng.integers(0, 2 * PAD + 1, size=2))
    flip = bool(rng.random() < 0.5)
    out = apply_augment(image, dy, dx, flip)
    return (out, (dy, dx, flip)) if return_params else out


def apply_augment(image: np.ndarray, dy: int, dx: int, flip: bool) -> np.ndarray:
    c, h, w = image.shape
    padded = np.zeros((c, h + 2 * PAD, w + 2 * PAD), dtype=image.dtype)
    padded[:, PAD:PAD + h, PAD:PAD + w] = image
    out = padded[:, dy:dy + h, dx:dx + w]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment(img, rng) for img in images])


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def epoch_permutation(n: int, shuffle_seed: int, epoch: int) -> np.ndarray:
    return substream(shuffle_seed, "shuffle", epoch).permutation(n)


def batcher(
    dataset: Dataset,
    batch_size: int,
    shuffle_seed: Optional[int] = 0,
    epoch: int = 0,
    stats: Optional[NormStats] = None,
    augment_images: bool = False,
    prefetch: bool = False,
) -> Iterator[tuple]:
    """Yield ``(x, labels)`` batches; the final partial batch is kept.

    ``x`` is normalized float32 [B,3,32,32] when ``stats`` is given, otherwise
    the raw uint8 images.  With ``shuffle_seed=None`` the dataset order is kept.
    Augmentation draws from substream ("augment", epoch) of the shuffle seed.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be positive")
    n = len(dataset)
    order = np.arange(n) if shuffle_seed is None else epoch_permutation(n, shuffle_seed, epoch)
    aug_rng = substream(shuffle_seed or 0, "augment", epoch) if augment_images else None

    def make(lo: int) -> tuple:
        idx = order[lo:lo + batch_size]
        imgs = dataset.images[idx]
        if aug_rng is not None:
            imgs = augment_batch(imgs, aug_rng)
        x = normalize(imgs, stats) if stats is not None else imgs
        return x, dataset.labels[idx].astype(np.int64)

    starts = range(0, n, batch_size)
    if not prefetch:
        for lo in starts:
            yield make(lo)
        return
    yield from _prefetched(make, starts)


def _prefetched(make, starts) -> Iterator[tuple]:
    # one batch in flight plus one waiting in the queue
    q: "queue.Queue" = queue.Queue(maxsize=1)
    done = object()

    def produce():
        try:
            for lo in starts:
                q.put(make(lo))
        except BaseException as exc:  # surfaced on the consumer side
            q.put(exc)
        q.put(done)

    th = threading.Thread(target=produce, daemon=True)
    th.start()
    while True:
        item = q.get()
        if item is done:
            break
        if isinstance(item, BaseException):
            raise item
        yield item
    th.join()


def split_validation(train: Dataset, fraction: float, seed: int) -> tuple:
    if not 0.0 <= fraction < 1.0:
        raise ConfigError(f"val_fraction must be in [0, 1), got {fraction}")
    if fraction == 0.0:
        return train, None
    order = substream(seed, "val_split").permutation(len(train))
    n_val = max(1, int(round(fraction * len(train))))
    val = train.subset(np.sort(order[:n_val]))
    val.split = "val"
    return train.subset(np.sort(order[n_val:])), val
