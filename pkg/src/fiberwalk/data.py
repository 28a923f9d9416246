"""Dataset ingestion (IDX), the intensity-variance filter, and a synthetic
digit corpus for offline runs."""
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fileio import write_bytes_atomic
from .seeding import rng_stream

Array = np.ndarray

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed or truncated IDX container."""


@dataclass
class Dataset:
    images: Array  # (n, side*side), pixels in [0, 1]
    labels: Array  # (n,) integer class ids
    side: int
    split: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2 or self.images.shape[1] != self.side**2:
            raise ValueError("images must be (n, side*side)")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels must align with images")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixels must lie in [0, 1]")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, indices, split=None) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.images[idx], self.labels[idx], self.side,
                       self.split if split is None else split)

    def take(self, n: int, split=None) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))), split)


def load_idx(images_path, labels_path, split: str = "") -> Dataset:
    """Parse the big-endian IDX pair; refuses truncated or mismatched files."""
    img_raw = Path(images_path).read_bytes()
    if len(img_raw) < 16:
        raise IdxFormatError(f"{images_path}: missing IDX image header")
    magic, count, rows, cols = struct.unpack(">IIII", img_raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(f"{images_path}: bad magic 0x{magic:08x}")
    expected = 16 + count * rows * cols
    if len(img_raw) != expected:
        raise IdxFormatError(
            f"{images_path}: expected {expected} bytes, found {len(img_raw)}"
        )
    if rows != cols:
        raise IdxFormatError(f"{images_path}: only square images are supported")
    lab_raw = Path(labels_path).read_bytes()
    if len(lab_raw) < 8:
        raise IdxFormatError(f"{labels_path}: missing IDX label header")
    lmagic, lcount = struct.unpack(">II", lab_raw[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise IdxFormatError(f"{labels_path}: bad magic 0x{lmagic:08x}")
    if len(lab_raw) != 8 + lcount:
        raise IdxFormatError(f"{labels_path}: truncated label payload")
    if lcount != count:
        raise IdxFormatError(
            f"image count {count} does not match label count {lcount}"
        )
    pixels = np.frombuffer(img_raw, dtype=np.uint8, offset=16)
    images = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lab_raw, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(images=images, labels=labels, side=rows, split=split)


def write_idx(ds: Dataset, images_path, labels_path) -> None:
    """Inverse of load_idx; pixels quantized to bytes."""
    n = len(ds)
    header = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, ds.side, ds.side)
    body = np.clip(np.round(ds.images * 255.0), 0, 255).astype(np.uint8).tobytes()
    write_bytes_atomic(images_path, header + body)
    lab_header = struct.pack(">II", IDX_LABELS_MAGIC, n)
    write_bytes_atomic(labels_path, lab_header + ds.labels.astype(np.uint8).tobytes())


@dataclass
class FilterReport:
    threshold: float
    kept: list           # kept image arrays, one entry per input batch
    kept_counts: list[int]
    total_counts: list[int]
    mean_kept: float
    std_kept: float

    @property
    def retention(self) -> float:
        return sum(self.kept_counts) / max(1, sum(self.total_counts))


def variance_filter(images, threshold: float = 0.01) -> FilterReport:
    """Keep images whose per-image pixel variance reaches the threshold.

    Accepts a single (n, d) batch or a sequence of batches; the report carries
    the kept count per batch plus mean and standard deviation across batches.
    """
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    batches = [np.asarray(images, dtype=np.float64)] if not isinstance(images, (list, tuple)) \
        else [np.asarray(b, dtype=np.float64) for b in images]
    kept, counts, totals = [], [], []
    for batch in batches:
        if batch.ndim == 1:
            batch = batch[None, :]
        variances = batch.var(axis=1)
        mask = variances >= threshold
        kept.append(batch[mask])
        counts.append(int(mask.sum()))
        totals.append(batch.shape[0])
    arr = np.asarray(counts, dtype=np.float64)
    return FilterReport(threshold=threshold, kept=kept, kept_counts=counts,
                        total_counts=totals, mean_kept=float(arr.mean()),
                        std_kept=float(arr.std()))


# Stroke skeletons on a unit box (x right, y down), one or two polylines each.
_DIGIT_STROKES: dict[int, list[list[tuple[float, float]]]] = {
    0: [[(0.50, 0.10), (0.78, 0.26), (0.78, 0.74), (0.50, 0.90),
         (0.22, 0.74), (0.22, 0.26), (0.50, 0.10)]],
    1: [[(0.34, 0.26), (0.55, 0.10), (0.55, 0.90)]],
    2: [[(0.24, 0.28), (0.38, 0.12), (0.64, 0.12), (0.76, 0.30),
         (0.55, 0.55), (0.24, 0.88), (0.78, 0.88)]],
    3: [[(0.26, 0.16), (0.62, 0.10), (0.76, 0.28), (0.50, 0.46),
         (0.78, 0.66), (0.62, 0.88), (0.24, 0.84)]],
    4: [[(0.62, 0.10), (0.22, 0.62), (0.82, 0.62)],
        [(0.62, 0.32), (0.62, 0.90)]],
    5: [[(0.76, 0.12), (0.28, 0.12), (0.26, 0.46), (0.58, 0.42),
         (0.78, 0.60), (0.72, 0.82), (0.46, 0.90), (0.24, 0.82)]],
    6: [[(0.68, 0.10), (0.38, 0.30), (0.26, 0.58), (0.34, 0.84),
         (0.62, 0.90), (0.74, 0.70), (0.60, 0.52), (0.32, 0.58)]],
    7: [[(0.20, 0.12), (0.80, 0.12), (0.46, 0.90)]],
    8: [[(0.50, 0.10), (0.70, 0.20), (0.70, 0.38), (0.50, 0.48),
         (0.30, 0.38), (0.30, 0.20), (0.50, 0.10)],
        [(0.50, 0.48), (0.74, 0.60), (0.74, 0.80), (0.50, 0.90),
         (0.26, 0.80), (0.26, 0.60), (0.50, 0.48)]],
    9: [[(0.32, 0.90), (0.62, 0.70), (0.74, 0.42), (0.64, 0.14),
         (0.38, 0.10), (0.26, 0.30), (0.40, 0.48), (0.70, 0.44)]],
}


def _render_digit(digit: int, side: int, rng) -> Array:
    """Rasterize one jittered digit: distance-to-stroke with a soft pen."""
    angle = rng.uniform(-0.22, 0.22)
    scale = rng.uniform(0.82, 1.12) * side
    shear = rng.uniform(-0.12, 0.12)
    shift = rng.uniform(-1.8, 1.8, size=2) + side / 2.0
    pen = rng.uniform(0.85, 1.35)
    gain = rng.uniform(0.82, 1.0)
    rot = np.array([[np.cos(angle), -np.sin(angle)],
                    [np.sin(angle), np.cos(angle)]])
    rot = rot @ np.array([[1.0, shear], [0.0, 1.0]])
    ys, xs = np.mgrid[0:side, 0:side]
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    dist = np.full(side * side, np.inf)
    for stroke in _DIGIT_STROKES[digit]:
        pts = (np.asarray(stroke) - 0.5) * scale
        pts = pts @ rot.T + shift
        wobble = rng.normal(0.0, 0.35, size=pts.shape)
        pts = pts + wobble
        for a, b in zip(pts[:-1], pts[1:]):
            ab = b - a
            denom = float(ab @ ab)
            if denom == 0.0:
                d = np.linalg.norm(pix - a, axis=1)
            else:
                t = np.clip(((pix - a) @ ab) / denom, 0.0, 1.0)
                d = np.linalg.norm(pix - (a + t[:, None] * ab), axis=1)
            np.minimum(dist, d, out=dist)
    intensity = gain * np.clip(pen + 0.6 - dist, 0.0, 1.0)
    return np.clip(intensity, 0.0, 1.0)


def synthetic_digits(n: int, seed: int = 0, side: int = 28,
                     split: str = "") -> Dataset:
    """Deterministic 10-class digit corpus with random pose and pen jitter.

    A stand-in corpus for environments without the handwritten-digit IDX
    files; same shapes and value ranges, loadable and writable via IDX.
    """
    rng = rng_stream(seed, "synthetic-digits")
    labels = rng.permutation(np.arange(n) % 10).astype(np.int64)
    images = np.empty((n, side * side))
    for i in range(n):
        images[i] = _render_digit(int(labels[i]), side, rng)
    return Dataset(images=images, labels=labels, side=side, split=split)
