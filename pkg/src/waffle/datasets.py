"""Dataset ingestion: IDX binaries and seeded synthetic image generators."""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ._validation import check_random_state
from .exceptions import DataValidationError

__all__ = ["Dataset", "SyntheticSpec", "load_idx", "write_idx", "synth_dataset", "split_dataset"]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class Dataset(NamedTuple):
    images: np.ndarray  # (n, H, W) or (n, H, W, C), values in [0, 1]
    labels: np.ndarray  # (n,) int

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


def _read_bytes(path):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw, expected_magic, name):
    if len(raw) < 8:
        raise DataValidationError(f"{name}: header truncated, expected at least 8 bytes, got {len(raw)}")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise DataValidationError(f"{name}: bad magic 0x{magic:08x} at byte offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataValidationError(f"{name}: header truncated, expected {header} bytes, got {len(raw)}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise DataValidationError(
            f"{name}: expected {expected} bytes for dims {dims} (payload from byte offset {header}), got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(path_images, path_labels) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    images = _parse_idx(_read_bytes(path_images), IDX_IMAGES_MAGIC, str(path_images))
    labels = _parse_idx(_read_bytes(path_labels), IDX_LABELS_MAGIC, str(path_labels))
    if images.ndim != 3:
        raise DataValidationError(f"{path_images}: expected 3 dimensions (n, rows, cols), got {images.ndim}")
    if images.shape[0] != labels.shape[0]:
        raise DataValidationError(f"image count {images.shape[0]} does not match label count {labels.shape[0]}")
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64))


def write_idx(path_images, path_labels, images, labels):
    """Write uint8 images (n, rows, cols) and labels (n,) as uncompressed IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(path_images).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(path_labels).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


@dataclass(frozen=True)
class SyntheticSpec:
    """Class-conditional synthetic images.

    Each image is a background plus one Gaussian blob whose centre and width
    depend on the class. Class centres sit on a ring of radius
    ``ring_radius * min(H, W)`` (all at the centre when 0); the blob width is
    ``blob_sigma * min(H, W)`` scaled by ``1 + size_spread * c / (k - 1)`` for
    class ``c``. The background is ``background`` plus a smooth random field
    of amplitude ``background_texture`` and white noise of std ``pixel_noise``.
    ``textured_patches`` adds a random fine grating of amplitude ``texture``;
    ``gaussian_blobs`` does not. ``separation`` scales the blob amplitude.
    """

    num_classes: int = 2
    samples_per_class: int = 50
    height: int = 28
    width: int = 28
    channels: int = 1
    generator: str = "textured_patches"
    separation: float = 1.0
    jitter: float = 2.0
    texture: float = 0.15
    ring_radius: float = 0.25
    blob_sigma: float = 0.12
    size_spread: float = 0.0
    size_jitter: float = 0.0
    background: float = 0.35
    background_texture: float = 0.08
    pixel_noise: float = 0.0


def _smooth_field(rng, n, h, w, width):
    noise = rng.normal(size=(n, h, w))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    lp = np.exp(-(fx**2 + fy**2) * (2 * np.pi * width) ** 2 / 2)
    field = np.fft.ifft2(np.fft.fft2(noise) * lp).real
    return field / (field.std(axis=(1, 2), keepdims=True) + 1e-12)


def synth_dataset(spec: SyntheticSpec, rng=None) -> Dataset:
    """Generate a balanced labelled dataset; deterministic given ``rng``."""
    if spec.generator not in ("textured_patches", "gaussian_blobs"):
        raise ValueError(f"unknown generator {spec.generator!r}")
    rng = check_random_state(rng)
    h, w, k = spec.height, spec.width, spec.num_classes
    n = k * spec.samples_per_class
    labels = np.repeat(np.arange(k), spec.samples_per_class)
    rng.shuffle(labels)

    angles = 2 * np.pi * np.arange(k) / k
    radius = spec.ring_radius * min(h, w)
    cy = (h - 1) / 2 + radius * np.sin(angles)
    cx = (w - 1) / 2 + radius * np.cos(angles)
    widths = spec.blob_sigma * min(h, w) * (1 + spec.size_spread * np.arange(k) / max(k - 1, 1))

    yy = np.arange(h)[None, :, None]
    xx = np.arange(w)[None, None, :]
    images = np.empty((n, h, w, spec.channels))
    for c in range(spec.channels):
        jy = rng.normal(0.0, spec.jitter, n)
        jx = rng.normal(0.0, spec.jitter, n)
        amp = spec.separation * rng.uniform(0.35, 0.55, n)
        sig = widths[labels] * (1 + spec.size_jitter * rng.uniform(-1, 1, n))
        by = (cy[labels] + jy)[:, None, None]
        bx = (cx[labels] + jx)[:, None, None]
        blob = amp[:, None, None] * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * sig[:, None, None] ** 2))
        img = spec.background + blob
        if spec.background_texture:
            img = img + spec.background_texture * _smooth_field(rng, n, h, w, 0.15 * min(h, w))
        if spec.pixel_noise:
            img = img + rng.normal(0.0, spec.pixel_noise, (n, h, w))
        if spec.generator == "textured_patches":
            theta = rng.uniform(0, np.pi, n)[:, None, None]
            freq = rng.uniform(0.6, 1.2, n)[:, None, None] * np.pi / 2
            phase = rng.uniform(0, 2 * np.pi, n)[:, None, None]
            img = img + spec.texture * np.cos(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        images[..., c] = img
    images = np.clip(images, 0.0, 1.0)
    if spec.channels == 1:
        images = images[..., 0]
    return Dataset(images, labels)


def split_dataset(data: Dataset, fraction: float, rng=None) -> tuple[Dataset, Dataset]:
    """Random disjoint split; the first part holds ``fraction`` of the samples."""
    rng = check_random_state(rng)
    perm = rng.permutation(len(data))
    cut = int(round(fraction * len(data)))
    return data.subset(np.sort(perm[:cut])), data.subset(np.sort(perm[cut:]))
