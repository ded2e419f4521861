"""Synthetic image datasets, dataset files and PGM/PPM grids."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .container import CorruptFileError, read_tensor, write_tensor

TRAIN, VALID = 0, 1


@dataclass
class Dataset:
    """Integer-valued images ``(n, s, s, c)`` in ``[0, 256)`` with a train/valid tag per example."""

    images: np.ndarray
    split: np.ndarray
    meta: dict = field(default_factory=dict)
    # generator-side annotation, not persisted
    blob_centers: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.split = np.asarray(self.split, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, s, s, c), got {self.images.shape}")
        if self.split.shape != (self.images.shape[0],):
            raise ValueError("split tags must have one entry per image")
        if not np.all(np.isin(self.split, (TRAIN, VALID))):
            raise ValueError("split tags must be 0 (train) or 1 (valid)")
        if self.images.size and (self.images.min() < 0 or self.images.max() >= 256
                                 or np.any(self.images != np.floor(self.images))):
            raise ValueError("image values must be integers in [0, 256)")

    @property
    def layout(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def train(self) -> np.ndarray:
        return self.images[self.split == TRAIN]

    @property
    def valid(self) -> np.ndarray:
        return self.images[self.split == VALID]

    def __len__(self) -> int:
        return self.images.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (np.array_equal(self.images, other.images) and np.array_equal(self.split, other.split)
                and self.meta == other.meta)


def generate_blobs(n: int, s: int = 8, seed: int = 0, structure: float = 0.8, c: int = 1,
                   informative_fraction: float = 0.5, valid_fraction: float = 0.2) -> Dataset:
    """Blob images with a smooth background gradient, corrupted by per-pixel noise.

    A fixed, seed-determined subset of pixels (``informative_fraction`` of
    them) carries the rendered scene; the remaining pixels are replaced by
    i.i.d. uniform noise in every image. ``structure`` in ``[0, 1]`` blends the
    informative pixels between noise (0) and the clean scene (1), so
    ``structure=0`` yields pure i.i.d. uniform images.
    """
    if n <= 0 or s <= 0 or s % 2 or c <= 0:
        raise ValueError("need n > 0, c > 0 and an even positive size s")
    if not 0.0 <= structure <= 1.0 or not 0.0 <= informative_fraction <= 1.0:
        raise ValueError("structure and informative_fraction must lie in [0, 1]")
    if not 0.0 <= valid_fraction < 1.0:
        raise ValueError("valid_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    informative = rng.random((s, s)) < informative_fraction

    yy, xx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    theta = rng.uniform(0, 2 * math.pi, size=n)
    offset = rng.uniform(30, 90, size=(n, c))
    slope = rng.uniform(10, 40, size=(n, c))
    proj = (np.cos(theta)[:, None, None] * (xx - (s - 1) / 2) + np.sin(theta)[:, None, None] * (yy - (s - 1) / 2)) / s
    scene = offset[:, None, None, :] + slope[:, None, None, :] * proj[..., None]

    n_blobs = rng.integers(1, 4, size=n)
    centers = rng.integers(0, s * s, size=(n, 3))
    amps = rng.uniform(60, 150, size=(n, 3, c))
    widths = rng.uniform(0.8, 1.6, size=(n, 3))
    for b in range(3):
        on = (b < n_blobs).astype(np.float64)
        cy, cx = np.divmod(centers[:, b], s)
        d2 = (yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2
        prof = np.exp(-d2 / (2 * widths[:, b, None, None] ** 2)) * on[:, None, None]
        scene = scene + prof[..., None] * amps[:, b, None, None, :]
    scene = np.clip(scene, 0.0, 255.0)

    noise = rng.uniform(0.0, 256.0, size=(n, s, s, c))
    weight = np.where(informative, structure, 0.0)[None, :, :, None]
    images = np.floor(np.clip(weight * scene + (1.0 - weight) * noise, 0.0, 255.999))

    split = np.zeros(n, dtype=np.int64)
    n_valid = int(round(valid_fraction * n))
    if n_valid:
        split[rng.permutation(n)[:n_valid]] = VALID
    meta = {"name": "blobs", "seed": int(seed), "n": int(n), "s": int(s), "c": int(c),
            "structure": float(structure), "informative_fraction": float(informative_fraction)}
    # the first blob is present in every image
    return Dataset(images, split, meta, blob_centers=centers[:, 0])


# ---------------------------------------------------------------------------
# dataset files


def _meta_path(path) -> str:
    return os.fspath(path) + ".meta"


def _parse_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, ds.images)
        write_tensor(fh, ds.split)
    meta = dict(ds.meta)
    n, s, _, c = ds.images.shape
    meta.update(n=n, s=s, c=c)
    with open(_meta_path(path), "w", newline="\n") as fh:
        for k in sorted(meta):
            fh.write(f"{k}={meta[k]}\n")


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        images = read_tensor(fh)
        split = read_tensor(fh)
        if fh.read(1):
            raise CorruptFileError(f"{path}: trailing bytes after dataset records")
    if images.ndim != 4 or split.shape != (images.shape[0],):
        raise CorruptFileError(f"{path}: unexpected record shapes {images.shape}, {split.shape}")
    meta = {}
    if os.path.exists(_meta_path(path)):
        with open(_meta_path(path)) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    k, _, v = line.partition("=")
                    meta[k] = _parse_value(v)
    return Dataset(images, split.astype(np.int64), meta)


# ---------------------------------------------------------------------------
# PGM / PPM


def tile_images(images, cols: int | None = None) -> np.ndarray:
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 3:
        imgs = imgs[None]
    k, h, w, c = imgs.shape
    cols = cols or math.ceil(math.sqrt(k))
    rows = math.ceil(k / cols)
    grid = np.zeros((rows * h, cols * w, c))
    for i in range(k):
        r, q = divmod(i, cols)
        grid[r * h:(r + 1) * h, q * w:(q + 1) * w] = imgs[i]
    return np.floor(np.clip(grid, 0.0, 255.0)).astype(np.uint8)


def write_image_grid(images, path, cols: int | None = None) -> np.ndarray:
    """Write images as a binary PGM (1 channel) or PPM (3 channels) grid; returns the pixel grid."""
    grid = tile_images(images, cols)
    c = grid.shape[2]
    if c not in (1, 3):
        raise ValueError(f"cannot write {c}-channel images; only 1 (PGM) or 3 (PPM) are supported")
    tag = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(tag + b"\n%d %d\n255\n" % (grid.shape[1], grid.shape[0]))
        fh.write(grid.tobytes())
    return grid


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptFileError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise CorruptFileError(f"{path}: unsupported PNM variant")
    c = 1 if magic == b"P5" else 3
    body = raw[pos + 1:]
    if len(body) != w * h * c:
        raise CorruptFileError(f"{path}: payload has {len(body)} bytes, expected {w * h * c}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, c)
