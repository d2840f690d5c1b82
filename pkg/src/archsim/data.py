"""Datasets: IDX ingestion and the seeded procedural shapes dataset."""
from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from archsim import rng as rngmod

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
SYNTH_FORMAT = "archsim-synth/1"
GENERATOR_VERSION = 1


class IdxFormatError(ValueError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


@dataclass
class Dataset:
    name: str
    images: np.ndarray  # (N, H, W, C) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: np.ndarray   # (N,) "train" / "eval"
    num_classes: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype="<U5")
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got {self.images.shape}")
        if not (len(self.images) == len(self.labels) == len(self.split)):
            raise ValueError("images, labels and split tags differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not set(np.unique(self.split)) <= {"train", "eval"}:
            raise ValueError("split tags must be 'train' or 'eval'")

    def __len__(self):
        return len(self.labels)

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, split: str) -> "Dataset":
        mask = self.split == split
        return self.take(np.flatnonzero(mask))

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.name, self.images[idx], self.labels[idx], self.split[idx],
                       self.num_classes, self.provenance)


# ---------------------------------------------------------------- IDX


def _read_bytes(path: Path) -> bytes:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, path: Path) -> np.ndarray:
    if len(raw) < 8:
        raise IdxTruncatedError(f"{path}: header truncated ({len(raw)} bytes)")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise IdxMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: header truncated ({len(raw)} bytes)")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise IdxTruncatedError(f"{path}: {len(raw) - header} data bytes, header promises {count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def _labels_path(images_path: Path) -> Path:
    name = images_path.name
    for a, b in (("images-idx3", "labels-idx1"), ("images", "labels")):
        if a in name:
            return images_path.with_name(name.replace(a, b))
    raise FileNotFoundError(f"cannot infer labels file for {images_path}")


def load_idx(path, labels_path=None, split: str = "train", num_classes: int | None = None) -> Dataset:
    """Read an IDX image file (and its labels file) into a Dataset scaled to [0, 1]."""
    path = Path(path)
    labels_path = Path(labels_path) if labels_path else _labels_path(path)
    images = _parse_idx(_read_bytes(path), IMAGES_MAGIC, path)
    labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, labels_path)
    if len(images) != len(labels):
        raise IdxCountMismatchError(f"{len(images)} images but {len(labels)} labels")
    x = images.astype(np.float32)[..., None] / np.float32(255.0)
    k = num_classes or (int(labels.max()) + 1 if len(labels) else 1)
    return Dataset(path.name, x, labels.astype(np.int64), np.full(len(labels), split), k,
                   {"kind": "idx-file", "images": str(path), "labels": str(labels_path)})


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (3-d images or 1-d labels)."""
    arr = np.asarray(array, dtype=np.uint8)
    magic = {3: IMAGES_MAGIC, 1: LABELS_MAGIC}[arr.ndim]
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


# ---------------------------------------------------------------- procedural shapes

SHAPES = ("disk", "square", "triangle", "cross", "ring")
TEXTURES = ("low", "high")


def _shape_mask(kind, yy, xx, cy, cx, r, theta):
    dy, dx = yy - cy, xx - cx
    # rotate coordinates
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    if kind == "disk":
        return (u**2 + v**2) <= r**2
    if kind == "square":
        return (np.abs(u) <= 0.8 * r) & (np.abs(v) <= 0.8 * r)
    if kind == "triangle":
        return (v <= 0.6 * r) & (v >= -r + 1.8 * np.abs(u))
    if kind == "cross":
        w = 0.33 * r
        return ((np.abs(u) <= w) & (np.abs(v) <= r)) | ((np.abs(v) <= w) & (np.abs(u) <= r))
    if kind == "ring":
        d2 = u**2 + v**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(kind)


def _render(rng, kind, texture, res, channels):
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float32) + 0.5
    jitter = res / 16
    cy = res / 2 + rng.uniform(-jitter, jitter)
    cx = res / 2 + rng.uniform(-jitter, jitter)
    r = rng.uniform(0.32, 0.4) * res
    theta = rng.uniform(-0.2, 0.2)
    mask = _shape_mask(kind, yy, xx, cy, cx, r, theta).astype(np.float32)

    angle = rng.uniform(0, np.pi)
    if texture == "low":
        period = rng.uniform(0.6, 1.2) * res
    else:
        period = rng.uniform(2.2, 3.2)
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.7 + 0.3 * np.sin(2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period + phase)

    fg = rng.uniform(0.6, 1.0, size=channels).astype(np.float32)
    bg = rng.uniform(0.0, 0.3, size=channels).astype(np.float32)
    img = bg * (1 - mask[..., None]) + (fg * wave[..., None]) * mask[..., None]
    img += rng.normal(0, 0.04, size=img.shape).astype(np.float32)
    return np.clip(img, 0, 1).astype(np.float32)


def synth_shapes(seed: int, num_classes: int = 10, per_class: int = 500, resolution: int = 32,
                 channels: int = 3, train_fraction: float = 0.5) -> Dataset:
    """Procedural shape x texture-frequency classes, bit-reproducible from ``seed``.

    Class ``c`` is shape ``SHAPES[c // 2]`` filled with texture ``TEXTURES[c % 2]``,
    so half the distinctions need the low-frequency outline and half need
    the high-frequency fill.
    """
    if resolution < 16:
        raise ValueError("resolution must be at least 16")
    if per_class <= 0:
        raise ValueError("per_class must be positive")
    if not 2 <= num_classes <= len(SHAPES) * len(TEXTURES):
        raise ValueError(f"num_classes must be in [2, {len(SHAPES) * len(TEXTURES)}]")
    images, labels = [], []
    for c in range(num_classes):
        kind, texture = SHAPES[c // 2], TEXTURES[c % 2]
        rng = rngmod.stream(seed, "synth", c)
        for _ in range(per_class):
            images.append(_render(rng, kind, texture, resolution, channels))
            labels.append(c)
    labels = np.array(labels)
    order = rngmod.stream(seed, "synth-order").permutation(len(labels))
    n_train = int(round(train_fraction * len(labels)))
    split = np.where(np.arange(len(labels)) < n_train, "train", "eval")
    recipe = synth_recipe(seed, num_classes, per_class, resolution, channels, train_fraction)
    return Dataset(f"synth-shapes-{seed}", np.stack(images)[order], labels[order], split,
                   num_classes, {"kind": "synthetic", **recipe})


def synth_recipe(seed, num_classes=10, per_class=500, resolution=32, channels=3, train_fraction=0.5) -> dict:
    return {"format": SYNTH_FORMAT, "generator-version": GENERATOR_VERSION, "seed": int(seed),
            "num-classes": int(num_classes), "per-class": int(per_class),
            "resolution": int(resolution), "channels": int(channels),
            "train-fraction": float(train_fraction)}


def load_dataset(path) -> Dataset:
    """Load a dataset reference: an ``archsim-synth/1`` recipe JSON or an IDX images file."""
    path = Path(path)
    if path.suffix == ".json":
        recipe = json.loads(path.read_text())
        return dataset_from_recipe(recipe)
    return load_idx(path)


def dataset_from_recipe(recipe: dict) -> Dataset:
    if recipe.get("format") != SYNTH_FORMAT:
        raise ValueError(f"unsupported dataset format {recipe.get('format')!r}")
    if recipe.get("generator-version") != GENERATOR_VERSION:
        raise ValueError(f"generator version {recipe.get('generator-version')} != {GENERATOR_VERSION}")
    return synth_shapes(recipe["seed"], recipe["num-classes"], recipe["per-class"],
                        recipe["resolution"], recipe.get("channels", 3), recipe.get("train-fraction", 0.5))
