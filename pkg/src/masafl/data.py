"""Synthetic image data, IDX ingestion, client partitioning, and poisoning.

The synthetic generator draws one geometric template per class (a bar pair
plus a blob at class-keyed positions, with a class-keyed speckle texture)
and perturbs it with per-example noise, so a small dense network can learn
the task in a handful of epochs.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, IngestError
from .rng import child_rng

Array = np.ndarray

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledExample:
    """One grayscale image with its label and poison provenance."""

    pixels: Array
    label: int
    poisoned: bool = False
    original_label: int | None = None

    def __post_init__(self):
        if self.original_label is None:
            object.__setattr__(self, "original_label", self.label)


class Dataset:
    """Array-backed collection of labeled grayscale images."""

    def __init__(self, pixels, labels, classes, poisoned=None, original_labels=None):
        self.pixels = np.asarray(pixels, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.classes = int(classes)
        n = len(self.labels)
        if self.pixels.shape[0] != n:
            raise ConfigError(
                f"{self.pixels.shape[0]} images but {n} labels"
            )
        if n and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ConfigError(
                f"labels must lie in [0, {self.classes}), got "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )
        self.poisoned = (
            np.zeros(n, dtype=bool) if poisoned is None else np.asarray(poisoned, dtype=bool)
        )
        self.original_labels = (
            self.labels.copy()
            if original_labels is None
            else np.asarray(original_labels, dtype=np.int64)
        )

    @property
    def image_shape(self) -> tuple[int, int]:
        return tuple(self.pixels.shape[1:3])

    @property
    def examples(self) -> list[LabeledExample]:
        return [self[i] for i in range(len(self))]

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledExample:
        return LabeledExample(
            pixels=self.pixels[i],
            label=int(self.labels[i]),
            poisoned=bool(self.poisoned[i]),
            original_label=int(self.original_labels[i]),
        )

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.pixels[idx],
            self.labels[idx],
            self.classes,
            self.poisoned[idx],
            self.original_labels[idx],
        )

    def flat_pixels(self) -> Array:
        """Images as a (n, H*W) matrix."""
        return self.pixels.reshape(len(self), -1)


def concat(a: Dataset, b: Dataset) -> Dataset:
    if a.classes != b.classes:
        raise ConfigError(f"class counts differ: {a.classes} vs {b.classes}")
    if len(b) == 0:
        return a.subset(np.arange(len(a)))
    if len(a) == 0:
        return b.subset(np.arange(len(b)))
    if a.image_shape != b.image_shape:
        raise ConfigError(f"image shapes differ: {a.image_shape} vs {b.image_shape}")
    return Dataset(
        np.concatenate([a.pixels, b.pixels]),
        np.concatenate([a.labels, b.labels]),
        a.classes,
        np.concatenate([a.poisoned, b.poisoned]),
        np.concatenate([a.original_labels, b.original_labels]),
    )


@dataclass(frozen=True)
class TriggerSpec:
    """Pixel overrides stamped onto an image, relative to an anchor corner."""

    pattern: tuple[tuple[int, int, float], ...]
    anchor: tuple[int, int] = (1, 1)
    shape_name: str = "plus"

    def absolute_coords(self) -> list[tuple[int, int, float]]:
        r0, c0 = self.anchor
        return [(r0 + r, c0 + c, v) for r, c, v in self.pattern]


def plus_trigger(anchor: tuple[int, int] = (1, 1), value: float = 1.0) -> TriggerSpec:
    """Five-pixel plus: north, west, center, east, south arms."""
    offsets = ((0, 1), (1, 0), (1, 1), (1, 2), (2, 1))
    return TriggerSpec(tuple((r, c, value) for r, c in offsets), anchor=anchor)


@dataclass(frozen=True)
class PoisonSpec:
    ratio: float = 0.5
    target_label: int = 0
    trigger: TriggerSpec = field(default_factory=plus_trigger)

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError(f"poison ratio must lie in [0, 1], got {self.ratio}")


def class_template(label: int, image_shape: tuple[int, int], template_seed: int = 0) -> Array:
    """Noise-free intensity template for one class.

    The geometric part (two bars and a blob) depends only on the class and
    image shape; the weaker speckle texture also depends on template_seed,
    which is how distribution-shifted proxies are produced.
    """
    h, w = image_shape
    geom = child_rng(int(label), h, w, rngmod.TEMPLATE)
    template = np.zeros((h, w))
    template[geom.integers(0, h), :] = 0.75
    template[:, geom.integers(0, w)] = 0.75
    br, bc = geom.integers(0, h - 2), geom.integers(0, w - 2)
    template[br : br + 3, bc : bc + 3] = 0.8

    texture = child_rng(int(label), h, w, rngmod.TEMPLATE, int(template_seed) + 1)
    speckle = texture.uniform(0.0, 0.3, size=(h, w)) * (texture.random((h, w)) < 0.25)
    return np.clip(template + speckle, 0.0, 0.8)


def gen_synthetic(
    classes: int,
    per_class: int,
    image_shape: tuple[int, int] = (10, 10),
    seed: int = 0,
    template_seed: int = 0,
) -> Dataset:
    """Procedural dataset: per-class templates plus uniform example noise."""
    h, w = image_shape
    if classes < 4:
        raise ConfigError(f"need at least 4 classes, got {classes}")
    if h < 8 or w < 8:
        raise ConfigError(f"image sides must be >= 8, got {image_shape}")
    rng = child_rng(int(seed), rngmod.DATA)
    pixels = np.empty((classes * per_class, h, w))
    labels = np.empty(classes * per_class, dtype=np.int64)
    for c in range(classes):
        template = class_template(c, image_shape, template_seed)
        noise = rng.uniform(-0.2, 0.2, size=(per_class, h, w))
        lo = c * per_class
        pixels[lo : lo + per_class] = np.clip(template + noise, 0.0, 1.0)
        labels[lo : lo + per_class] = c
    return Dataset(pixels, labels, classes)


def _read_exact(buf: bytes, offset: int, count: int, path: str) -> bytes:
    if offset + count > len(buf):
        raise IngestError(
            f"{path}: truncated at byte {len(buf)}, needed {offset + count}"
        )
    return buf[offset : offset + count]


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label file pair (big-endian, standard magics)."""
    with open(images_path, "rb") as f:
        img_buf = f.read()
    with open(labels_path, "rb") as f:
        lbl_buf = f.read()

    (img_magic,) = struct.unpack(">I", _read_exact(img_buf, 0, 4, str(images_path)))
    if img_magic != IDX_IMAGES_MAGIC:
        raise IngestError(
            f"{images_path}: bad magic 0x{img_magic:08x} at byte 0, "
            f"expected 0x{IDX_IMAGES_MAGIC:08x}"
        )
    n, h, w = struct.unpack(">III", _read_exact(img_buf, 4, 12, str(images_path)))
    raw = _read_exact(img_buf, 16, n * h * w, str(images_path))
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w) / 255.0

    (lbl_magic,) = struct.unpack(">I", _read_exact(lbl_buf, 0, 4, str(labels_path)))
    if lbl_magic != IDX_LABELS_MAGIC:
        raise IngestError(
            f"{labels_path}: bad magic 0x{lbl_magic:08x} at byte 0, "
            f"expected 0x{IDX_LABELS_MAGIC:08x}"
        )
    (n_labels,) = struct.unpack(">I", _read_exact(lbl_buf, 4, 4, str(labels_path)))
    labels = np.frombuffer(_read_exact(lbl_buf, 8, n_labels, str(labels_path)), dtype=np.uint8)

    if n_labels != n:
        raise IngestError(
            f"{images_path} holds {n} images but {labels_path} holds {n_labels} labels"
        )
    classes = int(labels.max()) + 1 if n else 1
    return Dataset(pixels, labels.astype(np.int64), classes)


def partition_iid(ds: Dataset, n_clients: int, seed: int = 0) -> list[Dataset]:
    """Shuffle and deal examples evenly; shard sizes differ by at most one."""
    if n_clients < 1:
        raise ValueError(f"n_clients must be >= 1, got {n_clients}")
    rng = child_rng(int(seed), rngmod.PARTITION)
    order = rng.permutation(len(ds))
    return [ds.subset(chunk) for chunk in np.array_split(order, n_clients)]


def partition_dirichlet(ds: Dataset, n_clients: int, alpha: float, seed: int = 0) -> list[Dataset]:
    """Per-class Dirichlet(alpha) proportions decide each client's share.

    Any client left empty is topped up with one example moved from the
    largest shard so every client stays trainable.
    """
    if n_clients < 1:
        raise ValueError(f"n_clients must be >= 1, got {n_clients}")
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    rng = child_rng(int(seed), rngmod.PARTITION)
    assignments: list[list[int]] = [[] for _ in range(n_clients)]
    for c in range(ds.classes):
        idx = np.flatnonzero(ds.labels == c)
        idx = idx[rng.permutation(len(idx))]
        props = rng.dirichlet(np.full(n_clients, alpha))
        cuts = (np.cumsum(props)[:-1] * len(idx)).astype(np.int64)
        for client, chunk in enumerate(np.split(idx, cuts)):
            assignments[client].extend(chunk.tolist())

    for client in range(n_clients):
        if not assignments[client]:
            donor = max(range(n_clients), key=lambda j: len(assignments[j]))
            take = int(rng.integers(0, len(assignments[donor])))
            assignments[client].append(assignments[donor].pop(take))
    return [ds.subset(np.array(a, dtype=np.int64)) for a in assignments]


def stamp_trigger(ex: LabeledExample, trigger: TriggerSpec) -> LabeledExample:
    """Overwrite the trigger pixels; label and provenance are untouched."""
    h, w = ex.pixels.shape
    pixels = ex.pixels.copy()
    for r, c, v in trigger.absolute_coords():
        if not (0 <= r < h and 0 <= c < w):
            raise ConfigError(
                f"trigger pixel ({r}, {c}) falls outside a {h}x{w} image"
            )
        pixels[r, c] = v
    return replace(ex, pixels=pixels)


def stamp_dataset(ds: Dataset, trigger: TriggerSpec) -> Dataset:
    """Stamp every image; used to build triggered evaluation sets."""
    h, w = ds.image_shape
    pixels = ds.pixels.copy()
    for r, c, v in trigger.absolute_coords():
        if not (0 <= r < h and 0 <= c < w):
            raise ConfigError(
                f"trigger pixel ({r}, {c}) falls outside a {h}x{w} image"
            )
        pixels[:, r, c] = v
    return Dataset(pixels, ds.labels, ds.classes, np.ones(len(ds), dtype=bool), ds.original_labels)


def poison_shard(ds: Dataset, spec: PoisonSpec, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Split a shard into (clean part, poisoned part).

    floor(ratio * n) examples are chosen at random, stamped with the
    trigger, and relabeled to the target; the rest are returned untouched
    and in their original order.
    """
    rng = child_rng(int(seed), rngmod.POISON)
    n = len(ds)
    n_poison = math.floor(spec.ratio * n)
    chosen = rng.choice(n, size=n_poison, replace=False) if n_poison else np.array([], dtype=np.int64)
    chosen_mask = np.zeros(n, dtype=bool)
    chosen_mask[chosen.astype(np.int64)] = True

    clean = ds.subset(np.flatnonzero(~chosen_mask))
    picked = ds.subset(np.sort(chosen.astype(np.int64)))
    if len(picked):
        stamped = stamp_dataset(picked, spec.trigger)
        poisoned = Dataset(
            stamped.pixels,
            np.full(len(picked), spec.target_label, dtype=np.int64),
            ds.classes,
            np.ones(len(picked), dtype=bool),
            picked.labels,
        )
    else:
        poisoned = ds.subset(np.array([], dtype=np.int64))
    return clean, poisoned


def sample_proxy(ds: Dataset, fraction: float, seed: int = 0, shifted: bool = False) -> Dataset:
    """Uniform clean sample of ceil(fraction * n) examples.

    With `shifted`, the sampled examples are re-rendered from templates
    drawn with a different texture seed, emulating a generated proxy set
    that overlaps the task without sharing pixels.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    rng = child_rng(int(seed), rngmod.PROXY)
    clean_idx = np.flatnonzero(~ds.poisoned)
    n_take = math.ceil(fraction * len(ds))
    n_take = min(n_take, len(clean_idx))
    chosen = clean_idx[rng.choice(len(clean_idx), size=n_take, replace=False)]
    sampled = ds.subset(chosen)
    if not shifted:
        return sampled

    h, w = ds.image_shape
    pixels = np.empty_like(sampled.pixels)
    for i, label in enumerate(sampled.labels):
        template = class_template(int(label), (h, w), template_seed=int(seed) + 1)
        pixels[i] = np.clip(template + rng.uniform(-0.2, 0.2, size=(h, w)), 0.0, 1.0)
    return Dataset(pixels, sampled.labels, ds.classes)
