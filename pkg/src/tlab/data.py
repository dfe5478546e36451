"""Image datasets: synthetic digit domains and IDX file loading.

All datasets normalize to float32 images of shape (N, 3, 32, 32) with
pixels in [-1, 1] and int64 labels.

The synthetic generator renders seven-segment digit glyphs with
per-image nuisance variation (rotation, stroke jitter, background
texture, polarity, tint).  A ``DomainStyle`` fixes the nuisance
distribution, so two styles play the role of two related but distinct
image domains; styles differ enough that a classifier trained on one
is measurably worse on another, while the shared glyph geometry keeps
transfer learning useful.

IDX files follow the classic layout: big-endian i32 magic (2051 for
image files, 2049 for label files), big-endian i32 dimensions, then a
uint8 payload.  Grayscale inputs are replicated to three channels and
bilinearly resized to 32x32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "IMAGE_SIZE",
    "LabeledDataset",
    "DomainStyle",
    "STYLE_PRESETS",
    "IdxError",
    "IdxMagicError",
    "IdxTruncatedError",
    "IdxCountMismatchError",
    "resolve_style",
    "synth_domain",
    "load_idx",
    "bilinear_resize",
    "partition",
    "subsample",
    "train_val_split",
]

IMAGE_SIZE = 32


class IdxError(Exception):
    """Base class for IDX parsing failures."""


class IdxMagicError(IdxError):
    """File does not start with the expected IDX magic number."""


class IdxTruncatedError(IdxError):
    """Payload is shorter than the header dimensions require."""


class IdxCountMismatchError(IdxError):
    """Image and label files disagree on the number of examples."""


@dataclass
class LabeledDataset:
    """Float32 images (N, 3, 32, 32) in [-1, 1] with int64 labels (N,)."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    domain_name: str = ""

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1:] != (3, IMAGE_SIZE,
                                                              IMAGE_SIZE):
            raise ValueError(
                f"images must be (N, 3, {IMAGE_SIZE}, {IMAGE_SIZE}), "
                f"got {self.images.shape}")
        if self.labels.shape != (len(self.images),):
            raise ValueError(
                f"labels shape {self.labels.shape} does not match "
                f"{len(self.images)} images")
        if len(self.labels) and (self.labels.min() < 0
                                 or self.labels.max() >= self.num_classes):
            raise ValueError(
                f"labels must lie in [0, {self.num_classes})")
        if len(self.images):
            lo, hi = float(self.images.min()), float(self.images.max())
            if lo < -1.0 or hi > 1.0:
                raise ValueError(
                    f"pixel values must lie in [-1, 1], got [{lo}, {hi}]")

    def __len__(self):
        return len(self.images)


@dataclass(frozen=True)
class DomainStyle:
    """Nuisance distribution for the synthetic digit renderer.

    background: plain | colored-noise | gradient
    polarity:   normal (dark ink on light ground) | inverted
    stroke_jitter is the endpoint jitter sigma in pixels and
    rotation_deg the half-range of the per-image rotation.
    """

    name: str
    background: str = "plain"
    stroke_jitter: float = 0.5
    rotation_deg: float = 8.0
    polarity: str = "normal"
    tint: tuple = (0.08, 0.08, 0.12)

    def __post_init__(self):
        if self.background not in ("plain", "colored-noise", "gradient"):
            raise ValueError(f"unknown background mode {self.background!r}")
        if self.polarity not in ("normal", "inverted"):
            raise ValueError(f"unknown polarity {self.polarity!r}")
        if self.stroke_jitter < 0 or self.rotation_deg < 0:
            raise ValueError("stroke_jitter and rotation_deg must be >= 0")
        if len(self.tint) != 3:
            raise ValueError("tint must have three channels")


STYLE_PRESETS = {
    "plain": DomainStyle(name="plain"),
    "noisy": DomainStyle(name="noisy", background="colored-noise",
                         stroke_jitter=0.9, rotation_deg=18.0,
                         tint=(0.10, 0.06, 0.05)),
    "gradient": DomainStyle(name="gradient", background="gradient",
                            stroke_jitter=0.7, rotation_deg=12.0,
                            tint=(0.05, 0.10, 0.08)),
    "inverted": DomainStyle(name="inverted", polarity="inverted",
                            stroke_jitter=0.5, rotation_deg=8.0,
                            tint=(0.08, 0.08, 0.12)),
}


def resolve_style(style):
    """Accept a DomainStyle, a preset name, or a dict of field overrides."""
    if isinstance(style, DomainStyle):
        return style
    if isinstance(style, str):
        if style not in STYLE_PRESETS:
            raise ValueError(
                f"unknown style preset {style!r}; known: "
                f"{sorted(STYLE_PRESETS)}")
        return STYLE_PRESETS[style]
    if isinstance(style, dict):
        kwargs = dict(style)
        if "tint" in kwargs:
            kwargs["tint"] = tuple(kwargs["tint"])
        return DomainStyle(**kwargs)
    raise TypeError(f"cannot interpret style of type {type(style).__name__}")


# Seven-segment geometry on the 32x32 canvas: corner and midpoint nodes,
# segments as node pairs, digits as segment subsets.
_NODES = {
    "tl": (10.5, 6.5), "tr": (21.5, 6.5),
    "ml": (10.5, 16.0), "mr": (21.5, 16.0),
    "bl": (10.5, 25.5), "br": (21.5, 25.5),
}
_SEGMENTS = {
    "a": ("tl", "tr"), "b": ("tr", "mr"), "c": ("mr", "br"),
    "d": ("bl", "br"), "e": ("ml", "bl"), "f": ("tl", "ml"),
    "g": ("ml", "mr"),
}
_DIGIT_SEGMENTS = {
    0: "abcdef", 1: "bc", 2: "abged", 3: "abcdg", 4: "fgbc",
    5: "afgcd", 6: "afgedc", 7: "abc", 8: "abcdefg", 9: "abcdfg",
}

_YY, _XX = np.meshgrid(np.arange(IMAGE_SIZE, dtype=np.float64) + 0.5,
                       np.arange(IMAGE_SIZE, dtype=np.float64) + 0.5,
                       indexing="ij")


def _segment_distance(p0, p1):
    """Distance from every pixel center to the segment p0-p1."""
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    den = dx * dx + dy * dy
    if den < 1e-12:
        return np.hypot(_XX - p0[0], _YY - p0[1])
    t = ((_XX - p0[0]) * dx + (_YY - p0[1]) * dy) / den
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(_XX - (p0[0] + t * dx), _YY - (p0[1] + t * dy))


def _render_glyph_mask(digit, rng, style):
    """Soft ink mask in [0, 1] for one digit under one nuisance draw."""
    theta = np.deg2rad(rng.uniform(-style.rotation_deg, style.rotation_deg))
    shift = np.clip(rng.normal(0.0, 1.2, size=2), -2.5, 2.5)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    cx = cy = IMAGE_SIZE / 2.0
    mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    for seg in _DIGIT_SEGMENTS[digit]:
        n0, n1 = _SEGMENTS[seg]
        pts = np.array([_NODES[n0], _NODES[n1]], dtype=np.float64)
        pts += np.clip(rng.normal(0.0, style.stroke_jitter, size=(2, 2)),
                       -2.5, 2.5)
        rel = pts - (cx, cy)
        rot = np.column_stack([rel[:, 0] * cos_t - rel[:, 1] * sin_t,
                               rel[:, 0] * sin_t + rel[:, 1] * cos_t])
        pts = rot + (cx, cy) + shift
        d = _segment_distance(pts[0], pts[1])
        # 1 inside the stroke, linear falloff over one pixel of antialias
        mask = np.maximum(mask, np.clip(1.9 - d, 0.0, 1.0))
    return mask


def _render_background(rng, style):
    if style.background == "plain":
        level = np.clip(rng.normal(0.85, 0.04), 0.7, 0.97)
        return np.full((3, IMAGE_SIZE, IMAGE_SIZE), level)
    if style.background == "colored-noise":
        base = np.clip(rng.normal(0.72, 0.05), 0.55, 0.9)
        noise = rng.uniform(-0.28, 0.22, size=(3, IMAGE_SIZE, IMAGE_SIZE))
        return np.clip(base + noise, 0.0, 1.0)
    phi = rng.uniform(0.0, 2.0 * np.pi)
    ramp = (np.cos(phi) * _XX + np.sin(phi) * _YY) / IMAGE_SIZE
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
    weights = np.array([1.0, 0.85, 0.7]) * rng.uniform(0.85, 1.0)
    return np.clip(0.35 + 0.55 * ramp[None] * weights[:, None, None], 0.0, 1.0)


def synth_domain(style, n, num_classes, seed, domain_name=None):
    """Render ``n`` labeled glyphs with classes cycling 0..num_classes-1.

    Label sequence is balanced, then shuffled; everything (labels,
    nuisances, shuffle) flows from one seeded generator, so equal
    arguments give bit-identical datasets.
    """
    style = resolve_style(style)
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not 2 <= num_classes <= 10:
        raise ValueError(
            f"num_classes must be in [2, 10] for digit glyphs, got {num_classes}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5F)))
    labels = np.arange(n, dtype=np.int64) % num_classes
    ink = np.asarray(style.tint, dtype=np.float64)[:, None, None]
    images = np.empty((n, 3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    for i in range(n):
        mask = _render_glyph_mask(int(labels[i]), rng, style)
        bg = _render_background(rng, style)
        img = bg * (1.0 - mask) + ink * mask
        if style.polarity == "inverted":
            img = 1.0 - img
        images[i] = (2.0 * img - 1.0).astype(np.float32)
    perm = rng.permutation(n)
    return LabeledDataset(images=images[perm], labels=labels[perm],
                          num_classes=num_classes,
                          domain_name=domain_name or style.name)


def bilinear_resize(images, out_h, out_w):
    """Bilinear resample a (N, H, W) stack with half-pixel centers.

    Constant images stay exactly constant: the four corner weights sum
    to one, so interpolating a constant reproduces it bit-for-bit.
    """
    images = np.asarray(images, dtype=np.float32)
    n, h, w = images.shape
    if (h, w) == (out_h, out_w):
        return images.copy()
    src_y = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    src_x = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(src_y).astype(np.int64)
    x0 = np.floor(src_x).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (src_y - y0).astype(np.float32)
    wx = (src_x - x0).astype(np.float32)
    top = (images[:, y0][:, :, x0] * (1 - wx) + images[:, y0][:, :, x1] * wx)
    bot = (images[:, y1][:, :, x0] * (1 - wx) + images[:, y1][:, :, x1] * wx)
    return top * (1 - wy)[None, :, None] + bot * wy[None, :, None]


def _read_idx_array(path, expected_magic, kind):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxMagicError(f"{path}: too short for an IDX header")
    (magic,) = struct.unpack_from(">i", raw, 0)
    if magic != expected_magic:
        raise IdxMagicError(
            f"{path}: magic {magic} is not the {kind} magic {expected_magic}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IdxTruncatedError(f"{path}: dimension header cut short")
    dims = struct.unpack_from(f">{ndim}i", raw, 4)
    count = int(np.prod(dims))
    payload = raw[header_len:]
    if len(payload) < count:
        raise IdxTruncatedError(
            f"{path}: payload holds {len(payload)} bytes, header needs {count}")
    return np.frombuffer(payload, dtype=np.uint8, count=count).reshape(dims)


def load_idx(images_path, labels_path, num_classes=None):
    """Load an IDX image/label file pair as a LabeledDataset.

    uint8 pixels map affinely onto [-1, 1] (0 -> -1.0, 255 -> +1.0);
    grayscale is replicated across three channels and resized to 32x32.
    """
    images_u8 = _read_idx_array(images_path, 2051, "image")
    labels_u8 = _read_idx_array(labels_path, 2049, "label")
    if images_u8.ndim != 3:
        raise IdxError(f"{images_path}: expected 3 dims, got {images_u8.ndim}")
    if len(images_u8) != len(labels_u8):
        raise IdxCountMismatchError(
            f"{len(images_u8)} images vs {len(labels_u8)} labels")
    gray = images_u8.astype(np.float32) / np.float32(127.5) - np.float32(1.0)
    gray = bilinear_resize(gray, IMAGE_SIZE, IMAGE_SIZE)
    images = np.repeat(gray[:, None, :, :], 3, axis=1)
    labels = labels_u8.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 2
    name = str(images_path)
    return LabeledDataset(images=images, labels=labels,
                          num_classes=num_classes, domain_name=name)


def _take(dataset, idx):
    return LabeledDataset(images=dataset.images[idx],
                          labels=dataset.labels[idx],
                          num_classes=dataset.num_classes,
                          domain_name=dataset.domain_name)


def partition(dataset, n, seed):
    """Split into a uniform without-replacement subset of size ``n`` and
    the complement, preserving original order inside each part."""
    if not 1 <= n <= len(dataset):
        raise ValueError(
            f"subset size must be in [1, {len(dataset)}], got {n}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA7)))
    picked = np.sort(rng.choice(len(dataset), size=n, replace=False))
    rest = np.setdiff1d(np.arange(len(dataset)), picked)
    return _take(dataset, picked), _take(dataset, rest)


def subsample(dataset, n, seed):
    """Uniform without-replacement subset of size ``n``, label-agnostic."""
    picked, _ = partition(dataset, n, seed)
    return picked


def train_val_split(dataset, val_fraction, seed):
    """Seeded stratified holdout; every class keeps at least one
    training example, and the validation side is never empty."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    if len(dataset) < 2:
        raise ValueError("need at least 2 examples to split")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xB3)))
    val_idx = []
    for cls in np.unique(dataset.labels):
        members = np.flatnonzero(dataset.labels == cls)
        members = members[rng.permutation(len(members))]
        take = int(round(len(members) * val_fraction))
        take = min(take, len(members) - 1)  # keep one for training
        val_idx.extend(members[:take])
    if not val_idx:
        # tiny classes everywhere: fall back to one global holdout row
        val_idx = [int(rng.integers(len(dataset)))]
    val_mask = np.zeros(len(dataset), dtype=bool)
    val_mask[val_idx] = True
    if val_mask.all():
        raise ValueError("validation split consumed every example")

    def pick(mask):
        return LabeledDataset(images=dataset.images[mask],
                              labels=dataset.labels[mask],
                              num_classes=dataset.num_classes,
                              domain_name=dataset.domain_name)

    return pick(~val_mask), pick(val_mask)
