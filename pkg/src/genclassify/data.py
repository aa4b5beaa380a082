"""Datasets: IDX ingestion, synthetic glyph sets, resizing and OOD mixing."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from .numkit import Rng

NO_LABEL = -1
"""Label value for examples that belong to no class (out-of-distribution)."""

IDX_LABEL_NONE = 255
"""Byte used for NO_LABEL when labels are written to an IDX file."""


class IdxFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    pixels: np.ndarray
    label: int
    ood_flag: bool


@dataclass(frozen=True, eq=False)
class Dataset:
    """Row-major images in [0,1] with labels and OOD flags.

    ``pixels`` has shape (n, height*width). Labels are ``NO_LABEL`` for OOD rows.
    """

    pixels: np.ndarray
    labels: np.ndarray
    ood: np.ndarray
    height: int
    width: int
    num_classes: int

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, self.height * self.width)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        ood = np.asarray(self.ood, dtype=bool).reshape(-1)
        if not (pixels.shape[0] == labels.shape[0] == ood.shape[0]):
            raise DatasetError("pixels, labels and ood flags must have equal length")
        if pixels.size and (pixels.min() < 0 or pixels.max() > 1 or not np.all(np.isfinite(pixels))):
            raise DatasetError("pixels must lie in [0, 1]")
        if np.any(labels[ood] != NO_LABEL):
            raise DatasetError("OOD examples must carry NO_LABEL")
        bad = (labels != NO_LABEL) & ((labels < 0) | (labels >= self.num_classes))
        if np.any(bad):
            raise DatasetError(f"label out of range [0, {self.num_classes}) at index {int(np.argmax(bad))}")
        for arr in (pixels, labels, ood):
            arr.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ood", ood)

    @property
    def dim(self) -> int:
        return self.height * self.width

    def __len__(self):
        return self.pixels.shape[0]

    def __getitem__(self, i) -> Example:
        return Example(self.pixels[i], int(self.labels[i]), bool(self.ood[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.pixels[idx], self.labels[idx], self.ood[idx],
                       self.height, self.width, self.num_classes)

    def class_pixels(self, k: int) -> np.ndarray:
        return self.pixels[(self.labels == k) & ~self.ood]

    def images(self) -> np.ndarray:
        return self.pixels.reshape(-1, self.height, self.width)


def empty_dataset(height: int, width: int, num_classes: int) -> Dataset:
    return Dataset(np.zeros((0, height * width)), np.zeros(0, np.int64), np.zeros(0, bool),
                   height, width, num_classes)


# ---------------------------------------------------------------------------
# IDX


def load_idx(path) -> np.ndarray:
    """Read an IDX file of unsigned bytes.

    Rank-1 files (labels) come back as int64. Higher ranks (images) are
    returned as float64 scaled by 1/255, shape taken from the header.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxFormatError("truncated magic", len(raw))
    if raw[0] != 0 or raw[1] != 0:
        raise IdxFormatError("bad magic: first two bytes must be zero", 0)
    dtype, rank = raw[2], raw[3]
    if dtype != 0x08:
        raise IdxFormatError(f"unsupported dtype 0x{dtype:02x}", 2)
    if rank < 1:
        raise IdxFormatError("rank must be at least 1", 3)
    header_end = 4 + 4 * rank
    if len(raw) < header_end:
        raise IdxFormatError("truncated dimension header", len(raw))
    dims = struct.unpack(f">{rank}I", raw[4:header_end])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) < header_end + count:
        raise IdxFormatError(f"truncated payload: expected {count} bytes, found {len(raw) - header_end}", len(raw))
    if len(raw) > header_end + count:
        raise IdxFormatError("trailing bytes after payload", header_end + count)
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_end).reshape(dims)
    if rank == 1:
        return data.astype(np.int64)
    return data.astype(np.float64) / 255.0


def save_idx(path, array) -> None:
    """Write an array as unsigned-byte IDX (inverse of load_idx).

    Floating arrays are treated as pixels in [0,1] and multiplied by 255;
    integer arrays must already fit in a byte.
    """
    arr = np.asarray(array)
    if np.issubdtype(arr.dtype, np.floating):
        if arr.size and (arr.min() < 0 or arr.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        payload = np.rint(arr * 255.0).astype(np.uint8)
    else:
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("integer values must fit in an unsigned byte")
        payload = arr.astype(np.uint8)
    header = bytes([0, 0, 0x08, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + payload.tobytes(order="C"))


def read_exclusion_list(path) -> list:
    """Indices to drop, one per line; ``#`` starts a comment."""
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            out.append(int(line))
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: not an integer index: {line!r}") from None
    return out


def load_idx_dataset(
    images_path,
    labels_path=None,
    *,
    num_classes: Optional[int] = None,
    ood: bool = False,
    exclude: Iterable[int] = (),
    invert: bool = False,
    resize_to: Optional[Tuple[int, int]] = None,
) -> Dataset:
    """Build a Dataset from IDX image (and label) files.

    For OOD sources (``ood=True``) labels are ignored. ``invert`` flips polarity
    (1 - pixel), used to turn dark-on-light glyphs into light-on-dark ones.
    """
    images = load_idx(images_path)
    if images.ndim != 3:
        raise DatasetError(f"{images_path}: expected a rank-3 image file, got rank {images.ndim}")
    n, h, w = images.shape
    if ood:
        labels = np.full(n, NO_LABEL)
    else:
        if labels_path is None:
            raise DatasetError("in-distribution data needs a label file")
        labels = load_idx(labels_path)
        if labels.ndim != 1 or labels.shape[0] != n:
            raise DatasetError(f"{labels_path}: label count does not match {n} images")
        labels = np.where(labels == IDX_LABEL_NONE, NO_LABEL, labels)
    drop = set(int(i) for i in exclude)
    keep = np.array([i for i in range(n) if i not in drop], dtype=np.int64)
    images, labels = images[keep], labels[keep]
    if invert:
        images = 1.0 - images
    if resize_to is not None:
        out_h, out_w = resize_to
        images = np.stack([resize_nearest(im, out_h, out_w) for im in images]) if len(images) else np.zeros((0, out_h, out_w))
        h, w = out_h, out_w
    if num_classes is None:
        valid = labels[labels != NO_LABEL]
        num_classes = int(valid.max()) + 1 if valid.size else 0
    return Dataset(images.reshape(len(images), h * w), labels, np.full(len(images), ood),
                   h, w, num_classes)


def save_idx_dataset(dataset: Dataset, images_path, labels_path) -> None:
    save_idx(images_path, dataset.images())
    save_idx(labels_path, np.where(dataset.labels == NO_LABEL, IDX_LABEL_NONE, dataset.labels))


# ---------------------------------------------------------------------------
# Resizing


def resize_nearest(image, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize: out[i, j] = in[floor(i*h/out_h), floor(j*w/out_w)]."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("image must be two-dimensional")
    h, w = image.shape
    if min(h, w, out_h, out_w) < 1:
        raise ValueError("all dimensions must be >= 1")
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    return image[rows[:, None], cols[None, :]]


# ---------------------------------------------------------------------------
# Synthetic glyphs
#
# Shapes are drawn as soft strokes from signed distances on a [-1, 1]^2 grid.

_STROKE = 0.13  # half-width in grid units
_SOFT = 0.08

IN_DIST_ARCHETYPES = ("hbar", "vbar", "ring", "plus", "diag", "antidiag", "xcross", "square")
# OOD: unseen stroke glyphs (share stroke features with the classes) and
# periodic textures (share nothing); they alternate in make_synthetic_ood.
OOD_GLYPHS = ("tee", "triangle", "zigzag", "comb")
OOD_TEXTURES = ("checker", "stripes", "grid", "dots")
OOD_ARCHETYPES = OOD_GLYPHS + OOD_TEXTURES


def _seg_dist(px, py, ax, ay, bx, by):
    vx, vy = bx - ax, by - ay
    t = np.clip(((px - ax) * vx + (py - ay) * vy) / (vx * vx + vy * vy), 0, 1)
    return np.hypot(px - ax - t * vx, py - ay - t * vy)


def _glyph_distance(kind: str, u, v, scale):
    L = 0.65 * scale
    if kind == "hbar":
        return _seg_dist(u, v, -L, 0, L, 0)
    if kind == "vbar":
        return _seg_dist(u, v, 0, -L, 0, L)
    if kind == "diag":
        a = L / np.sqrt(2)
        return _seg_dist(u, v, -a, a, a, -a)
    if kind == "antidiag":
        a = L / np.sqrt(2)
        return _seg_dist(u, v, -a, -a, a, a)
    if kind == "plus":
        return np.minimum(_seg_dist(u, v, -L, 0, L, 0), _seg_dist(u, v, 0, -L, 0, L))
    if kind == "xcross":
        a = L / np.sqrt(2)
        return np.minimum(_seg_dist(u, v, -a, a, a, -a), _seg_dist(u, v, -a, -a, a, a))
    if kind == "ring":
        return np.abs(np.hypot(u, v) - 0.5 * scale)
    if kind == "square":
        a = 0.45 * scale
        return np.abs(np.maximum(np.abs(u), np.abs(v)) - a)
    if kind == "tee":
        return np.minimum(_seg_dist(u, v, -L, -L, L, -L), _seg_dist(u, v, 0, -L, 0, L))
    if kind == "triangle":
        pts = [(-L, 0.6 * L), (L, 0.6 * L), (0, -0.8 * L)]
        return np.min([_seg_dist(u, v, *pts[i], *pts[(i + 1) % 3]) for i in range(3)], axis=0)
    if kind == "zigzag":
        pts = [(-L, -0.5 * L), (-L / 3, 0.5 * L), (L / 3, -0.5 * L), (L, 0.5 * L)]
        return np.min([_seg_dist(u, v, *pts[i], *pts[i + 1]) for i in range(3)], axis=0)
    if kind == "comb":
        return np.min([_seg_dist(u, v, -L, -L, -L, L), _seg_dist(u, v, -L, -L, L, -L),
                       _seg_dist(u, v, -L, 0, L, 0), _seg_dist(u, v, -L, L, L, L)], axis=0)
    raise ValueError(f"unknown archetype {kind!r}")


def _grid(size):
    c = (np.arange(size) + 0.5) / size * 2 - 1
    return np.meshgrid(c, c, indexing="ij")  # (y, x)


def _render_glyph(kind, size, rng: Rng, noise):
    yy, xx = _grid(size)
    angle = rng.uniform(-0.3, 0.3)
    dx, dy = rng.uniform(-0.15, 0.15, size=2)
    scale = rng.uniform(0.85, 1.15)
    width = _STROKE * rng.uniform(0.8, 1.25)
    ca, sa = np.cos(angle), np.sin(angle)
    x0, y0 = xx - dx, yy - dy
    u = ca * x0 + sa * y0
    v = -sa * x0 + ca * y0
    dist = _glyph_distance(kind, u, v, scale)
    img = np.clip(1 - (dist - width) / _SOFT, 0, 1) * rng.uniform(0.8, 1.0)
    img = img + noise * rng.normal(size=img.shape)
    return np.clip(img, 0, 1)


def _render_texture(kind, size, rng: Rng, noise):
    yy, xx = _grid(size)
    if kind == "checker":
        period = rng.uniform(0.35, 0.8)
        ph = rng.uniform(0, 1, size=2)
        img = ((np.floor(xx / period + ph[0]) + np.floor(yy / period + ph[1])) % 2).astype(float)
    elif kind == "stripes":
        theta = rng.uniform(np.pi / 8, 3 * np.pi / 8) * (1 if rng.uniform() < 0.5 else -1)
        period = rng.uniform(0.3, 0.6)
        t = (np.cos(theta) * xx + np.sin(theta) * yy) / period + rng.uniform()
        img = (np.abs(t - np.round(t)) < 0.3).astype(float)
    elif kind == "grid":
        period = rng.uniform(0.35, 0.6)
        ph = rng.uniform(0, 1, size=2)
        fx = np.abs((xx / period + ph[0]) % 1 - 0.5)
        fy = np.abs((yy / period + ph[1]) % 1 - 0.5)
        img = ((fx > 0.3) | (fy > 0.3)).astype(float)
    elif kind == "dots":
        period = rng.uniform(0.4, 0.7)
        ph = rng.uniform(0, 1, size=2)
        fx = (xx / period + ph[0]) % 1 - 0.5
        fy = (yy / period + ph[1]) % 1 - 0.5
        img = (np.hypot(fx, fy) < 0.3).astype(float)
    else:
        raise ValueError(f"unknown texture {kind!r}")
    img = img * rng.uniform(0.8, 1.0) + noise * rng.normal(size=img.shape)
    return np.clip(img, 0, 1)


def make_synthetic(num_classes: int = 4, per_class: int = 150, image_size: int = 16,
                   seed: int = 0, noise: float = 0.05) -> Dataset:
    """Class-balanced set of jittered glyph archetypes (bars, rings, crosses...)."""
    if num_classes < 2 or num_classes > len(IN_DIST_ARCHETYPES):
        raise DatasetError(f"num_classes must be in [2, {len(IN_DIST_ARCHETYPES)}]")
    if per_class < 1:
        raise DatasetError("per_class must be >= 1")
    if image_size < 8:
        raise DatasetError("image_size must be at least 8 to render the archetypes")
    root = Rng(seed, (1,))
    pixels, labels = [], []
    for k in range(num_classes):
        kind = IN_DIST_ARCHETYPES[k]
        for i in range(per_class):
            pixels.append(_render_glyph(kind, image_size, root.child(k, i), noise).ravel())
            labels.append(k)
    n = len(labels)
    return Dataset(np.array(pixels), np.array(labels), np.zeros(n, bool),
                   image_size, image_size, num_classes)


def make_synthetic_ood(count: int, image_size: int = 16, seed: int = 0,
                       num_classes: int = 4, noise: float = 0.05) -> Dataset:
    """Images of no class: unseen stroke glyphs alternating with textures."""
    if count < 1:
        raise DatasetError("count must be >= 1")
    if image_size < 8:
        raise DatasetError("image_size must be at least 8 to render the archetypes")
    root = Rng(seed, (2,))
    pixels = []
    for i in range(count):
        rng = root.child(i)
        if i % 2 == 0:
            img = _render_glyph(OOD_GLYPHS[(i // 2) % len(OOD_GLYPHS)], image_size, rng, noise)
        else:
            img = _render_texture(OOD_TEXTURES[(i // 2) % len(OOD_TEXTURES)], image_size, rng, noise)
        pixels.append(img.ravel())
    return Dataset(np.array(pixels), np.full(count, NO_LABEL), np.ones(count, bool),
                   image_size, image_size, num_classes)


# ---------------------------------------------------------------------------
# Mixing and splitting


@dataclass(frozen=True)
class MixSpec:
    in_dist_count: int
    ood_count: int
    seed: int = 0

    def __post_init__(self):
        if self.in_dist_count < 0 or self.ood_count < 0:
            raise ValueError("counts must be nonnegative")
        if self.in_dist_count == 0 and self.ood_count == 0:
            raise ValueError("counts cannot both be zero")


def augment_ood(in_dist: Dataset, ood: Dataset, spec: MixSpec) -> Dataset:
    """Shuffle the first ``in_dist_count`` in-distribution examples together
    with the first ``ood_count`` OOD examples. The seed only affects order."""
    if (in_dist.height, in_dist.width) != (ood.height, ood.width):
        raise DatasetError(
            f"image size mismatch: {in_dist.height}x{in_dist.width} vs {ood.height}x{ood.width}; resize first")
    if spec.in_dist_count > len(in_dist):
        raise DatasetError(f"requested {spec.in_dist_count} in-distribution examples, only {len(in_dist)} available")
    if spec.ood_count > len(ood):
        raise DatasetError(f"requested {spec.ood_count} OOD examples, only {len(ood)} available")
    a = in_dist.subset(np.arange(spec.in_dist_count))
    b = ood.subset(np.arange(spec.ood_count))
    pixels = np.concatenate([a.pixels, b.pixels])
    labels = np.concatenate([a.labels, b.labels])
    flags = np.concatenate([a.ood, b.ood])
    order = Rng(spec.seed, (3,)).permutation(len(labels))
    return Dataset(pixels[order], labels[order], flags[order], in_dist.height, in_dist.width,
                   max(in_dist.num_classes, ood.num_classes))


def split(dataset: Dataset, train_fraction: float, seed: int = 0) -> Tuple[Dataset, Dataset]:
    """Stratified train/test split; each class contributes round(f * n_k) to train."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    rng = Rng(seed, (4,))
    train_idx, test_idx = [], []
    for k in np.unique(dataset.labels):
        members = np.flatnonzero(dataset.labels == k)
        if members.size < 2:
            raise DatasetError(f"class {k} has fewer than 2 examples; cannot stratify")
        members = members[rng.child(int(k) + 1).permutation(members.size)]
        n_train = int(np.clip(round(train_fraction * members.size), 1, members.size - 1))
        train_idx.extend(members[:n_train])
        test_idx.extend(members[n_train:])
    return dataset.subset(np.sort(train_idx)), dataset.subset(np.sort(test_idx))


# ---------------------------------------------------------------------------
# Plain PGM (P2)


def write_pgm(path, image) -> None:
    """Write a 2-D array of [0,1] pixels as plain-text PGM with maxval 255."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("PGM image must be two-dimensional")
    h, w = image.shape
    levels = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.int64)
    rows = "\n".join(" ".join(str(v) for v in row) for row in levels)
    Path(path).write_text(f"P2\n{w} {h}\n255\n{rows}\n", encoding="ascii")


def read_pgm(path) -> np.ndarray:
    """Read a plain (P2) or binary (P5, 8-bit) PGM into [0,1] floats."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    # header: magic, width, height, maxval, with '#' comments allowed
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos].decode("ascii", "replace"))
    magic = tokens[0]
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DatasetError(f"{path}: malformed PGM header") from None
    if magic not in ("P2", "P5") or w < 1 or h < 1 or not 0 < maxval < 256:
        raise DatasetError(f"{path}: unsupported PGM (need P2 or 8-bit P5)")
    if magic == "P2":
        values = np.array(raw[pos:].split(), dtype=np.int64)
    else:
        values = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1).astype(np.int64) \
            if len(raw) >= pos + 1 + w * h else np.zeros(0, np.int64)
    if values.size != w * h:
        raise DatasetError(f"{path}: expected {w * h} pixels, found {values.size}")
    if values.min() < 0 or values.max() > maxval:
        raise DatasetError(f"{path}: pixel outside [0, {maxval}]")
    return values.reshape(h, w) / float(maxval)
