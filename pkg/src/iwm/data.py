"""Datasets: procedurally rendered shapes and ``root/<class>/<image>`` folders."""

from __future__ import annotations

import hashlib
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import hsv_to_rgb, resize_bilinear

log = logging.getLogger(__name__)

SHAPES = ("circle", "ring", "triangle", "square", "cross")
# shape geometry as fractions of the image side; the offset is the largest
# shift of the centre from the middle, the rotation the largest angle (radians)
SHAPE_RADIUS = (0.30, 0.34)
SHAPE_OFFSET = 0.04
SHAPE_ROTATION = 0.2
RAW_MAGIC = b"RCHW"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".chw", ".raw"}


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetRef:
    kind: str = "synthetic"  # or "folder"
    root: str | None = None
    n_classes: int = 4
    n_samples: int = 512
    image_size: int = 64
    seed: int = 0
    val_fraction: float = 0.1
    label: str = "shape"  # synthetic label source: "shape" or "background"


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    classes: list[str]
    train_idx: np.ndarray
    val_idx: np.ndarray
    warnings: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = {"train": self.train_idx, "val": self.val_idx, "all": np.arange(len(self))}[name]
        return self.images[idx], self.labels[idx]


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("IWM_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def ordered_map(fn, items):
    """``map`` that may use worker threads but always returns results in input order."""
    items = list(items)
    workers = min(num_workers(), max(1, len(items)))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def split_indices(identities: list[str], seed: int, val_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Hash-based train/val split; membership depends only on (seed, identity)."""
    val = []
    for i, ident in enumerate(identities):
        h = hashlib.sha256(f"{seed}:{ident}".encode()).digest()
        u = int.from_bytes(h[:8], "little") / 2.0 ** 64
        val.append(u < val_fraction)
    val = np.array(val, dtype=bool)
    return np.flatnonzero(~val), np.flatnonzero(val)


# -- synthetic colour world ---------------------------------------------------------

def _shape_mask(kind: str, xx, yy, cx, cy, r, angle):
    u = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
    v = -(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle)
    dist = np.hypot(u, v)
    if kind == "circle":
        return dist <= r
    if kind == "square":
        s = 0.8 * r
        return (np.abs(u) <= s) & (np.abs(v) <= s)
    if kind == "triangle":
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            a = 2 * np.pi * k / 3
            inside &= (u * np.cos(a) + v * np.sin(a)) <= 0.5 * r
        return inside
    if kind == "cross":
        arm = 0.3 * r
        return ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    if kind == "ring":
        return (dist <= r) & (dist >= 0.55 * r)
    raise ValueError(f"unknown shape {kind!r}")


def _random_rgb(rng, sat=(0.5, 1.0), val=(0.55, 1.0)) -> np.ndarray:
    hsv = np.array([rng.random(), rng.uniform(*sat), rng.uniform(*val)]).reshape(3, 1, 1)
    return hsv_to_rgb(hsv).reshape(3)


def render_colorworld(index: int, label: int, size: int, seed: int, n_classes: int,
                      label_source: str = "shape") -> np.ndarray:
    """Render sample ``index``: one coloured shape near the centre of a striped,
    tinted background. Colours never depend on the label."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, index, 7919]))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    bg_a = _random_rgb(rng, sat=(0.1, 0.5), val=(0.15, 0.6))
    bg_b = _random_rgb(rng, sat=(0.1, 0.5), val=(0.15, 0.6))
    if label_source == "background":
        freq = (1.5 + 1.5 * label) / size
        theta = np.pi * label / max(1, n_classes)
        shape_kind = SHAPES[int(rng.integers(0, len(SHAPES)))]
        amp = 0.5
    else:
        freq = rng.uniform(1.0, 4.0) / size
        theta = rng.uniform(0, np.pi)
        shape_kind = SHAPES[label]
        amp = 0.2
    phase = rng.uniform(0, 2 * np.pi)
    stripes = 0.5 + amp * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    img = bg_a[:, None, None] * stripes + bg_b[:, None, None] * (1 - stripes)
    img += rng.normal(0, 0.03, size=img.shape)

    r = rng.uniform(*SHAPE_RADIUS) * size
    cx = size / 2 + rng.uniform(-SHAPE_OFFSET, SHAPE_OFFSET) * size
    cy = size / 2 + rng.uniform(-SHAPE_OFFSET, SHAPE_OFFSET) * size
    angle = rng.uniform(-SHAPE_ROTATION, SHAPE_ROTATION)
    mask = _shape_mask(shape_kind, xx, yy, cx, cy, r, angle)
    fg = _random_rgb(rng)
    shade = 1.0 - 0.25 * np.clip(np.hypot(xx - cx, yy - cy) / r, 0, 1)
    img = np.where(mask[None], fg[:, None, None] * shade[None], img)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_colorworld(n_classes: int = 4, n_samples: int = 512, image_size: int = 64, seed: int = 0,
                     val_fraction: float = 0.1, label_source: str = "shape") -> Dataset:
    """Procedural dataset where the class is the shape and colour is label-independent."""
    if not 1 <= n_classes <= len(SHAPES):
        raise ValueError(f"n_classes must be in [1, {len(SHAPES)}]")
    labels = np.arange(n_samples, dtype=np.int64) % n_classes
    images = ordered_map(
        lambda i: render_colorworld(i, int(labels[i]), image_size, seed, n_classes, label_source),
        range(n_samples))
    images = np.stack(images) if images else np.zeros((0, 3, image_size, image_size), np.float32)
    if label_source == "background":
        classes = [f"stripes{k}" for k in range(n_classes)]
    else:
        classes = list(SHAPES[:n_classes])
    train, val = split_indices([str(i) for i in range(n_samples)], seed, val_fraction)
    return Dataset(images, labels, classes, train, val)


# -- folders -------------------------------------------------------------------------

def write_raw_chw(path, img_u8: np.ndarray) -> None:
    c, h, w = img_u8.shape
    Path(path).write_bytes(RAW_MAGIC + struct.pack("<III", h, w, c) + img_u8.astype(np.uint8).tobytes())


def read_raw_chw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != RAW_MAGIC:
        raise DatasetError(f"{path}: not a raw CHW file")
    h, w, c = struct.unpack_from("<III", data, 4)
    body = data[16:]
    if len(body) != h * w * c:
        raise DatasetError(f"{path}: expected {h * w * c} bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(c, h, w)


def decode_image(path) -> np.ndarray:
    """Decode to float32 (3, H, W) in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() in (".chw", ".raw"):
        arr = read_raw_chw(path)
    else:
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB")).transpose(2, 0, 1)
    if arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    if arr.shape[0] != 3:
        raise DatasetError(f"{path}: expected 1 or 3 channels, got {arr.shape[0]}")
    return arr.astype(np.float32) / 255.0


def ingest_folder(root, image_size: int = 64, seed: int = 0, val_fraction: float = 0.1) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DatasetError(f"no class folders under {root}")
    entries = []
    for label, name in enumerate(classes):
        files = sorted(p for p in (root / name).iterdir()
                       if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DatasetError(f"class folder {name!r} is empty")
        entries.extend((label, f) for f in files)

    def load(entry):
        label, f = entry
        try:
            img = decode_image(f)
        except Exception as exc:  # any decoder failure is a skipped sample
            return None, {"file": str(f.relative_to(root)), "error": f"{type(exc).__name__}: {exc}"}
        if img.shape[1:] != (image_size, image_size):
            img = np.clip(resize_bilinear(img.astype(np.float64), image_size, image_size), 0, 1)
        return img.astype(np.float32), None

    results = ordered_map(load, entries)
    images, labels, idents, warnings = [], [], [], []
    for (label, f), (img, warn) in zip(entries, results):
        if warn is not None:
            log.warning("skipping unreadable image %s (%s)", warn["file"], warn["error"])
            warnings.append(warn)
            continue
        images.append(img)
        labels.append(label)
        idents.append(f"{classes[label]}/{f.name}")
    present = set(labels)
    for label, name in enumerate(classes):
        if label not in present:
            raise DatasetError(f"class folder {name!r} has no readable images")
    train, val = split_indices(idents, seed, val_fraction)
    return Dataset(np.stack(images), np.array(labels, dtype=np.int64), classes, train, val, warnings)


def ingest_dataset(ref: DatasetRef) -> Dataset:
    if ref.kind == "synthetic":
        return synth_colorworld(ref.n_classes, ref.n_samples, ref.image_size, ref.seed,
                                ref.val_fraction, ref.label)
    if ref.kind == "folder":
        if not ref.root:
            raise DatasetError("folder dataset needs a root path")
        return ingest_folder(ref.root, ref.image_size, ref.seed, ref.val_fraction)
    raise DatasetError(f"unknown dataset kind {ref.kind!r}")


def save_png(path, img: np.ndarray) -> None:
    from PIL import Image

    arr = (np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr).save(path)
