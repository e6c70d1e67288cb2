"""Datasets, manifests, ingestion and the synthetic toy corpus."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import serialize
from .augment import hsv_to_rgb, resize_bilinear
from .rng import stream

__all__ = [
    "LabeledDataset",
    "DatasetManifest",
    "ingest",
    "ingest_split",
    "generate_toy_corpus",
    "TOY_FAMILIES",
]


@dataclass
class LabeledDataset:
    """Images in [0, 1] as (N, C, H, W) float32 with integer labels.

    ``labels[i]`` indexes ``class_names``.
    """

    images: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    split: str = ""

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("labels out of range of class_names")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def indices_by_class(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == k) for k in range(self.num_classes)]


@dataclass
class DatasetManifest:
    root: str
    format: str = "image_folder"
    splits: dict[str, list[str]] = field(default_factory=dict)
    image_size: int = 32
    channels: int = 3

    def __post_init__(self):
        if self.format not in ("image_folder", "packed_binary"):
            raise ValueError(f"unknown dataset format {self.format!r}")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        seen: dict[str, str] = {}
        for split, classes in self.splits.items():
            if len(set(classes)) != len(classes):
                raise ValueError(f"split {split!r} lists a class twice")
            for c in classes:
                if c in seen:
                    raise ValueError(f"class {c!r} appears in both {seen[c]!r} and {split!r} splits")
                seen[c] = split

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        root = Path(raw.get("root", "."))
        if not root.is_absolute():
            root = path.parent / root
        return cls(root=str(root), format=raw.get("format", "image_folder"), splits=raw["splits"],
                   image_size=int(raw.get("image_size", 32)), channels=int(raw.get("channels", 3)))

    def save(self, path: str | os.PathLike, relative_root: bool = True) -> None:
        path = Path(path)
        root = os.path.relpath(self.root, path.parent) if relative_root else self.root
        doc = {"root": root, "format": self.format, "splits": self.splits,
               "image_size": self.image_size, "channels": self.channels}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _read_image(path: Path, channels: int, size: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB" if channels == 3 else "L")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except OSError as exc:
        raise ValueError(f"unreadable image {path}: {exc}") from None
    arr = arr.transpose(2, 0, 1) if arr.ndim == 3 else arr[None]
    if arr.shape[1:] != (size, size):
        arr = resize_bilinear(arr, size)
    return arr


def ingest_split(manifest: DatasetManifest, split: str) -> LabeledDataset:
    """Load one split; labels follow sorted class-name order."""
    if split not in manifest.splits:
        raise KeyError(f"manifest has no split {split!r}")
    classes = sorted(manifest.splits[split])
    root = Path(manifest.root)
    images, labels = [], []
    if manifest.format == "packed_binary":
        blob = serialize.load(root / f"{split}.bin")
        for k, name in enumerate(classes):
            if name not in blob:
                raise ValueError(f"class {name!r} missing from {split}.bin")
            arr = blob[name]
            if arr.ndim != 4 or arr.shape[1] != manifest.channels:
                raise ValueError(f"class {name!r} has shape {arr.shape}, expected (n, {manifest.channels}, H, W)")
            if arr.shape[2:] != (manifest.image_size, manifest.image_size):
                arr = np.stack([resize_bilinear(a, manifest.image_size) for a in arr])
            images.append(arr)
            labels.append(np.full(len(arr), k))
    else:
        for k, name in enumerate(classes):
            cdir = root / split / name
            if not cdir.is_dir():
                raise ValueError(f"class directory {cdir} does not exist")
            files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
            if not files:
                raise ValueError(f"class directory {cdir} has no images")
            images.append(np.stack([_read_image(f, manifest.channels, manifest.image_size) for f in files]))
            labels.append(np.full(len(files), k))
    return LabeledDataset(np.concatenate(images), np.concatenate(labels), classes, split)


def ingest(manifest: DatasetManifest) -> dict[str, LabeledDataset]:
    return {split: ingest_split(manifest, split) for split in manifest.splits}


def pack_split(dataset: LabeledDataset, path: str | os.PathLike) -> None:
    """Write a split in packed_binary form (one entry per class)."""
    entries = {name: dataset.images[dataset.labels == k] for k, name in enumerate(dataset.class_names)}
    serialize.save(path, entries)


# ---------------------------------------------------------------------------
# toy corpus
# ---------------------------------------------------------------------------


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(size) + 0.5) / size * 2 - 1
    return np.meshgrid(c, c, indexing="ij")  # y (rows), x (cols) in [-1, 1]


def _shape_mask(kind: int, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    ax, ay = np.abs(x), np.abs(y)
    r = np.sqrt(x * x + y * y)
    shapes = [
        r < 0.7,                                                  # disk
        np.maximum(ax, ay) < 0.6,                                 # square
        (y > -0.6) & (y < 0.6) & (ax < (y + 0.6) * 0.6),          # triangle
        ((ax < 0.2) & (ay < 0.75)) | ((ay < 0.2) & (ax < 0.75)),  # plus
        (np.abs(x - y) < 0.25) | (np.abs(x + y) < 0.25),          # x
        (r > 0.45) & (r < 0.75),                                  # ring
        ax + ay < 0.8,                                            # diamond
        (ay < 0.22) & (ax < 0.8),                                 # horizontal bar
        (ax < 0.22) & (ay < 0.8),                                 # vertical bar
        (np.maximum(ax, ay) < 0.75) & (np.maximum(ax, ay) > 0.45),  # hollow square
        (np.sqrt((x - 0.45) ** 2 + y**2) < 0.3) | (np.sqrt((x + 0.45) ** 2 + y**2) < 0.3),  # two dots
        ((ax < 0.2) & (ay < 0.75)) | ((y < -0.45) & (y > -0.8) & (ax < 0.75)),  # T
        ((x > -0.7) & (x < -0.35) & (ay < 0.75)) | ((y > 0.4) & (y < 0.75) & (x > -0.7) & (x < 0.7)),  # L
        (y > 0) & (r < 0.75),                                     # half disk
        (np.abs(x - y) < 0.3) & (r < 0.85),                       # diagonal bar
        np.abs(np.sin(x * 6)) * (r < 0.8) > 0.5,                  # vertical stripes disk
    ]
    return shapes[kind % len(shapes)].astype(np.float64)


N_SHAPES = 16


def _random_colors(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    while True:
        fg, bg = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
        if np.abs(fg - bg).sum() > 0.9:
            return fg, bg


def _render(family: str, k: int, n_family: int, size: int, rng: np.random.Generator) -> np.ndarray:
    y, x = _grid(size)
    noise = rng.normal(0, 0.04, (3, size, size))
    if family == "solid":
        hue = k / max(n_family, 1)
        rgb = hsv_to_rgb(np.array([[[hue]], [[0.85]], [[0.85]]]))[:, 0, 0]
        img = np.broadcast_to((rgb * rng.uniform(0.9, 1.1))[:, None, None], (3, size, size))
        return np.clip(img + noise, 0, 1)
    fg, bg = _random_colors(rng)
    if family == "shape":
        scale = rng.uniform(0.75, 1.05)
        dy, dx = rng.uniform(-0.15, 0.15, 2)
        mask = _shape_mask(k, (y - dy) / scale, (x - dx) / scale)
    elif family == "texture":
        theta = np.pi * (k % 4) / 4 + rng.uniform(-0.08, 0.08)
        freq = 2.0 + 2.0 * (k // 4)
        phase = rng.uniform(0, 2 * np.pi)
        u = np.cos(theta) * x + np.sin(theta) * y
        mask = (np.sin(np.pi * freq * u + phase) > 0).astype(np.float64)
    else:
        raise ValueError(f"unknown toy family {family!r}")
    img = mask[None] * fg[:, None, None] + (1 - mask[None]) * bg[:, None, None]
    return np.clip(img + noise, 0, 1)


TOY_FAMILIES = ("solid", "shape", "texture", "mixed")


def _class_list(family: str, n_classes: int) -> list[tuple[str, int, int]]:
    if family == "mixed":
        cycle = ("shape", "texture", "solid")
        fams = [cycle[i % 3] for i in range(n_classes)]
        seen = dict.fromkeys(cycle, 0)
        out = []
        for f in fams:
            out.append((f, seen[f], fams.count(f)))
            seen[f] += 1
        return out
    if family == "shape" and n_classes > N_SHAPES:
        raise ValueError(f"shape family has only {N_SHAPES} classes")
    if family == "texture" and n_classes > 16:
        raise ValueError("texture family has only 16 classes")
    return [(family, k, n_classes) for k in range(n_classes)]


def generate_toy_corpus(
    out_dir: str | os.PathLike,
    n_classes: int = 12,
    per_class: int = 60,
    size: int = 32,
    split: tuple[int, int, int] = (8, 2, 2),
    seed: int = 0,
    family: str = "mixed",
) -> DatasetManifest:
    """Write a synthetic image-folder corpus and its ``manifest.json``.

    Classes are shape outlines, oriented gratings or solid colours (with
    random colours, jitter and pixel noise for the first two). Classes are
    shuffled with ``seed`` and dealt into train/val/test in the ``split``
    proportions.
    """
    if n_classes < 1 or per_class < 1 or size < 8:
        raise ValueError("n_classes and per_class must be >= 1 and size >= 8")
    if family not in TOY_FAMILIES:
        raise ValueError(f"family must be one of {TOY_FAMILIES}")
    if sum(split) != n_classes or any(s < 0 for s in split):
        raise ValueError(f"split {split} must be non-negative and sum to {n_classes}")
    out = Path(out_dir)
    specs = _class_list(family, n_classes)
    names = [f"{fam}{k:02d}" for fam, k, _ in specs]
    order = stream(seed, "toy-split").permutation(n_classes)
    bounds = np.cumsum(split)
    split_names = ("train", "val", "test")
    splits = {s: sorted(names[i] for i in order[lo:hi])
              for s, lo, hi in zip(split_names, (0, *bounds[:-1]), bounds)}
    where = {c: s for s, cs in splits.items() for c in cs}
    for ci, (fam, k, n_fam) in enumerate(specs):
        cdir = out / where[names[ci]] / names[ci]
        cdir.mkdir(parents=True, exist_ok=True)
        for j in range(per_class):
            img = _render(fam, k, n_fam, size, stream(seed, "toy", names[ci], j))
            pixels = np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8)
            Image.fromarray(pixels).save(cdir / f"{j:04d}.png", optimize=False)
    manifest = DatasetManifest(root=str(out), format="image_folder",
                               splits={s: c for s, c in splits.items() if c},
                               image_size=size, channels=3)
    manifest.save(out / "manifest.json")
    return manifest
