"""Dataset layout, synthetic corpus generation, augmentation, batching.

Directory convention: root/{normal,mild,moderate,severe}/*.pgm|*.ppm with
class indices 0..3 in severity order, plus an optional root/split.json
pinning the train/test assignment. Without a pin, the split is a seeded
per-class shuffle with largest-remainder apportionment of the train quota
(floor(ratio*n) per class, then one extra seat per largest fractional
remainder until round(ratio*total) seats are filled) - this reproduces the
published per-class counts exactly.

Every random choice (split, augmentation, batch order, synthesis) flows
from explicit integer seeds, so a run is replayable from its config alone.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from mltr.dataio import ImageBuffer, read_image, resize_bilinear, write_image
from mltr.errors import DatasetError
from mltr.preprocess import preprocess, to_unit_float

CLASS_NAMES = ("normal", "mild", "moderate", "severe")
IMAGE_EXTENSIONS = (".pgm", ".ppm")

# cache preprocessed samples only while they stay small
_CACHE_PIXEL_LIMIT = 128 * 128


@dataclass(frozen=True)
class ManifestEntry:
    path: str      # relative to the dataset root
    label: int     # 0..3 in severity order
    split: str     # "train" or "test"


@dataclass
class DatasetManifest:
    entries: list
    seed: int
    split_ratio: float

    def train_entries(self) -> list:
        return [e for e in self.entries if e.split == "train"]

    def test_entries(self) -> list:
        return [e for e in self.entries if e.split == "test"]

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "split_ratio": self.split_ratio,
            "entries": [
                {"path": e.path, "label": e.label, "split": e.split}
                for e in self.entries
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        entries = [ManifestEntry(e["path"], int(e["label"]), e["split"])
                   for e in doc["entries"]]
        return cls(entries=entries, seed=int(doc["seed"]),
                   split_ratio=float(doc["split_ratio"]))


def apportion_train_counts(sizes: list[int], ratio: float) -> list[int]:
    """Largest-remainder seats: per-class floor, extras by fractional part."""
    quotas = [ratio * n for n in sizes]
    base = [int(math.floor(q)) for q in quotas]
    target = int(math.floor(ratio * sum(sizes) + 0.5))
    leftover = target - sum(base)
    order = sorted(range(len(sizes)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:leftover]:
        base[i] += 1
    return [min(b, n) for b, n in zip(base, sizes)]


def load_manifest(root_dir, split_ratio: float = 0.7, seed: int = 0) -> DatasetManifest:
    """Scan class directories; honor root/split.json when present."""
    root = os.fspath(root_dir)
    per_class = []
    for name in CLASS_NAMES:
        class_dir = os.path.join(root, name)
        if not os.path.isdir(class_dir):
            raise DatasetError(f"missing class directory '{name}' under {root}")
        files = sorted(f for f in os.listdir(class_dir)
                       if f.lower().endswith(IMAGE_EXTENSIONS))
        if not files:
            raise DatasetError(f"class directory '{name}' is empty")
        per_class.append([f"{name}/{f}" for f in files])

    pin_path = os.path.join(root, "split.json")
    if os.path.isfile(pin_path):
        with open(pin_path) as fh:
            pin = json.load(fh)
        known = {p for paths in per_class for p in paths}
        entries = []
        for split in ("train", "test"):
            for rel in pin.get(split, []):
                if rel not in known:
                    raise DatasetError(f"split.json references missing file {rel}")
                label = CLASS_NAMES.index(rel.split("/", 1)[0])
                entries.append(ManifestEntry(rel, label, split))
        listed = {e.path for e in entries}
        if len(listed) != len(entries):
            raise DatasetError("split.json lists a file in both splits")
        entries.sort(key=lambda e: (e.label, e.path))
        return DatasetManifest(entries=entries, seed=seed, split_ratio=split_ratio)

    train_counts = apportion_train_counts([len(p) for p in per_class], split_ratio)
    entries = []
    for label, paths in enumerate(per_class):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([seed, label])))
        order = rng.permutation(len(paths))
        for rank, idx in enumerate(order):
            split = "train" if rank < train_counts[label] else "test"
            entries.append(ManifestEntry(paths[idx], label, split))
    entries.sort(key=lambda e: (e.label, e.path))
    return DatasetManifest(entries=entries, seed=seed, split_ratio=split_ratio)


# --------------------------------------------------------------------------
# augmentation

def gaussian_blur(img: ImageBuffer, sigma: float) -> ImageBuffer:
    radius = max(1, int(math.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kern = np.exp(-0.5 * (xs / sigma) ** 2)
    kern /= kern.sum()
    arr = img.pixels.astype(np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    padded = np.pad(arr, ((radius, radius), (0, 0), (0, 0)), mode="edge")
    arr = sum(kern[i] * padded[i:i + arr.shape[0]] for i in range(len(kern)))
    padded = np.pad(arr, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    arr = sum(kern[i] * padded[:, i:i + arr.shape[1]] for i in range(len(kern)))
    out = np.clip(np.floor(arr + 0.5), 0, 255).astype(np.uint8)
    if img.channels == 1:
        out = out[:, :, 0]
    return ImageBuffer(img.width, img.height, img.channels, out)


def hflip(img: ImageBuffer) -> ImageBuffer:
    return ImageBuffer(img.width, img.height, img.channels,
                       np.ascontiguousarray(img.pixels[:, ::-1]))


def vflip(img: ImageBuffer) -> ImageBuffer:
    return ImageBuffer(img.width, img.height, img.channels,
                       np.ascontiguousarray(img.pixels[::-1]))


def shift(img: ImageBuffer, dy: int, dx: int) -> ImageBuffer:
    """Translate with edge replication."""
    h, w = img.height, img.width
    pad = ((max(dy, 0), max(-dy, 0)), (max(dx, 0), max(-dx, 0)))
    if img.pixels.ndim == 3:
        pad = pad + ((0, 0),)
    padded = np.pad(img.pixels, pad, mode="edge")
    y0 = max(-dy, 0)
    x0 = max(-dx, 0)
    out = padded[y0:y0 + h, x0:x0 + w]
    return ImageBuffer(w, h, img.channels, np.ascontiguousarray(out))


def rescale(img: ImageBuffer, factor: float) -> ImageBuffer:
    """Zoom by factor, then center-crop or edge-pad back to the input size."""
    h, w = img.height, img.width
    nh = max(1, int(round(h * factor)))
    nw = max(1, int(round(w * factor)))
    scaled = resize_bilinear(img, nh, nw)
    if nh >= h:
        y0 = (nh - h) // 2
        x0 = (nw - w) // 2
        out = scaled.pixels[y0:y0 + h, x0:x0 + w]
    else:
        py = (h - nh) // 2
        px = (w - nw) // 2
        pad = ((py, h - nh - py), (px, w - nw - px))
        if scaled.pixels.ndim == 3:
            pad = pad + ((0, 0),)
        out = np.pad(scaled.pixels, pad, mode="edge")
    return ImageBuffer(w, h, img.channels, np.ascontiguousarray(out))


def rot90(img: ImageBuffer, k: int) -> ImageBuffer:
    out = np.ascontiguousarray(np.rot90(img.pixels, k))
    return ImageBuffer(out.shape[1], out.shape[0], img.channels, out)


AUGMENT_OPS = ("blur", "hflip", "vflip", "shift", "scale", "rot90")


def random_augment(img: ImageBuffer, rng: np.random.Generator,
                   ops=AUGMENT_OPS) -> ImageBuffer:
    """One random composition of the enabled augmentations."""
    out = img
    if "blur" in ops and rng.random() < 0.5:
        out = gaussian_blur(out, float(rng.uniform(0.5, 1.5)))
    if "hflip" in ops and rng.random() < 0.5:
        out = hflip(out)
    if "vflip" in ops and rng.random() < 0.5:
        out = vflip(out)
    if "shift" in ops and rng.random() < 0.5:
        dy = int(rng.integers(-out.height // 10, out.height // 10 + 1))
        dx = int(rng.integers(-out.width // 10, out.width // 10 + 1))
        out = shift(out, dy, dx)
    if "scale" in ops and rng.random() < 0.5:
        out = rescale(out, float(rng.uniform(0.9, 1.1)))
    if "rot90" in ops:
        k = int(rng.integers(0, 4))
        if k:
            out = rot90(out, k)
    return out


def augment(img: ImageBuffer, rng: np.random.Generator, multiplier: int = 64,
            ops=AUGMENT_OPS) -> list:
    """multiplier variants of a training image; the first is the original."""
    variants = [img]
    for _ in range(multiplier - 1):
        variants.append(random_augment(img, rng, ops))
    return variants


# --------------------------------------------------------------------------
# synthetic corpus

def _synth_image(label: int, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Deterministic class-coded image; class 3 alone contains exact zeros."""
    yy = np.linspace(0.0, 1.0, h)[:, None]
    xx = np.linspace(0.0, 1.0, w)[None, :]
    theta = rng.uniform(0.0, 2.0 * math.pi)
    mid = rng.uniform(120.0, 140.0)
    # zero-mean gradient keeps per-class mean statistics tight
    grad = 35.0 * (math.cos(theta) * (xx - 0.5) + math.sin(theta) * (yy - 0.5))
    wave = rng.uniform(10.0, 20.0) * np.sin(
        2.0 * math.pi * (rng.uniform(0.5, 1.5) * xx + rng.uniform(0.5, 1.5) * yy
                         + rng.uniform(0.0, 1.0)))
    base = mid + grad + wave

    if label == 1:
        # small bright spots
        for _ in range(int(rng.integers(6, 13))):
            cy = rng.uniform(0.1, 0.9) * h
            cx = rng.uniform(0.1, 0.9) * w
            r = rng.uniform(1.0, 3.0) * max(1.0, min(h, w) / 32.0)
            val = rng.uniform(235.0, 255.0)
            dist2 = (np.arange(h)[:, None] - cy) ** 2 + (np.arange(w)[None, :] - cx) ** 2
            base = np.where(dist2 <= r * r, val, base)
    elif label == 2:
        # broad dark stains
        for _ in range(int(rng.integers(2, 5))):
            cy = rng.uniform(0.2, 0.8) * h
            cx = rng.uniform(0.2, 0.8) * w
            sy = rng.uniform(0.15, 0.3) * h
            sx = rng.uniform(0.15, 0.3) * w
            depth = rng.uniform(0.35, 0.55)
            blob = np.exp(-0.5 * (((np.arange(h)[:, None] - cy) / sy) ** 2
                                  + ((np.arange(w)[None, :] - cx) / sx) ** 2))
            base = base * (1.0 - depth * blob)
    elif label == 3:
        # black rectangular defects (exact zeros)
        for _ in range(int(rng.integers(2, 4))):
            rh = int(rng.uniform(0.3, 0.45) * h)
            rw = int(rng.uniform(0.3, 0.45) * w)
            y0 = int(rng.integers(0, max(1, h - rh)))
            x0 = int(rng.integers(0, max(1, w - rw)))
            base[y0:y0 + rh, x0:x0 + rw] = 0.0

    out = np.clip(np.floor(base + 0.5), 0, 255).astype(np.uint8)
    if label != 3:
        out = np.maximum(out, 20)  # only severe-class defects reach zero
    return out


def synth_generate(n_per_class: int, seed: int, h: int, w: int):
    """Build the in-memory corpus: (manifest, {relative path: ImageBuffer})."""
    if n_per_class < 2:
        raise DatasetError("synthetic corpus needs at least 2 images per class")
    images = {}
    for label, name in enumerate(CLASS_NAMES):
        for i in range(n_per_class):
            rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence([seed, label, i])))
            rel = f"{name}/synth_{i:04d}.pgm"
            images[rel] = ImageBuffer.from_array(_synth_image(label, rng, h, w))
    manifest = _manifest_for_paths(sorted(images), seed)
    return manifest, images


def _manifest_for_paths(paths: list[str], seed: int,
                        split_ratio: float = 0.7) -> DatasetManifest:
    per_class = [[p for p in paths if p.startswith(name + "/")]
                 for name in CLASS_NAMES]
    train_counts = apportion_train_counts([len(p) for p in per_class], split_ratio)
    entries = []
    for label, class_paths in enumerate(per_class):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([seed, label])))
        order = rng.permutation(len(class_paths))
        for rank, idx in enumerate(order):
            split = "train" if rank < train_counts[label] else "test"
            entries.append(ManifestEntry(class_paths[idx], label, split))
    entries.sort(key=lambda e: (e.label, e.path))
    return DatasetManifest(entries=entries, seed=seed, split_ratio=split_ratio)


def write_synth_corpus(out_dir, n_per_class: int, seed: int, h: int, w: int):
    """Materialize the synthetic corpus and its manifest on disk."""
    manifest, images = synth_generate(n_per_class, seed, h, w)
    for rel, img in images.items():
        path = os.path.join(os.fspath(out_dir), rel)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        write_image(path, img)
    with open(os.path.join(os.fspath(out_dir), "manifest.json"), "w") as fh:
        fh.write(manifest.to_json() + "\n")
    return manifest


# --------------------------------------------------------------------------
# sample provider and batching

class Dataset:
    """Resolves manifest entries to model-ready tensors.

    Training entries are expanded by the augmentation multiplier; variant 0
    is the unaugmented image. Augmentation happens on the raw image, then
    the full preprocessing chain runs. Test entries are never augmented.
    """

    def __init__(self, manifest: DatasetManifest, model_hw: tuple[int, int],
                 root=None, images: dict | None = None,
                 augment_multiplier: int = 1, seed: int = 0,
                 gamma: float = 1.2, clahe_clip: float = 2.0,
                 clahe_tiles: tuple[int, int] = (8, 8)):
        if root is None and images is None:
            raise DatasetError("dataset needs a root directory or in-memory images")
        self.manifest = manifest
        self.model_hw = tuple(model_hw)
        self.root = None if root is None else os.fspath(root)
        self.images = images
        self.seed = seed
        self.gamma = gamma
        self.clahe_clip = clahe_clip
        self.clahe_tiles = tuple(clahe_tiles)
        self._train = manifest.train_entries()
        self._test = manifest.test_entries()
        self.train_items = [(i, a) for i in range(len(self._train))
                            for a in range(max(1, augment_multiplier))]
        self._cache: dict[tuple[int, int], np.ndarray] = {}
        self._cacheable = self.model_hw[0] * self.model_hw[1] <= _CACHE_PIXEL_LIMIT

    def _raw(self, entry: ManifestEntry) -> ImageBuffer:
        if self.images is not None and entry.path in self.images:
            return self.images[entry.path]
        if self.root is None:
            raise DatasetError(f"no source for {entry.path}")
        return read_image(os.path.join(self.root, entry.path))

    def _prepared(self, img: ImageBuffer) -> np.ndarray:
        out = preprocess(img, out_hw=self.model_hw, gamma=self.gamma,
                         clahe_clip=self.clahe_clip, clahe_tiles=self.clahe_tiles)
        return to_unit_float(out)

    def train_sample(self, item: tuple[int, int]) -> tuple[np.ndarray, int]:
        entry_idx, aug_idx = item
        cached = self._cache.get(item)
        entry = self._train[entry_idx]
        if cached is not None:
            return cached, entry.label
        img = self._raw(entry)
        if aug_idx > 0:
            rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence([self.seed, entry_idx, aug_idx])))
            img = random_augment(img, rng)
        arr = self._prepared(img)
        if self._cacheable:
            self._cache[item] = arr
        return arr, entry.label

    def test_samples(self):
        """(array, label) pairs in manifest order."""
        for entry in self._test:
            yield self._prepared(self._raw(entry)), entry.label

    @property
    def n_train(self) -> int:
        return len(self.train_items)

    @property
    def n_test(self) -> int:
        return len(self._test)


def batch_iter(dataset: Dataset, batch: int, seed: int, epoch: int):
    """Seeded per-epoch shuffle; yields (B,C,H,W) arrays with labels."""
    items = dataset.train_items
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch])))
    order = rng.permutation(len(items))
    for start in range(0, len(items), batch):
        chunk = order[start:start + batch]
        arrays = []
        labels = []
        for i in chunk:
            arr, label = dataset.train_sample(items[i])
            arrays.append(arr)
            labels.append(label)
        yield np.stack(arrays), np.asarray(labels, dtype=np.int64)
