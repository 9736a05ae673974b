"""Labelled RGB image sets: a seeded synthetic texture generator and a
class-per-subdirectory loader for 8-bit rasters (binary PPM or PNG)."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    num_images: int = 600
    size: int = 64
    classes: int = 10
    freq_low: float = 0.06
    freq_high: float = 0.22
    amplitude: float = 0.22
    tint: float = 0.04
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if self.num_images < 2 * self.classes:
            raise ValueError("need at least two images per class")


@dataclass
class ImageSet:
    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ImageSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ImageSet(self.images[idx], self.labels[idx], self.classes)


def class_textures(spec: SyntheticDatasetSpec):
    """Per-class dominant spatial frequency (cycles/pixel), orientation and tint."""
    freqs = np.linspace(spec.freq_low, spec.freq_high, spec.classes)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    angles = (np.arange(spec.classes) * golden) % np.pi
    tints = np.stack(
        [np.cos(2 * np.pi * (np.arange(spec.classes) / spec.classes + k / 3.0)) for k in range(3)],
        axis=1,
    )
    return freqs, angles, tints


def generate_synthetic(spec: SyntheticDatasetSpec) -> ImageSet:
    """Band-limited RGB textures; class identity is carried mainly by the
    dominant frequency/orientation pair, with a faint colour tint."""
    rng = np.random.default_rng(spec.seed)
    freqs, angles, tints = class_textures(spec)
    labels = np.arange(spec.num_images) % spec.classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0 : spec.size, 0 : spec.size].astype(np.float64)
    images = np.empty((spec.num_images, 3, spec.size, spec.size), dtype=np.float32)
    for i, c in enumerate(labels):
        f = freqs[c] * rng.uniform(0.95, 1.05)
        theta = angles[c] + rng.normal(0.0, 0.05)
        wave = np.cos(2 * np.pi * f * (np.cos(theta) * xx + np.sin(theta) * yy) + rng.uniform(0, 2 * np.pi))
        # harmonic at the orthogonal orientation adds class-specific structure
        wave2 = np.cos(
            2 * np.pi * 0.7 * f * (-np.sin(theta) * xx + np.cos(theta) * yy) + rng.uniform(0, 2 * np.pi)
        )
        # low-frequency background shared by all classes
        bf = rng.uniform(0.005, 0.03, size=2)
        background = np.cos(2 * np.pi * (bf[0] * xx + bf[1] * yy) + rng.uniform(0, 2 * np.pi))
        texture = spec.amplitude * (wave + 0.5 * wave2)
        colour = rng.uniform(0.6, 1.0, size=3)
        base = 0.5 + spec.tint * tints[c] + rng.normal(0.0, 0.02, size=3)
        img = base[:, None, None] + colour[:, None, None] * texture + 0.08 * background
        img += rng.normal(0.0, spec.noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return ImageSet(images, labels.astype(np.int64), spec.classes)


def train_test_split(data: ImageSet, test_fraction: float, seed: int) -> tuple[ImageSet, ImageSet]:
    """Stratified split, test share rounded per class."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(data.classes):
        idx = np.flatnonzero(data.labels == c)
        rng.shuffle(idx)
        k = int(round(test_fraction * len(idx)))
        test.extend(idx[:k].tolist())
        train.extend(idx[k:].tolist())
    return data.subset(sorted(train)), data.subset(sorted(test))


def nearest_centroid_accuracy(train: ImageSet, test: ImageSet) -> float:
    x = train.images.reshape(len(train), -1).astype(np.float64)
    centroids = np.stack([x[train.labels == c].mean(axis=0) for c in range(train.classes)])
    xt = test.images.reshape(len(test), -1).astype(np.float64)
    d = ((xt[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    return float(np.mean(d.argmin(axis=1) == test.labels))


# ------------------------------------------------------------- directory I/O


def read_ppm(path: Path | str) -> np.ndarray:
    """Binary P6 reader returning (3, H, W) float32 in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit rasters are supported")
    pix = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return (pix.reshape(h, w, 3).transpose(2, 0, 1) / 255.0).astype(np.float32)


def write_ppm(path: Path | str, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[1:]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + arr.transpose(1, 2, 0).tobytes())


def _read_png(path: Path) -> np.ndarray:
    from matplotlib import image as mpimg

    arr = mpimg.imread(path)
    if arr.dtype == np.uint8:
        arr = arr / 255.0
    return np.asarray(arr[..., :3], dtype=np.float32).transpose(2, 0, 1)


def load_directory(root: Path | str) -> ImageSet:
    """One subdirectory per class (sorted by name), each holding ``.ppm`` or
    ``.png`` files of a common size."""
    root = Path(root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) < 2:
        raise ValueError(f"{root}: need at least two class subdirectories")
    images, labels = [], []
    for c, d in enumerate(class_dirs):
        for f in sorted(d.iterdir()):
            suffix = f.suffix.lower()
            if suffix == ".ppm":
                images.append(read_ppm(f))
            elif suffix == ".png":
                images.append(_read_png(f))
            else:
                continue
            labels.append(c)
    if not images:
        raise ValueError(f"{root}: no images found")
    return ImageSet(np.stack(images), np.asarray(labels, dtype=np.int64), len(class_dirs))
