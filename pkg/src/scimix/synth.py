"""Desk-scale factorized dataset: glyph class (semantic) on procedural
backgrounds (non-semantic), plus generic image-folder ingestion.

The glyph class is drawn independently of the background parameters, so the
two factors are statistically independent by construction and every sample
carries ground-truth background parameters.
"""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass

import numpy as np
from PIL import Image

N_GLYPHS = 6  # disk, plus, triangle, ring, square, diamond


@dataclass(frozen=True)
class FactorSpec:
    n_classes: int = 4
    image_size: int = 32
    n_train: int = 4000
    n_test: int = 1000
    glyph_scale: float = 0.55
    jitter: float = 0.12
    seed: int = 0


@dataclass
class ArrayDataset:
    """In-memory dataset: images float32 [N, C, H, W] in [-1, 1], labels int64 [N]."""

    images: np.ndarray
    labels: np.ndarray
    factors: np.ndarray = None  # [N, 3] (hue, phase, gradient) when synthetic

    def __len__(self):
        return self.images.shape[0]

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1


def _palette(hue):
    """Smooth cosine palette: hue in [0,1) -> rgb in [0,1]."""
    offsets = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0])
    return 0.5 + 0.45 * np.cos(2 * np.pi * (np.asarray(hue)[..., None] + offsets))


def render_background(hue, phase, gradient, size):
    """Deterministic background from its three factor parameters, in [0,1]."""
    u, v = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size),
                       indexing="xy")
    c, s = np.cos(gradient), np.sin(gradient)
    shade = 0.55 + 0.30 * (u * c + v * s) / np.sqrt(2.0)
    shade = shade + 0.15 * np.sin(4.0 * np.pi * (u * s - v * c) + phase)
    rgb = _palette(hue)  # [3]
    img = rgb[:, None, None] * np.clip(shade, 0.05, 1.0)[None, :, :]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _glyph_mask(cls, size, cx, cy, radius):
    """Anti-aliased [0,1] mask for glyph class ``cls`` centered at (cx, cy)."""
    u, v = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size),
                       indexing="xy")
    x, y = u - cx, v - cy
    edge = 2.0 / size

    def soft(d):  # d > 0 inside
        return np.clip(d / edge + 0.5, 0.0, 1.0)

    r = np.sqrt(x * x + y * y)
    if cls == 0:  # disk
        return soft(radius - r)
    if cls == 1:  # plus
        w = radius * 0.35
        bar1 = np.minimum(soft(w - np.abs(x)), soft(radius - np.abs(y)))
        bar2 = np.minimum(soft(w - np.abs(y)), soft(radius - np.abs(x)))
        return np.maximum(bar1, bar2)
    if cls == 2:  # upward triangle
        d1 = y + radius * 0.8                      # below top edge? baseline
        d2 = radius * 0.8 - y
        # sides: |x| <= (y + r) * slope
        d3 = (y + radius * 0.8) * 0.65 - np.abs(x)
        return np.minimum(np.minimum(soft(d1), soft(d2)), soft(d3))
    if cls == 3:  # ring
        return np.minimum(soft(radius - r), soft(r - radius * 0.55))
    if cls == 4:  # square
        return np.minimum(soft(radius * 0.85 - np.abs(x)),
                          soft(radius * 0.85 - np.abs(y)))
    if cls == 5:  # diamond
        return soft(radius * 1.1 - (np.abs(x) + np.abs(y)))
    raise ValueError(f"no glyph for class {cls}")


def render_sample(cls, hue, phase, gradient, cx, cy, radius, size):
    bg = render_background(hue, phase, gradient, size)
    mask = _glyph_mask(cls, size, cx, cy, radius)[None, :, :]
    # complementary hue keeps the glyph visible on any background
    glyph_rgb = np.clip(_palette((hue + 0.5) % 1.0) * 1.1, 0.0, 1.0)
    fg = glyph_rgb.astype(np.float32)[:, None, None] * np.ones_like(bg)
    img = bg * (1.0 - mask) + fg * mask
    return (2.0 * img - 1.0).astype(np.float32)


def generate_synthetic_dataset(spec: FactorSpec, split="train"):
    """Deterministic glyph-on-background dataset for the given spec and split."""
    if spec.n_classes > N_GLYPHS:
        raise ValueError(f"at most {N_GLYPHS} glyph classes available")
    n = spec.n_train if split == "train" else spec.n_test
    seed = spec.seed if split == "train" else spec.seed + 1_000_003
    rng = np.random.default_rng(seed)

    labels = np.arange(n) % spec.n_classes  # uniform class histogram
    rng.shuffle(labels)
    hues = rng.uniform(0.0, 1.0, n)
    phases = rng.uniform(0.0, 2 * np.pi, n)
    gradients = rng.uniform(0.0, 2 * np.pi, n)
    cxs = rng.uniform(-spec.jitter, spec.jitter, n)
    cys = rng.uniform(-spec.jitter, spec.jitter, n)
    radii = spec.glyph_scale * (1.0 + rng.uniform(-spec.jitter, spec.jitter, n))

    images = np.stack([
        render_sample(int(labels[i]), hues[i], phases[i], gradients[i],
                      cxs[i], cys[i], radii[i], spec.image_size)
        for i in range(n)
    ])
    factors = np.stack([hues, phases, gradients], axis=1)
    return ArrayDataset(images=images, labels=labels.astype(np.int64),
                        factors=factors)


def save_dataset(ds: ArrayDataset, out_dir, write_pngs=False):
    os.makedirs(out_dir, exist_ok=True)
    np.savez_compressed(os.path.join(out_dir, "images.npz"),
                        images=ds.images, labels=ds.labels)
    with open(os.path.join(out_dir, "labels.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "class"])
        for i, y in enumerate(ds.labels):
            w.writerow([i, int(y)])
    if ds.factors is not None:
        with open(os.path.join(out_dir, "factors.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["index", "class", "hue", "phase", "gradient"])
            for i, y in enumerate(ds.labels):
                w.writerow([i, int(y)] + [f"{v:.17g}" for v in ds.factors[i]])
    if write_pngs:
        png_dir = os.path.join(out_dir, "pngs")
        os.makedirs(png_dir, exist_ok=True)
        for i in range(len(ds)):
            arr = np.clip((ds.images[i] + 1.0) * 127.5, 0, 255).astype(np.uint8)
            Image.fromarray(arr.transpose(1, 2, 0)).save(
                os.path.join(png_dir, f"{i:06d}_c{int(ds.labels[i])}.png"))


def load_dataset(path):
    """Load a dataset saved by :func:`save_dataset` (float archive preferred)."""
    archive = os.path.join(path, "images.npz")
    if not os.path.exists(archive):
        raise FileNotFoundError(f"no images.npz under {path}")
    data = np.load(archive)
    factors = None
    fpath = os.path.join(path, "factors.csv")
    if os.path.exists(fpath):
        rows = []
        with open(fpath) as f:
            reader = csv.reader(f)
            next(reader)
            for row in reader:
                rows.append([float(row[2]), float(row[3]), float(row[4])])
        factors = np.array(rows)
    return ArrayDataset(images=data["images"], labels=data["labels"],
                        factors=factors)


def load_image_folder(path, image_size=32):
    """Load class-named subdirectories of images, resized and normalized.

    Ordering is stable (lexicographic path sort); unreadable files are
    skipped with a warning. An empty class directory is an error.
    """
    classes = sorted(d for d in os.listdir(path)
                     if os.path.isdir(os.path.join(path, d)))
    if not classes:
        raise ValueError(f"no class subdirectories under {path}")
    images, labels = [], []
    n_skipped = 0
    for label, cls in enumerate(classes):
        files = sorted(os.listdir(os.path.join(path, cls)))
        n_before = len(images)
        for name in files:
            fpath = os.path.join(path, cls, name)
            try:
                with Image.open(fpath) as im:
                    im = im.convert("RGB").resize((image_size, image_size),
                                                  Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except Exception as exc:  # unreadable file
                warnings.warn(f"skipping unreadable {fpath}: {exc}")
                n_skipped += 1
                continue
            images.append(2.0 * arr.transpose(2, 0, 1) - 1.0)
            labels.append(label)
        if len(images) == n_before:
            raise ValueError(f"class directory {cls!r} has no readable images")
    if n_skipped:
        warnings.warn(f"skipped {n_skipped} unreadable files in {path}")
    return ArrayDataset(images=np.stack(images),
                        labels=np.array(labels, dtype=np.int64))
