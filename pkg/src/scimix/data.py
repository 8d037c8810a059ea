"""Core tensors, dataset splits, batch pairing and normalization conventions.

Images live in [-1, 1] throughout the codebase. Missing labels are encoded
by the sentinel value -1 so batch collation stays uniform.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

UNLABELED = -1


@dataclass(frozen=True)
class ImageBatch:
    """A batch of images in [-1, 1] with optional integer labels.

    pixels: float tensor [B, C, H, W]; labels: int tensor [B] with -1 for
    unlabeled rows (always present, sentinel-encoded).
    """

    pixels: torch.Tensor
    labels: torch.Tensor = None

    def __post_init__(self):
        if self.pixels.dim() != 4:
            raise ValueError(f"pixels must be [B, C, H, W], got {tuple(self.pixels.shape)}")
        if self.pixels.shape[0] < 1:
            raise ValueError("empty batch")
        if self.labels is None:
            object.__setattr__(
                self, "labels",
                torch.full((self.pixels.shape[0],), UNLABELED, dtype=torch.long),
            )
        if self.labels.shape[0] != self.pixels.shape[0]:
            raise ValueError("labels length does not match batch size")

    def __len__(self):
        return self.pixels.shape[0]


@dataclass(frozen=True)
class HybridRecord:
    """One generated hybrid with its lineage and filter verdict."""

    image: torch.Tensor  # [C, H, W]
    sem_parent: int
    nonsem_parent: int
    imputed_label: int
    accepted: bool | None = None


@dataclass(frozen=True)
class SplitManifest:
    """Seeded partition of a dataset into labeled/unlabeled/val/test index sets."""

    labeled_idx: tuple
    unlabeled_idx: tuple
    val_idx: tuple
    test_idx: tuple
    seed: int
    n_labeled: int

    def sections(self):
        return {
            "labeled": self.labeled_idx,
            "unlabeled": self.unlabeled_idx,
            "val": self.val_idx,
            "test": self.test_idx,
        }


def make_splits(dataset_size, labels, n_labeled, seed, val_fraction=0.0,
                test_fraction=0.0):
    """Partition ``dataset_size`` indices into labeled/unlabeled/val/test sets.

    The labeled set is class-balanced up to remainder (remainder assigned
    round-robin by class frequency). Pure function of (labels, n_labeled,
    seed, fractions).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != dataset_size:
        raise ValueError("labels length must equal dataset_size")
    if n_labeled > dataset_size:
        raise ValueError("n_labeled exceeds dataset size")
    classes = np.unique(labels)
    k = len(classes)
    if n_labeled < k:
        raise ValueError(f"n_labeled={n_labeled} cannot cover all {k} classes")

    rng = np.random.default_rng(seed)
    order = rng.permutation(dataset_size)

    n_test = int(round(test_fraction * dataset_size))
    n_val = int(round(val_fraction * dataset_size))
    test_idx = np.sort(order[:n_test])
    val_idx = np.sort(order[n_test:n_test + n_val])
    train_pool = order[n_test + n_val:]

    per_class = {c: [i for i in train_pool if labels[i] == c] for c in classes}
    base, rem = divmod(n_labeled, k)
    # remainder goes round-robin to the most frequent classes
    by_freq = sorted(classes, key=lambda c: (-len(per_class[c]), c))
    quota = {c: base for c in classes}
    for c in by_freq[:rem]:
        quota[c] += 1

    labeled = []
    for c in classes:
        pool = per_class[c]
        if quota[c] > len(pool):
            raise ValueError(f"class {c} has only {len(pool)} train samples, need {quota[c]}")
        labeled.extend(pool[:quota[c]])
    labeled = np.sort(np.array(labeled, dtype=np.int64))
    labeled_set = set(labeled.tolist())
    unlabeled = np.sort(np.array([i for i in train_pool if i not in labeled_set],
                                 dtype=np.int64))
    return SplitManifest(
        labeled_idx=tuple(int(i) for i in labeled),
        unlabeled_idx=tuple(int(i) for i in unlabeled),
        val_idx=tuple(int(i) for i in val_idx),
        test_idx=tuple(int(i) for i in test_idx),
        seed=int(seed),
        n_labeled=int(n_labeled),
    )


def save_manifest(manifest, path):
    """Write a SplitManifest as a diffable text file (one index per line)."""
    lines = [f"# seed={manifest.seed} n_labeled={manifest.n_labeled}"]
    for name, idx in manifest.sections().items():
        lines.append(f"[{name}]")
        lines.extend(str(i) for i in idx)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_manifest(path):
    seed = n_labeled = None
    sections = {"labeled": [], "unlabeled": [], "val": [], "test": []}
    current = None
    with open(path) as f:
        for raw in f:
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    key, _, val = tok.partition("=")
                    if key == "seed":
                        seed = int(val)
                    elif key == "n_labeled":
                        n_labeled = int(val)
            elif line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                if current not in sections:
                    raise ValueError(f"unknown manifest section {current!r}")
            else:
                sections[current].append(int(line))
    if seed is None or n_labeled is None:
        raise ValueError("manifest header missing seed/n_labeled")
    return SplitManifest(
        labeled_idx=tuple(sections["labeled"]),
        unlabeled_idx=tuple(sections["unlabeled"]),
        val_idx=tuple(sections["val"]),
        test_idx=tuple(sections["test"]),
        seed=seed,
        n_labeled=n_labeled,
    )


def pair_permutation(batch_size, seed):
    """Derangement of range(batch_size): no sample is paired with itself.

    Resamples until fixed-point-free; expected O(1) retries.
    """
    if batch_size < 2:
        raise ValueError("need batch_size >= 2 to pair samples")
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(batch_size)
        if not np.any(perm == np.arange(batch_size)):
            return perm


def normalize(raw):
    """Affine map [0, 1] -> [-1, 1]; clamps out-of-range input with a warning."""
    t = torch.as_tensor(raw)
    if t.numel() and (t.min() < 0 or t.max() > 1):
        warnings.warn("normalize: input outside [0, 1], clamping")
        t = t.clamp(0.0, 1.0)
    return 2.0 * t - 1.0


def denormalize(x):
    """Inverse of :func:`normalize`: [-1, 1] -> [0, 1]."""
    t = torch.as_tensor(x)
    return (t + 1.0) / 2.0
