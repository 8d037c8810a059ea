"""Hybrid generation from a trained checkpoint plus baseline mixers
(MixUp, CutMix, Fourier amplitude swap, channel-statistic transfer).
"""

from __future__ import annotations

import csv
import os
import warnings

import numpy as np
import torch
from PIL import Image

from .data import HybridRecord, pair_permutation


@torch.no_grad()
def mix(x_sem, x_nonsem, bundle):
    """SciMix hybrid: semantic code of x_sem + context code of x_nonsem."""
    bundle.eval()
    return bundle.generate(bundle.e_c(x_sem), bundle.e_r(x_nonsem))


@torch.no_grad()
def mix_batch_filtered(images, labels_or_pseudo, bundle, pairing_seed,
                       indices=None):
    """Pair the batch with a seeded derangement, generate hybrids, and mark
    each record accepted iff the checkpoint classifier re-identifies the
    imputed (semantic-parent) label on the re-encoded hybrid.

    Returns all records; callers train on the accepted subset.
    """
    bundle.eval()
    b = images.shape[0]
    perm = pair_permutation(b, pairing_seed)
    x_sem = images
    x_nonsem = images[perm]
    x_h = bundle.generate(bundle.e_c(x_sem), bundle.e_r(x_nonsem))
    pred = bundle.head(bundle.e_c(x_h)).argmax(dim=1)
    if indices is None:
        indices = np.arange(b)
    records = []
    for i in range(b):
        y1 = int(labels_or_pseudo[i])
        records.append(HybridRecord(
            image=x_h[i],
            sem_parent=int(indices[i]),
            nonsem_parent=int(indices[perm[i]]),
            imputed_label=y1,
            accepted=bool(pred[i].item() == y1),
        ))
    return records


def mixup(x1, x2, y1, y2, lam):
    """Convex pixel/label blend; quality scoring uses the dominant parent's
    hard label (lam >= 0.5 -> y1).
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    image = lam * x1 + (1.0 - lam) * x2
    soft = lam * y1 + (1.0 - lam) * y2
    return image, soft


def cutmix(x1, x2, y1, y2, lam, seed):
    """Paste a rectangle of area ratio (1 - lam) from x2 into x1.

    The soft label is mixed by the exact pasted-pixel fraction after the
    rectangle is clipped to the image.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    h, w = x1.shape[-2], x1.shape[-1]
    rng = np.random.default_rng(seed)
    cut_ratio = np.sqrt(1.0 - lam)
    cut_h, cut_w = int(round(h * cut_ratio)), int(round(w * cut_ratio))
    cy, cx = rng.integers(0, h), rng.integers(0, w)
    y0, y1_ = max(cy - cut_h // 2, 0), min(cy + (cut_h + 1) // 2, h)
    x0, x1_ = max(cx - cut_w // 2, 0), min(cx + (cut_w + 1) // 2, w)
    image = x1.clone()
    image[..., y0:y1_, x0:x1_] = x2[..., y0:y1_, x0:x1_]
    pasted_frac = (y1_ - y0) * (x1_ - x0) / (h * w)
    soft = (1.0 - pasted_frac) * y1 + pasted_frac * y2
    return image, soft


def fda_mix(x_sem, x_nonsem, beta):
    """Swap the centered low-frequency amplitude band of x_sem's spectrum
    with x_nonsem's; phase is kept from x_sem.

    The swapped square is symmetric about DC so the Hermitian symmetry of a
    real image's spectrum is preserved and the output is real.
    """
    if not 0.0 < beta <= 0.5:
        raise ValueError(f"beta must be in (0, 0.5], got {beta}")
    sem = x_sem.detach().cpu().numpy().astype(np.float64)
    non = x_nonsem.detach().cpu().numpy().astype(np.float64)
    h, w = sem.shape[-2], sem.shape[-1]
    half = max(1, int(round(beta * min(h, w)))) // 2
    cy, cx = h // 2, w // 2
    y0, y1 = cy - half, cy + half + 1
    x0, x1 = cx - half, cx + half + 1

    f_sem = np.fft.fftshift(np.fft.fft2(sem, axes=(-2, -1)), axes=(-2, -1))
    f_non = np.fft.fftshift(np.fft.fft2(non, axes=(-2, -1)), axes=(-2, -1))
    amp, phase = np.abs(f_sem), np.angle(f_sem)
    amp[..., y0:y1, x0:x1] = np.abs(f_non)[..., y0:y1, x0:x1]
    mixed = amp * np.exp(1j * phase)
    out = np.fft.ifft2(np.fft.ifftshift(mixed, axes=(-2, -1)), axes=(-2, -1))
    if np.abs(out.imag).max() > 1e-6:
        warnings.warn("fda_mix: non-negligible imaginary residue")
    out = np.clip(out.real, -1.0, 1.0)
    return torch.as_tensor(out, dtype=x_sem.dtype)


def adain_mix(x_sem, x_nonsem):
    """Per-channel statistic transfer: standardize x_sem's channels, rescale
    to x_nonsem's channel mean/std, clamp. Zero-variance channels pass
    through unchanged with a warning.
    """
    dims = tuple(range(x_sem.dim() - 2, x_sem.dim()))  # spatial dims
    mu_s = x_sem.mean(dim=dims, keepdim=True)
    sd_s = x_sem.std(dim=dims, keepdim=True, unbiased=False)
    mu_n = x_nonsem.mean(dim=dims, keepdim=True)
    sd_n = x_nonsem.std(dim=dims, keepdim=True, unbiased=False)
    flat = (sd_s < 1e-6)
    if flat.any():
        warnings.warn("adain_mix: zero-variance channel passed through")
    safe_sd = torch.where(flat, torch.ones_like(sd_s), sd_s)
    out = (x_sem - mu_s) / safe_sd * sd_n + mu_n
    out = torch.where(flat.expand_as(out), x_sem, out)
    return out.clamp(-1.0, 1.0)


def save_hybrid_records(records, out_dir):
    """Persist hybrids: images.npz + sidecar lineage table."""
    os.makedirs(out_dir, exist_ok=True)
    images = torch.stack([r.image for r in records]).cpu().numpy()
    np.savez_compressed(os.path.join(out_dir, "hybrids.npz"), images=images)
    with open(os.path.join(out_dir, "records.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sem_parent", "nonsem_parent", "imputed_label", "accepted"])
        for r in records:
            w.writerow([r.sem_parent, r.nonsem_parent, r.imputed_label,
                        int(bool(r.accepted))])


def load_hybrid_records(out_dir):
    data = np.load(os.path.join(out_dir, "hybrids.npz"))
    images = torch.from_numpy(data["images"])
    records = []
    with open(os.path.join(out_dir, "records.csv")) as f:
        reader = csv.reader(f)
        next(reader)
        for i, row in enumerate(reader):
            records.append(HybridRecord(
                image=images[i], sem_parent=int(row[0]),
                nonsem_parent=int(row[1]), imputed_label=int(row[2]),
                accepted=bool(int(row[3]))))
    return records


def _to_uint8(img):
    arr = img.detach().cpu().numpy() if torch.is_tensor(img) else img
    return np.clip((arr + 1.0) * 127.5, 0, 255).astype(np.uint8).transpose(1, 2, 0)


def contact_sheet(triplets, path, pad=2):
    """PNG grid of (x_sem | x_nonsem | x_h) rows."""
    if not triplets:
        raise ValueError("no triplets to render")
    c, h, w = triplets[0][0].shape
    rows = len(triplets)
    sheet = np.full((rows * (h + pad) + pad, 3 * (w + pad) + pad, 3), 255,
                    dtype=np.uint8)
    for r, triple in enumerate(triplets):
        for col, img in enumerate(triple):
            y0 = pad + r * (h + pad)
            x0 = pad + col * (w + pad)
            sheet[y0:y0 + h, x0:x0 + w] = _to_uint8(img)
    Image.fromarray(sheet).save(path)
