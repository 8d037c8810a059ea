"""Hybrid-quality metrics (semantic transfer rate, non-semantic preservation
rate) and aggregate experiment reporting.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .networks import ClassifierHead, SemanticEncoder

ORACLE_RELIABLE_ACC = 90.0


@dataclass
class TransferReport:
    s_c: float
    s_r: float
    n_hybrids: int
    oracle_accuracy: float


class OracleClassifier(nn.Module):
    """Fully-supervised classifier used as a proxy for human hybrid labeling."""

    def __init__(self, n_classes, in_ch=3, width=16, d_c=128):
        super().__init__()
        self.encoder = SemanticEncoder(in_ch, width, d_c)
        self.head = ClassifierHead(d_c, n_classes)

    def forward(self, x):
        return self.head(self.encoder(x))


def train_oracle(images, labels, n_classes, epochs=15, batch_size=64,
                 lr=1e-3, seed=0, width=16):
    """Train the oracle on the fully labeled dataset; returns (model, clean
    accuracy computed on the training distribution holdout passed by caller
    via evaluate_accuracy).
    """
    torch.manual_seed(seed)
    model = OracleClassifier(n_classes, in_ch=images.shape[1], width=width)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    n = images.shape[0]
    model.train()
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            x = torch.as_tensor(images[idx])
            y = torch.as_tensor(labels[idx])
            opt.zero_grad()
            loss = nn.functional.cross_entropy(model(x), y)
            loss.backward()
            opt.step()
    model.eval()
    return model


@torch.no_grad()
def evaluate_accuracy(model, images, labels, batch_size=256):
    """Percentage accuracy of a classifier on an array dataset."""
    model.eval()
    correct = 0
    n = images.shape[0]
    for start in range(0, n, batch_size):
        x = torch.as_tensor(images[start:start + batch_size])
        y = torch.as_tensor(labels[start:start + batch_size])
        correct += int((model(x).argmax(dim=1) == y).sum())
    return 100.0 * correct / n


@torch.no_grad()
def semantic_transfer_rate(hybrids, oracle, oracle_accuracy=None,
                           batch_size=256):
    """Percentage of hybrids the oracle assigns to the imputed (semantic
    parent's) label.
    """
    if not hybrids:
        raise ValueError("no hybrids to score")
    if oracle_accuracy is not None and oracle_accuracy < ORACLE_RELIABLE_ACC:
        warnings.warn(
            f"oracle clean accuracy {oracle_accuracy:.1f}% is low; "
            "the semantic transfer rate may be unreliable")
    oracle.eval()
    images = torch.stack([r.image for r in hybrids])
    labels = torch.tensor([r.imputed_label for r in hybrids])
    correct = 0
    for start in range(0, len(hybrids), batch_size):
        pred = oracle(images[start:start + batch_size]).argmax(dim=1)
        correct += int((pred == labels[start:start + batch_size]).sum())
    return 100.0 * correct / len(hybrids)


def nonsemantic_preservation_rate(hybrids, parent_images):
    """Percentage of hybrids strictly closer (pixel L2) to their non-semantic
    parent than to their semantic parent. Ties count as failures.
    """
    if not hybrids:
        raise ValueError("no hybrids to score")
    parent_images = torch.as_tensor(parent_images)
    wins = 0
    for r in hybrids:
        x_h = r.image.flatten()
        d_sem = (x_h - parent_images[r.sem_parent].flatten()).norm()
        d_non = (x_h - parent_images[r.nonsem_parent].flatten()).norm()
        wins += int(d_sem > d_non)
    return 100.0 * wins / len(hybrids)


def aggregate_runs(run_reports):
    """Group per-run accuracy reports by setting; mean and population std.

    Each report is a dict with at least {setting, accuracy}; reports within
    one group must share a config_hash when present.
    """
    if not run_reports:
        raise ValueError("no run reports")
    groups = {}
    for rep in run_reports:
        groups.setdefault(rep["setting"], []).append(rep)
    table = {}
    for setting, reps in groups.items():
        hashes = {r.get("config_hash") for r in reps if r.get("config_hash")}
        if len(hashes) > 1:
            raise ValueError(f"mixed configs in group {setting!r}: {hashes}")
        accs = np.array([r["accuracy"] for r in reps], dtype=np.float64)
        table[setting] = (float(accs.mean()), float(accs.std()), len(reps))
    return table


def format_table(table):
    lines = [f"{'setting':<32} {'mean':>8} {'std':>8} {'runs':>5}"]
    for setting in sorted(table):
        mean, std, n = table[setting]
        lines.append(f"{setting:<32} {mean:8.2f} {std:8.2f} {n:5d}")
    return "\n".join(lines)
