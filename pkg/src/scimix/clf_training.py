"""Classifier training with hybrid data augmentation: supervised,
mean-teacher and FixMatch-lite backbones, each optionally extended with one
hybrid-exploitation loss on filtered hybrids from a frozen generator
checkpoint.
"""

from __future__ import annotations

import copy
import csv
import json
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import losses as L
from .data import UNLABELED, pair_permutation
from .gen_training import NumericalError, manifest_hash, masked_labels
from .networks import ClassifierHead, SemanticEncoder, ema_update


class ImageClassifier(nn.Module):
    def __init__(self, n_classes, in_ch=3, width=16, d_c=128):
        super().__init__()
        self.encoder = SemanticEncoder(in_ch, width, d_c)
        self.head = ClassifierHead(d_c, n_classes)

    def forward(self, x):
        return self.head(self.encoder(x))


def weak_augment(x, rng, max_shift=2, flip=True):
    """Small translation + horizontal flip."""
    out = x.clone()
    h, w = x.shape[-2], x.shape[-1]
    for i in range(x.shape[0]):
        dy = int(rng.integers(-max_shift, max_shift + 1))
        dx = int(rng.integers(-max_shift, max_shift + 1))
        img = torch.roll(x[i], shifts=(dy, dx), dims=(-2, -1))
        if flip and rng.random() < 0.5:
            img = torch.flip(img, dims=(-1,))
        out[i] = img
    return out


def strong_augment(x, rng):
    """Crop-and-pad, flip, brightness/contrast jitter, one random erasing box.

    Stands in for a full learned augmentation policy.
    """
    out = x.clone()
    h, w = x.shape[-2], x.shape[-1]
    for i in range(x.shape[0]):
        img = x[i]
        dy = int(rng.integers(-4, 5))
        dx = int(rng.integers(-4, 5))
        img = torch.roll(img, shifts=(dy, dx), dims=(-2, -1))
        if rng.random() < 0.5:
            img = torch.flip(img, dims=(-1,))
        contrast = 1.0 + float(rng.uniform(-0.25, 0.25))
        brightness = float(rng.uniform(-0.25, 0.25))
        img = img * contrast + brightness
        eh = int(rng.integers(h // 8, h // 3))
        ew = int(rng.integers(w // 8, w // 3))
        ey = int(rng.integers(0, h - eh))
        ex = int(rng.integers(0, w - ew))
        img = img.clone()
        img[..., ey:ey + eh, ex:ex + ew] = 0.0
        out[i] = img.clamp(-1.0, 1.0)
    return out


@dataclass
class StepLosses:
    backbone: float
    hybrid: float
    n_accepted: int
    total: float


class ClassifierTraining:
    """One classifier run: student, optional EMA teacher, frozen generator."""

    def __init__(self, config, n_classes, in_ch=3, generator_bundle=None):
        cfg = config["clf_train"]
        self.cfg = cfg
        self.backbone = cfg["backbone"]
        self.hybrid_loss = cfg["hybrid_loss"]
        self.generator = generator_bundle
        if self.hybrid_loss != "none" and generator_bundle is None:
            raise ValueError("hybrid losses need a generator checkpoint")
        torch.manual_seed(cfg["seed"])
        width = config["model"]["width"]
        d_c = config["model"]["d_c"]
        self.student = ImageClassifier(n_classes, in_ch, width, d_c)
        if cfg["init"] == "from_generator_classifier":
            if generator_bundle is None:
                raise ValueError("from_generator_classifier init needs a checkpoint")
            self.student.encoder.load_state_dict(
                generator_bundle.e_c.state_dict())
            self.student.head.load_state_dict(
                generator_bundle.head.state_dict())
        elif cfg["init"] != "random":
            raise ValueError(f"unknown init {cfg['init']!r}")
        self.teacher = copy.deepcopy(self.student)
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        self.opt = torch.optim.Adam(self.student.parameters(), lr=cfg["lr"])
        self.step = 0
        self.total_steps = 1
        if generator_bundle is not None:
            generator_bundle.eval()
            for p in generator_bundle.parameters():
                p.requires_grad_(False)

    def consistency_weight(self):
        ramp = max(1.0, self.cfg["ramp_frac"] * self.total_steps)
        return self.cfg["consistency_weight"] * min(1.0, self.step / ramp)

    def _backbone_loss(self, x, labels, rng):
        student, teacher = self.student, self.teacher
        if self.backbone == "supervised":
            logits = student(x)
            rep = L.semantic_loss(logits, labels, mode="supervised_ce")
            return rep.total, logits
        if self.backbone == "meanteacher":
            x_student = weak_augment(x, rng)
            x_teacher = weak_augment(x, rng)
            logits = student(x_student)
            with torch.no_grad():
                teacher_probs = F.softmax(teacher(x_teacher), dim=1)
            rep = L.semantic_loss(logits, labels, mode="meanteacher",
                                  teacher_probs=teacher_probs,
                                  consistency_weight=self.consistency_weight())
            return rep.total, logits
        if self.backbone == "fixmatch_lite":
            x_weak = weak_augment(x, rng)
            logits_weak = student(x_weak)
            rep = L.semantic_loss(logits_weak, labels, mode="supervised_ce")
            with torch.no_grad():
                probs = F.softmax(logits_weak, dim=1)
                conf, pseudo = probs.max(dim=1)
                mask = conf >= self.cfg["fixmatch_threshold"]
            loss = rep.total
            if int(mask.sum()):
                x_strong = strong_augment(x[mask], rng)
                loss = loss + self.cfg["fixmatch_weight"] * F.cross_entropy(
                    self.student(x_strong), pseudo[mask])
            return loss, logits_weak
        raise ValueError(f"unknown backbone {self.backbone!r}")

    def _pseudo_labels(self, x, labels):
        """Labels for hybrid filtering: ground truth when present, otherwise
        the (teacher's) argmax prediction.
        """
        model = self.teacher if self.backbone == "meanteacher" else self.student
        with torch.no_grad():
            pred = model(x).argmax(dim=1)
        return torch.where(labels != UNLABELED, labels, pred)

    def _hybrid_term(self, x, labels, pairing_seed):
        """Contribution of accepted filtered hybrids; 0 when none accepted."""
        gen = self.generator
        b = x.shape[0]
        perm = pair_permutation(b, pairing_seed)
        y1 = self._pseudo_labels(x, labels)
        with torch.no_grad():
            x_h = gen.generate(gen.e_c(x), gen.e_r(x[perm]))
            gen_pred = gen.head(gen.e_c(x_h)).argmax(dim=1)
            accepted = gen_pred == y1
        n_acc = int(accepted.sum())
        if n_acc == 0:
            return None, 0
        x_h, x1, x2 = x_h[accepted], x[accepted], x[perm][accepted]
        logits_h = self.student(x_h)
        if self.hybrid_loss == "contradict":
            with torch.no_grad():
                f_c = F.softmax(self.student(x1), dim=1)
                f_r = F.softmax(self.student(x2), dim=1)
            loss = L.contradict_loss(F.softmax(logits_h, dim=1), f_c, f_r,
                                     self.cfg["alpha"])
            return loss, n_acc
        sem_labels = labels[accepted]
        with torch.no_grad():
            sem_probs = F.softmax(self.student(x1), dim=1)
        rep = L.alt_hybrid_loss(self.hybrid_loss, logits_h,
                                sem_labels=sem_labels, sem_probs=sem_probs)
        return (rep.loss if rep.n_used else None), rep.n_used

    def scimix_step(self, x, labels, rng, pairing_seed):
        """One optimizer update: backbone loss plus the configured hybrid
        loss on accepted hybrids, then an EMA teacher update.
        """
        backbone_loss, _ = self._backbone_loss(x, labels, rng)
        hybrid_loss = torch.zeros(())
        n_acc = 0
        if self.hybrid_loss != "none":
            term, n_acc = self._hybrid_term(x, labels, pairing_seed)
            if term is not None:
                hybrid_loss = term
        total = backbone_loss + self.cfg["hybrid_weight"] * hybrid_loss
        if not torch.isfinite(total):
            raise NumericalError("non-finite classifier loss")
        self.opt.zero_grad()
        total.backward()
        self.opt.step()
        if self.backbone == "meanteacher":
            ema_update(self.teacher, self.student, self.cfg["ema_decay"])
        self.step += 1
        return StepLosses(backbone=float(backbone_loss.detach()),
                          hybrid=float(hybrid_loss.detach()), n_accepted=n_acc,
                          total=float(total.detach()))

    def eval_model(self):
        return self.teacher if self.backbone == "meanteacher" else self.student


@torch.no_grad()
def accuracy(model, images, labels, batch_size=256):
    model.eval()
    correct = 0
    n = images.shape[0]
    for start in range(0, n, batch_size):
        x = torch.as_tensor(images[start:start + batch_size])
        y = torch.as_tensor(labels[start:start + batch_size])
        correct += int((model(x).argmax(dim=1) == y).sum())
    model.train()
    return 100.0 * correct / n


def check_checkpoint_compat(meta, manifest, config):
    """Leakage guard: the generator must have been trained on the same split
    and data/split protocol as this classifier run.
    """
    if meta.get("split_hash") and meta["split_hash"] != manifest_hash(manifest):
        raise ValueError("checkpoint was trained on a different dataset split")
    if (meta.get("protocol_hash")
            and meta["protocol_hash"] != config.protocol_hash()):
        raise ValueError(
            "checkpoint data/split protocol differs from the current config")


def train_classifier(dataset, manifest, config, generator_bundle=None,
                     checkpoint_meta=None, test_dataset=None, out_dir=None,
                     progress=False):
    """Train a classifier per config; returns (model, report dict)."""
    cfg = config["clf_train"]
    if checkpoint_meta is not None:
        check_checkpoint_compat(checkpoint_meta, manifest, config)
    n_classes = config["data"]["n_classes"]
    run = ClassifierTraining(config, n_classes,
                             in_ch=config["data"]["channels"],
                             generator_bundle=generator_bundle)

    labeled = np.asarray(manifest.labeled_idx, dtype=np.int64)
    unlabeled = np.asarray(manifest.unlabeled_idx, dtype=np.int64)
    labels = masked_labels(dataset.labels, manifest)
    batch_size = cfg["batch_size"]
    # batches mix labeled (resampled) and unlabeled rows half/half so the
    # supervised signal is present every step even at tiny label counts
    n_lab_per_batch = batch_size // 2 if len(unlabeled) else batch_size
    steps_per_epoch = max(1, (len(labeled) + len(unlabeled)) // batch_size)
    run.total_steps = max(1, cfg["epochs"] * steps_per_epoch)

    rng = np.random.default_rng(cfg["seed"])
    aug_rng = np.random.default_rng(cfg["seed"] + 1)
    rows = []
    for epoch in range(cfg["epochs"]):
        if cfg["lr_decay_epochs"] and epoch and epoch % cfg["lr_decay_epochs"] == 0:
            for group in run.opt.param_groups:
                group["lr"] *= 0.5
        for _ in range(steps_per_epoch):
            lab_idx = rng.choice(labeled, size=min(n_lab_per_batch, len(labeled)),
                                 replace=len(labeled) < n_lab_per_batch)
            parts = [lab_idx]
            n_unlab = batch_size - len(lab_idx)
            if len(unlabeled) and n_unlab:
                parts.append(rng.choice(unlabeled, size=n_unlab,
                                        replace=len(unlabeled) < n_unlab))
            idx = np.concatenate(parts)
            x = torch.as_tensor(dataset.images[idx])
            y = torch.as_tensor(labels[idx])
            step = run.scimix_step(x, y, aug_rng,
                                   pairing_seed=cfg["seed"] + run.step)
        test_acc = None
        if test_dataset is not None:
            test_acc = accuracy(run.eval_model(), test_dataset.images,
                                test_dataset.labels)
        rows.append([epoch, step.backbone, step.hybrid, step.n_accepted,
                     test_acc])
        if progress:
            print(f"epoch {epoch}: loss={step.total:.4f} acc={test_acc}")

    model = run.eval_model()
    model.eval()
    final_acc = (accuracy(model, test_dataset.images, test_dataset.labels)
                 if test_dataset is not None else None)
    report = {
        "accuracy": final_acc,
        "seed": cfg["seed"],
        "config_hash": config.hash(),
        "backbone": cfg["backbone"],
        "hybrid_loss": cfg["hybrid_loss"],
        "setting": f"{cfg['backbone']}+{cfg['hybrid_loss']}",
    }
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "accuracy.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "backbone_loss", "hybrid_loss", "n_accepted",
                        "test_accuracy"])
            for row in rows:
                w.writerow([row[0]] + [repr(float(v)) if v is not None else ""
                                       for v in row[1:]])
        with open(os.path.join(out_dir, "report.json"), "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
        torch.save(model.state_dict(), os.path.join(out_dir, "model.pt"))
    return model, report
