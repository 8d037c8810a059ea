"""Generator training loop: adversarial autoencoder with semantic guidance
and hybridization losses, alternating one discriminator update and one
generator-side update per iteration.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import os

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import losses as L
from .data import UNLABELED, pair_permutation
from .networks import NetworkBundle, ema_update, save_checkpoint


class NumericalError(RuntimeError):
    """A loss went non-finite; carries the offending batch indices."""

    def __init__(self, message, batch_indices=None):
        super().__init__(message)
        self.batch_indices = batch_indices


def manifest_hash(manifest):
    text = repr((manifest.labeled_idx, manifest.unlabeled_idx,
                 manifest.val_idx, manifest.test_idx, manifest.seed,
                 manifest.n_labeled))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def masked_labels(labels, manifest):
    """Full-length label vector with the sentinel on non-labeled rows."""
    out = np.full(len(labels), UNLABELED, dtype=np.int64)
    lab = np.asarray(manifest.labeled_idx, dtype=np.int64)
    out[lab] = np.asarray(labels)[lab]
    return out


class GeneratorTraining:
    """Owns the networks, optimizers and mean-teacher guide for one run."""

    def __init__(self, bundle: NetworkBundle, config, total_steps, seed=0):
        self.bundle = bundle
        self.cfg = config["gen_train"]
        self.variant = self.cfg["variant"]
        self.total_steps = max(1, total_steps)
        self.step = 0

        gen_params = (list(bundle.e_r.parameters())
                      + list(bundle.gen.parameters())
                      + list(bundle.router.parameters()))
        clf_params = list(bundle.e_c.parameters()) + list(bundle.head.parameters())
        self.opt_gen = torch.optim.Adam(gen_params, lr=self.cfg["lr_gen"],
                                        betas=(0.5, 0.999))
        self.opt_clf = torch.optim.Adam(clf_params, lr=self.cfg["lr_clf"],
                                        betas=(0.9, 0.999))
        self.opt_disc = torch.optim.Adam(bundle.disc.parameters(),
                                         lr=self.cfg["lr_disc"],
                                         betas=(0.5, 0.999))
        # mean-teacher guide over the semantic classifier
        self.teacher_e_c = copy.deepcopy(bundle.e_c)
        self.teacher_head = copy.deepcopy(bundle.head)
        for p in list(self.teacher_e_c.parameters()) + list(self.teacher_head.parameters()):
            p.requires_grad_(False)
        self.weights = {
            "rec": self.cfg["w_rec"], "adv_r": self.cfg["w_adv_r"],
            "sem": self.cfg["w_sem"],
            "hyb_class_pos": self.cfg["w_hyb_class_pos"],
            "hyb_cont_pos": self.cfg["w_hyb_cont_pos"],
            "hyb_class_neg": self.cfg["w_hyb_class_neg"],
            "hyb_cont_neg": self.cfg["w_hyb_cont_neg"],
            "adv_h": self.cfg["w_adv_h"],
        }

    def hybrids_active(self, step=None):
        step = self.step if step is None else step
        if self.variant == "no_hyb":
            return False
        return step >= self.cfg["hybrid_warmup_frac"] * self.total_steps

    def consistency_weight(self, step=None):
        step = self.step if step is None else step
        ramp = max(1.0, self.cfg["ramp_frac"] * self.total_steps)
        return self.cfg["consistency_weight"] * min(1.0, step / ramp)

    def _shared_forward(self, x, pairing_seed):
        """Build the encode/reconstruct/hybridize graph once per iteration;
        both step functions draw from it.
        """
        bundle = self.bundle
        shared = {}
        shared["z_c"] = bundle.e_c(x)
        shared["z_r"] = bundle.e_r(x)
        shared["x_hat"] = bundle.generate(shared["z_c"], shared["z_r"])
        shared["x_h"] = None
        if self.hybrids_active() and x.shape[0] >= 2:
            perm = pair_permutation(x.shape[0], pairing_seed)
            shared["perm"] = perm
            shared["x_h"] = bundle.generate(shared["z_c"], shared["z_r"][perm])
        return shared

    def discriminator_step(self, x, pairing_seed=None, shared=None):
        """One update of D against real images vs reconstructions (and
        hybrids once active). Leaves E/G/C untouched.
        """
        bundle = self.bundle
        if shared is None:
            with torch.no_grad():
                shared = self._shared_forward(
                    x, pairing_seed if pairing_seed is not None else self.step)
        fakes = [shared["x_hat"].detach()]
        if shared["x_h"] is not None:
            fakes.append(shared["x_h"].detach())
        real_logits = bundle.disc(x)
        fake_logits = bundle.disc(torch.cat(fakes))
        d_loss, _ = L.gan_losses(real_logits, fake_logits)
        self.opt_disc.zero_grad()
        d_loss.backward()
        self.opt_disc.step()
        return float(d_loss.detach())

    def _hybrid_components(self, x, shared):
        """The four hybridization terms plus the hybrid adversarial term.

        With the frozen criterion the targets are the detached live
        activations (identical values to a parameter snapshot taken at step
        start) and the hybrid is re-encoded with detached parameters, so no
        gradient reaches E_c, C or E_r through the criterion.
        """
        bundle, cfg = self.bundle, self.cfg
        sq = cfg["squared_norms"]
        perm = shared["perm"]
        x_h = shared["x_h"]
        logits = shared["logits"]
        frozen = self.variant != "nonfrozen_hyb"
        if frozen:
            logits_h = L.detached_call(
                bundle.head, L.detached_call(bundle.e_c, x_h))
            ctx_h = L.detached_call(bundle.e_r, x_h)
            t_class1, t_class2 = logits.detach(), logits[perm].detach()
            t_ctx1 = shared["z_r"].detach()
            t_ctx2 = t_ctx1[perm]
        else:
            logits_h = bundle.head(bundle.e_c(x_h))
            ctx_h = bundle.e_r(x_h)
            t_class1, t_class2 = logits, logits[perm]
            t_ctx1 = shared["z_r"]
            t_ctx2 = shared["z_r"][perm]
        comps = {
            "hyb_class_pos": L._dist(t_class1, logits_h, sq),
            "hyb_cont_pos": L._dist(t_ctx2, ctx_h, sq),
            "adv_h": L.adversarial_g_loss(bundle.disc(x_h)),
        }
        if self.variant == "basic_hyb":
            comps["hyb_class_neg"] = torch.zeros(())
            comps["hyb_cont_neg"] = torch.zeros(())
        else:
            comps["hyb_class_neg"] = F.relu(
                cfg["margin_class"] - L._dist(t_class2, logits_h, sq))
            comps["hyb_cont_neg"] = F.relu(
                cfg["margin_cont"] - L._dist(t_ctx1, ctx_h, sq))
        return comps

    def generator_step(self, x, labels, pairing_seed=None, shared=None):
        """One update of E_c, E_r, C, G per the active loss terms; D untouched."""
        bundle = self.bundle
        cfg = self.cfg
        zero = torch.zeros(())
        if shared is None:
            shared = self._shared_forward(
                x, pairing_seed if pairing_seed is not None else self.step)

        components = {
            "rec": L.reconstruction_loss(x, shared["x_hat"], cfg["squared_norms"]),
            "adv_r": L.adversarial_g_loss(bundle.disc(shared["x_hat"])),
        }
        logits = bundle.head(shared["z_c"])
        shared["logits"] = logits
        with torch.no_grad():
            teacher_probs = F.softmax(
                self.teacher_head(self.teacher_e_c(x)), dim=1)
        sem = L.semantic_loss(logits, labels, mode="meanteacher",
                              teacher_probs=teacher_probs,
                              consistency_weight=self.consistency_weight())
        components["sem"] = sem.total

        if shared["x_h"] is not None:
            components.update(self._hybrid_components(x, shared))
        else:
            for key in ("hyb_class_pos", "hyb_cont_pos", "hyb_class_neg",
                        "hyb_cont_neg", "adv_h"):
                components[key] = zero

        total, report = L.GenLossReport.combine(components, self.weights)
        if not torch.isfinite(total):
            raise NumericalError("non-finite generator loss")
        self.opt_gen.zero_grad()
        self.opt_clf.zero_grad()
        total.backward()
        self.opt_gen.step()
        self.opt_clf.step()
        ema_update(self.teacher_e_c, bundle.e_c, cfg["ema_decay"])
        ema_update(self.teacher_head, bundle.head, cfg["ema_decay"])
        return report


def _recon_grid(bundle, x, path, pad=2):
    """Two-row PNG: inputs on top, reconstructions below."""
    with torch.no_grad():
        was_training = bundle.training
        bundle.eval()
        x_hat = bundle.reconstruct(x)
        if was_training:
            bundle.train()
    n = min(8, x.shape[0])
    h, w = x.shape[-2], x.shape[-1]
    sheet = np.full((2 * (h + pad) + pad, n * (w + pad) + pad, 3), 255,
                    dtype=np.uint8)

    def blit(img, row, col):
        arr = np.clip((img.detach().cpu().numpy() + 1.0) * 127.5,
                      0, 255).astype(np.uint8).transpose(1, 2, 0)
        y0, x0 = pad + row * (h + pad), pad + col * (w + pad)
        sheet[y0:y0 + h, x0:x0 + w] = arr

    for i in range(n):
        blit(x[i], 0, i)
        blit(x_hat[i], 1, i)
    Image.fromarray(sheet).save(path)


def train_generator(dataset, manifest, config, out_dir=None, progress=False):
    """Full training run; returns (bundle, checkpoint path or None)."""
    cfg = config["gen_train"]
    seed = cfg["seed"]
    torch.manual_seed(seed)
    bundle = NetworkBundle.from_config(
        config, swapped_latents=(cfg["variant"] == "structural_zc"))
    bundle.train()

    train_idx = np.array(sorted(manifest.labeled_idx + manifest.unlabeled_idx),
                         dtype=np.int64)
    labels = masked_labels(dataset.labels, manifest)
    batch_size = cfg["batch_size"]
    steps_per_epoch = max(1, len(train_idx) // batch_size)
    total_steps = cfg["epochs"] * steps_per_epoch
    trainer = GeneratorTraining(bundle, config, total_steps, seed=seed)

    rng = np.random.default_rng(seed)
    rows = []
    last_batch = None
    try:
        for epoch in range(cfg["epochs"]):
            order = rng.permutation(train_idx)
            for b in range(steps_per_epoch):
                idx = order[b * batch_size:(b + 1) * batch_size]
                last_batch = idx
                x = torch.as_tensor(dataset.images[idx])
                y = torch.as_tensor(labels[idx])
                shared = trainer._shared_forward(x, seed + trainer.step)
                d_loss = 0.0
                for _ in range(cfg["disc_steps_per_gen"]):
                    d_loss = trainer.discriminator_step(x, shared=shared)
                report = trainer.generator_step(x, y, shared=shared)
                rows.append([trainer.step, d_loss] + report.as_row())
                trainer.step += 1
                if (out_dir and cfg["checkpoint_every"]
                        and trainer.step % cfg["checkpoint_every"] == 0):
                    _save(bundle, trainer, config, manifest, out_dir,
                          dataset, x)
            if progress:
                print(f"epoch {epoch}: rec={report.rec:.4f} d={d_loss:.4f} "
                      f"total={report.total:.4f}")
    except NumericalError as exc:
        exc.batch_indices = (last_batch.tolist()
                             if last_batch is not None else None)
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            with open(os.path.join(out_dir, "abort_dump.txt"), "w") as f:
                f.write(f"{exc}\nlast batch indices: {exc.batch_indices}\n")
            _write_csv(rows, out_dir)
        raise

    ckpt_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write_csv(rows, out_dir)
        ckpt_path = _save(bundle, trainer, config, manifest, out_dir,
                          dataset, final=True)
    bundle.eval()
    return bundle, ckpt_path


def _write_csv(rows, out_dir):
    with open(os.path.join(out_dir, "losses.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "d_loss", "rec", "adv_r", "sem", "hyb_class_pos",
                    "hyb_cont_pos", "hyb_class_neg", "hyb_cont_neg", "adv_h",
                    "total"])
        for row in rows:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def _save(bundle, trainer, config, manifest, out_dir, dataset, x=None,
          final=False):
    name = "gen_final.ckpt" if final else f"gen_step{trainer.step}.ckpt"
    path = os.path.join(out_dir, name)
    save_checkpoint(bundle, path, step=trainer.step,
                    seed=config["gen_train"]["seed"],
                    config_hash=config.hash(), ema_step=trainer.step,
                    split_hash=manifest_hash(manifest),
                    protocol_hash=config.protocol_hash())
    if x is None:
        idx = np.asarray(manifest.labeled_idx[:8], dtype=np.int64)
        x = torch.as_tensor(dataset.images[idx])
    _recon_grid(bundle, x, os.path.join(out_dir, f"recon_step{trainer.step}.png"))
    return path
