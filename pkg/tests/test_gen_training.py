import numpy as np
import pytest
import torch

from scimix.config import ExperimentConfig
from scimix.data import make_splits, pair_permutation
from scimix.gen_training import (GeneratorTraining, NumericalError,
                                 manifest_hash, masked_labels,
                                 train_generator)
from scimix.losses import HybridCriterion, hybrid_criterion_terms
from scimix.networks import NetworkBundle
from scimix.synth import ArrayDataset, FactorSpec, generate_synthetic_dataset

torch.manual_seed(0)


def tiny_config(**overrides):
    cfg = ExperimentConfig()
    for section, key, val in [
        ("data", "n_train", 32), ("data", "n_test", 16),
        ("model", "width", 8), ("model", "gen_width", 8),
        ("model", "d_c", 16), ("model", "c_r", 8), ("model", "disc_width", 8),
        ("gen_train", "epochs", 1), ("gen_train", "batch_size", 16),
        ("gen_train", "hybrid_warmup_frac", 0.0),
        ("split", "n_labeled", 8),
    ]:
        cfg.set(section, key, val)
    for dotted, val in overrides.items():
        section, key = dotted.split(".")
        cfg.set(section, key, val)
    return cfg


def tiny_dataset(cfg):
    spec = FactorSpec(n_classes=cfg["data"]["n_classes"],
                      image_size=cfg["data"]["image_size"],
                      n_train=cfg["data"]["n_train"],
                      n_test=cfg["data"]["n_test"],
                      seed=cfg["data"]["seed"])
    return generate_synthetic_dataset(spec)


def tiny_manifest(cfg, ds):
    return make_splits(len(ds), ds.labels, cfg["split"]["n_labeled"],
                       cfg["split"]["seed"])


class TestHelpers:
    def test_masked_labels_sentinel(self):
        cfg = tiny_config()
        ds = tiny_dataset(cfg)
        manifest = tiny_manifest(cfg, ds)
        masked = masked_labels(ds.labels, manifest)
        lab = set(manifest.labeled_idx)
        for i in range(len(ds)):
            if i in lab:
                assert masked[i] == ds.labels[i]
            else:
                assert masked[i] == -1

    def test_manifest_hash_sensitivity(self):
        cfg = tiny_config()
        ds = tiny_dataset(cfg)
        a = tiny_manifest(cfg, ds)
        assert manifest_hash(a) == manifest_hash(a)
        b = make_splits(len(ds), ds.labels, 8, seed=99)
        assert manifest_hash(a) != manifest_hash(b)


@pytest.fixture
def trainer_setup():
    cfg = tiny_config()
    torch.manual_seed(1)
    bundle = NetworkBundle.from_config(cfg)
    trainer = GeneratorTraining(bundle, cfg, total_steps=100)
    torch.manual_seed(2)
    x = torch.rand(8, 3, 32, 32) * 2 - 1
    labels = torch.tensor([0, 1, 2, 3, -1, -1, -1, -1])
    return cfg, bundle, trainer, x, labels


def snapshot(module):
    return {k: v.clone() for k, v in module.state_dict().items()}


def changed(module, snap):
    return any(not torch.equal(v, snap[k])
               for k, v in module.state_dict().items())


class TestParameterIsolation:
    def test_discriminator_step_touches_only_disc(self, trainer_setup):
        _, bundle, trainer, x, _ = trainer_setup
        snaps = {n: snapshot(m) for n, m in
                 [("e_c", bundle.e_c), ("e_r", bundle.e_r),
                  ("head", bundle.head), ("gen", bundle.gen),
                  ("disc", bundle.disc)]}
        trainer.discriminator_step(x, pairing_seed=0)
        assert changed(bundle.disc, snaps["disc"])
        for name in ("e_c", "e_r", "head", "gen"):
            assert not changed(getattr(bundle, name), snaps[name])

    def test_generator_step_leaves_disc_untouched(self, trainer_setup):
        _, bundle, trainer, x, labels = trainer_setup
        snaps = {n: snapshot(m) for n, m in
                 [("e_c", bundle.e_c), ("e_r", bundle.e_r),
                  ("head", bundle.head), ("gen", bundle.gen),
                  ("disc", bundle.disc)]}
        trainer.generator_step(x, labels, pairing_seed=0)
        assert not changed(bundle.disc, snaps["disc"])
        for name in ("e_c", "e_r", "head", "gen"):
            assert changed(getattr(bundle, name), snaps[name])

    def test_teacher_updated_by_ema_not_optimizer(self, trainer_setup):
        _, bundle, trainer, x, labels = trainer_setup
        t_snap = snapshot(trainer.teacher_e_c)
        trainer.generator_step(x, labels, pairing_seed=0)
        # EMA with decay 0.99 moves the teacher slightly toward the student
        assert changed(trainer.teacher_e_c, t_snap)
        for k, v in trainer.teacher_e_c.state_dict().items():
            if v.is_floating_point():
                assert torch.allclose(
                    v, 0.99 * t_snap[k] + 0.01 * bundle.e_c.state_dict()[k],
                    atol=1e-6)


class TestScheduling:
    def test_no_hyb_never_activates(self):
        cfg = tiny_config(**{"gen_train.variant": "no_hyb"})
        trainer = GeneratorTraining(NetworkBundle.from_config(cfg), cfg,
                                    total_steps=100)
        assert not any(trainer.hybrids_active(s) for s in range(100))

    def test_warmup_gates_hybrids(self):
        cfg = tiny_config(**{"gen_train.hybrid_warmup_frac": 0.5})
        trainer = GeneratorTraining(NetworkBundle.from_config(cfg), cfg,
                                    total_steps=100)
        assert not trainer.hybrids_active(49)
        assert trainer.hybrids_active(50)

    def test_consistency_ramp(self):
        cfg = tiny_config(**{"gen_train.consistency_weight": 2.0,
                             "gen_train.ramp_frac": 0.1})
        trainer = GeneratorTraining(NetworkBundle.from_config(cfg), cfg,
                                    total_steps=100)
        assert trainer.consistency_weight(0) == 0.0
        assert trainer.consistency_weight(5) == pytest.approx(1.0)
        assert trainer.consistency_weight(10) == pytest.approx(2.0)
        assert trainer.consistency_weight(80) == pytest.approx(2.0)


class TestHybridComponents:
    def test_frozen_path_matches_snapshot_criterion(self, trainer_setup):
        cfg, bundle, trainer, x, _ = trainer_setup
        shared = trainer._shared_forward(x, pairing_seed=3)
        shared["logits"] = bundle.head(shared["z_c"])
        comps = trainer._hybrid_components(x, shared)
        crit = HybridCriterion(bundle.e_c, bundle.head, bundle.e_r,
                               frozen=True)
        perm = shared["perm"]
        ref = hybrid_criterion_terms(
            shared["x_h"], x, x[perm], crit,
            margin_class=cfg["gen_train"]["margin_class"],
            margin_cont=cfg["gen_train"]["margin_cont"])
        names = ("hyb_class_pos", "hyb_cont_pos", "hyb_class_neg",
                 "hyb_cont_neg")
        for name, expected in zip(names, ref):
            assert torch.allclose(comps[name], expected, atol=1e-6), name

    def test_basic_hyb_zeroes_negative_terms(self):
        cfg = tiny_config(**{"gen_train.variant": "basic_hyb"})
        torch.manual_seed(1)
        bundle = NetworkBundle.from_config(cfg)
        trainer = GeneratorTraining(bundle, cfg, total_steps=10)
        x = torch.rand(6, 3, 32, 32) * 2 - 1
        shared = trainer._shared_forward(x, pairing_seed=0)
        shared["logits"] = bundle.head(shared["z_c"])
        comps = trainer._hybrid_components(x, shared)
        assert float(comps["hyb_class_neg"]) == 0.0
        assert float(comps["hyb_cont_neg"]) == 0.0
        assert float(comps["hyb_class_pos"].detach()) > 0.0

    def test_frozen_leaves_criterion_params_gradless(self, trainer_setup):
        _, bundle, trainer, x, _ = trainer_setup
        shared = trainer._shared_forward(x, pairing_seed=3)
        z_c_detached = shared["z_c"].detach()
        shared["logits"] = bundle.head(z_c_detached).detach()
        shared["z_r"] = shared["z_r"].detach()
        x_h = shared["x_h"].detach().requires_grad_(True)
        shared["x_h"] = x_h
        comps = trainer._hybrid_components(x, shared)
        total = sum(comps[k] for k in ("hyb_class_pos", "hyb_cont_pos",
                                       "hyb_class_neg", "hyb_cont_neg"))
        total.backward()
        assert x_h.grad is not None
        for m in (bundle.e_c, bundle.head, bundle.e_r):
            for p in m.parameters():
                assert p.grad is None


class TestTrainGenerator:
    def test_deterministic_runs_bit_identical(self, tmp_path):
        cfg = tiny_config()
        ds = tiny_dataset(cfg)
        manifest = tiny_manifest(cfg, ds)
        dirs = [tmp_path / "a", tmp_path / "b"]
        for d in dirs:
            train_generator(ds, manifest, cfg, out_dir=d)
        csv_a = (dirs[0] / "losses.csv").read_bytes()
        csv_b = (dirs[1] / "losses.csv").read_bytes()
        assert csv_a == csv_b
        npz_a = np.load(dirs[0] / "gen_final.ckpt")
        npz_b = np.load(dirs[1] / "gen_final.ckpt")
        assert set(npz_a.files) == set(npz_b.files)
        for key in npz_a.files:
            assert np.array_equal(npz_a[key], npz_b[key]), key

    def test_zero_epochs_still_writes_checkpoint(self, tmp_path):
        cfg = tiny_config(**{"gen_train.epochs": 0})
        ds = tiny_dataset(cfg)
        bundle, ckpt = train_generator(ds, tiny_manifest(cfg, ds),
                                       cfg, out_dir=tmp_path)
        assert ckpt is not None and (tmp_path / "gen_final.ckpt").exists()
        assert (tmp_path / "losses.csv").read_text().count("\n") == 1

    def test_checkpoint_metadata(self, tmp_path):
        cfg = tiny_config()
        ds = tiny_dataset(cfg)
        manifest = tiny_manifest(cfg, ds)
        from scimix.networks import load_checkpoint
        _, ckpt = train_generator(ds, manifest, cfg, out_dir=tmp_path)
        _, meta, _ = load_checkpoint(ckpt)
        assert meta["split_hash"] == manifest_hash(manifest)
        assert meta["protocol_hash"] == cfg.protocol_hash()
        assert meta["config_hash"] == cfg.hash()

    def test_structural_zc_trains_and_saves_router(self, tmp_path):
        cfg = tiny_config(**{"gen_train.variant": "structural_zc"})
        ds = tiny_dataset(cfg)
        bundle, ckpt = train_generator(ds, tiny_manifest(cfg, ds), cfg,
                                       out_dir=tmp_path)
        assert bundle.router is not None
        keys = np.load(ckpt).files
        assert any(k.startswith("R/") for k in keys)

    def test_nan_input_aborts_with_dump(self, tmp_path):
        cfg = tiny_config()
        ds = tiny_dataset(cfg)
        poisoned = ArrayDataset(images=ds.images.copy(), labels=ds.labels,
                                factors=ds.factors)
        poisoned.images[:] = np.nan
        with pytest.raises(NumericalError) as exc:
            train_generator(poisoned, tiny_manifest(cfg, ds), cfg,
                            out_dir=tmp_path)
        assert exc.value.batch_indices
        assert (tmp_path / "abort_dump.txt").exists()

    def test_reconstruction_improves(self, tmp_path):
        cfg = tiny_config(**{"gen_train.epochs": 10, "data.n_train": 32,
                             "gen_train.batch_size": 16})
        ds = tiny_dataset(cfg)
        train_generator(ds, tiny_manifest(cfg, ds), cfg, out_dir=tmp_path)
        lines = (tmp_path / "losses.csv").read_text().strip().splitlines()
        header = lines[0].split(",")
        rec_col = header.index("rec")
        first = float(lines[1].split(",")[rec_col])
        last = float(lines[-1].split(",")[rec_col])
        assert last < first


class TestSharedForward:
    def test_hybrid_pairing_is_derangement(self, trainer_setup):
        _, _, trainer, x, _ = trainer_setup
        shared = trainer._shared_forward(x, pairing_seed=4)
        perm = shared["perm"]
        assert sorted(perm.tolist()) == list(range(x.shape[0]))
        assert all(int(perm[i]) != i for i in range(x.shape[0]))
        assert np.array_equal(perm, pair_permutation(x.shape[0], 4))

    def test_single_image_batch_skips_hybrids(self, trainer_setup):
        _, _, trainer, x, _ = trainer_setup
        shared = trainer._shared_forward(x[:1], pairing_seed=0)
        assert shared["x_h"] is None
