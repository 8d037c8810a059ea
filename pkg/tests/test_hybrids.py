import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from scimix.hybrids import (adain_mix, contact_sheet, cutmix, fda_mix,
                            load_hybrid_records, mix, mix_batch_filtered,
                            mixup, save_hybrid_records)
from scimix.networks import NetworkBundle

torch.manual_seed(0)


@pytest.fixture(scope="module")
def bundle():
    torch.manual_seed(3)
    b = NetworkBundle(width=8, gen_width=8, d_c=16, c_r=8)
    b.eval()
    return b


@pytest.fixture(scope="module")
def images():
    torch.manual_seed(4)
    return torch.rand(6, 3, 32, 32) * 2 - 1


class TestMix:
    def test_identity_pairing_is_reconstruction(self, bundle, images):
        assert torch.equal(mix(images, images, bundle),
                           bundle.reconstruct(images))

    def test_row_independence(self, bundle, images):
        full = mix(images[:4], images[2:6], bundle)
        single = mix(images[1:2], images[3:4], bundle)
        assert torch.allclose(full[1], single[0], atol=1e-6)


class TestMixBatchFiltered:
    def test_derangement_and_lineage(self, bundle, images):
        labels = torch.tensor([0, 1, 2, 3, 0, 1])
        recs = mix_batch_filtered(images, labels, bundle, pairing_seed=11)
        assert len(recs) == 6
        for i, r in enumerate(recs):
            assert r.sem_parent == i
            assert r.nonsem_parent != i
            assert r.imputed_label == int(labels[i])

    def test_accepted_flag_matches_reclassification(self, bundle, images):
        labels = torch.tensor([0, 1, 2, 3, 0, 1])
        recs = mix_batch_filtered(images, labels, bundle, pairing_seed=7)
        x_h = torch.stack([r.image for r in recs])
        pred = bundle.head(bundle.e_c(x_h)).argmax(dim=1)
        for i, r in enumerate(recs):
            assert r.accepted == (int(pred[i]) == r.imputed_label)

    def test_seed_determinism(self, bundle, images):
        labels = torch.zeros(6, dtype=torch.long)
        a = mix_batch_filtered(images, labels, bundle, pairing_seed=5)
        b = mix_batch_filtered(images, labels, bundle, pairing_seed=5)
        for ra, rb in zip(a, b):
            assert ra.nonsem_parent == rb.nonsem_parent
            assert torch.equal(ra.image, rb.image)

    def test_explicit_indices_recorded(self, bundle, images):
        labels = torch.zeros(6, dtype=torch.long)
        idx = np.array([10, 20, 30, 40, 50, 60])
        recs = mix_batch_filtered(images, labels, bundle, pairing_seed=5,
                                  indices=idx)
        assert {r.sem_parent for r in recs} == set(idx.tolist())
        assert all(r.nonsem_parent in idx for r in recs)


class TestMixup:
    def test_endpoints(self):
        x1, x2 = torch.rand(3, 4, 4), torch.rand(3, 4, 4)
        y1, y2 = torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])
        img, soft = mixup(x1, x2, y1, y2, lam=1.0)
        assert torch.equal(img, x1) and torch.equal(soft, y1)
        img, soft = mixup(x1, x2, y1, y2, lam=0.0)
        assert torch.equal(img, x2) and torch.equal(soft, y2)

    def test_hand_blend(self):
        img, soft = mixup(torch.ones(1, 2, 2), torch.zeros(1, 2, 2),
                          torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0]),
                          lam=0.75)
        assert torch.allclose(img, torch.full((1, 2, 2), 0.75))
        assert torch.allclose(soft, torch.tensor([0.75, 0.25]))

    @pytest.mark.parametrize("lam", [-0.1, 1.1])
    def test_lambda_validation(self, lam):
        x = torch.zeros(1, 2, 2)
        with pytest.raises(ValueError):
            mixup(x, x, torch.zeros(2), torch.zeros(2), lam)

    @given(st.floats(0.0, 1.0), st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_convexity_bounds(self, lam, seed):
        g = torch.Generator().manual_seed(seed)
        x1 = torch.rand(2, 3, 3, generator=g)
        x2 = torch.rand(2, 3, 3, generator=g)
        img, _ = mixup(x1, x2, torch.zeros(2), torch.zeros(2), lam)
        lo, hi = torch.minimum(x1, x2), torch.maximum(x1, x2)
        assert (img >= lo - 1e-6).all() and (img <= hi + 1e-6).all()


class TestCutmix:
    def test_lam_one_is_identity(self):
        x1, x2 = torch.rand(3, 8, 8), torch.rand(3, 8, 8)
        y1 = torch.tensor([1.0, 0.0])
        img, soft = cutmix(x1, x2, y1, torch.tensor([0.0, 1.0]), lam=1.0,
                           seed=0)
        assert torch.equal(img, x1) and torch.allclose(soft, y1)

    def test_pixel_count_matches_soft_label(self):
        x1 = torch.zeros(1, 16, 16)
        x2 = torch.ones(1, 16, 16)
        y1, y2 = torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])
        for seed in range(8):
            img, soft = cutmix(x1, x2, y1, y2, lam=0.6, seed=seed)
            pasted = float((img == 1.0).float().mean())
            assert abs(float(soft[1]) - pasted) < 1e-6

    def test_untouched_pixels_come_from_x1(self):
        x1 = torch.full((1, 12, 12), -0.5)
        x2 = torch.full((1, 12, 12), 0.5)
        img, _ = cutmix(x1, x2, torch.zeros(2), torch.zeros(2), lam=0.7,
                        seed=3)
        assert set(img.unique().tolist()) <= {-0.5, 0.5}

    def test_seed_determinism(self):
        x1, x2 = torch.rand(3, 8, 8), torch.rand(3, 8, 8)
        a, sa = cutmix(x1, x2, torch.zeros(2), torch.ones(2), 0.5, seed=9)
        b, sb = cutmix(x1, x2, torch.zeros(2), torch.ones(2), 0.5, seed=9)
        assert torch.equal(a, b) and torch.equal(sa, sb)

    def test_lambda_validation(self):
        x = torch.zeros(1, 4, 4)
        with pytest.raises(ValueError):
            cutmix(x, x, torch.zeros(2), torch.zeros(2), 1.5, seed=0)


class TestFdaMix:
    def test_self_mix_is_identity(self):
        x = torch.rand(2, 3, 16, 16) * 2 - 1
        out = fda_mix(x, x, beta=0.1)
        assert torch.allclose(out, x, atol=1e-6)

    def test_band_amplitudes_come_from_nonsem_parent(self):
        torch.manual_seed(5)
        x_sem = torch.rand(1, 1, 16, 16) * 0.8 - 0.4
        x_non = torch.rand(1, 1, 16, 16) * 0.8 - 0.4
        beta = 0.25
        out = fda_mix(x_sem, x_non, beta)
        half = max(1, round(beta * 16)) // 2
        c = 8
        lo = c - half
        hi = c + half + 1

        def shifted_amp(t):
            f = np.fft.fft2(t.numpy().astype(np.float64), axes=(-2, -1))
            return np.abs(np.fft.fftshift(f, axes=(-2, -1)))

        amp_out = shifted_amp(out)
        amp_non = shifted_amp(x_non)
        amp_sem = shifted_amp(x_sem)
        assert np.allclose(amp_out[..., lo:hi, lo:hi],
                           amp_non[..., lo:hi, lo:hi], atol=1e-6)
        outside = amp_out.copy()
        outside[..., lo:hi, lo:hi] = amp_sem[..., lo:hi, lo:hi]
        assert np.allclose(outside, amp_sem, atol=1e-6)

    def test_output_real_and_clamped(self):
        x_sem = torch.rand(2, 3, 16, 16) * 2 - 1
        x_non = torch.rand(2, 3, 16, 16) * 2 - 1
        out = fda_mix(x_sem, x_non, beta=0.5)
        assert out.dtype == x_sem.dtype
        assert out.min() >= -1.0 and out.max() <= 1.0

    @pytest.mark.parametrize("beta", [0.0, 0.6, -0.1])
    def test_beta_validation(self, beta):
        x = torch.zeros(1, 1, 8, 8)
        with pytest.raises(ValueError):
            fda_mix(x, x, beta)


class TestAdainMix:
    def test_transfers_channel_statistics(self):
        torch.manual_seed(6)
        x_sem = torch.randn(2, 3, 16, 16) * 0.1
        x_non = torch.randn(2, 3, 16, 16) * 0.15 + 0.1
        out = adain_mix(x_sem, x_non)
        dims = (-2, -1)
        assert torch.allclose(out.mean(dim=dims), x_non.mean(dim=dims),
                              atol=1e-5)
        assert torch.allclose(out.std(dim=dims, unbiased=False),
                              x_non.std(dim=dims, unbiased=False), atol=1e-5)

    def test_self_mix_is_identity(self):
        x = torch.rand(1, 3, 8, 8) * 1.6 - 0.8
        assert torch.allclose(adain_mix(x, x), x, atol=1e-5)

    def test_zero_variance_passthrough_warns(self):
        x_sem = torch.full((1, 1, 4, 4), 0.3)
        x_non = torch.rand(1, 1, 4, 4)
        with pytest.warns(UserWarning):
            out = adain_mix(x_sem, x_non)
        assert torch.equal(out, x_sem)

    def test_output_clamped(self):
        x_sem = torch.randn(1, 3, 8, 8)
        x_non = torch.randn(1, 3, 8, 8) * 3
        out = adain_mix(x_sem, x_non)
        assert out.min() >= -1.0 and out.max() <= 1.0


class TestPersistence:
    def test_roundtrip(self, tmp_path, bundle, images):
        labels = torch.tensor([0, 1, 2, 3, 0, 1])
        recs = mix_batch_filtered(images, labels, bundle, pairing_seed=2)
        save_hybrid_records(recs, tmp_path)
        loaded = load_hybrid_records(tmp_path)
        assert len(loaded) == len(recs)
        for a, b in zip(recs, loaded):
            assert torch.allclose(a.image, b.image)
            assert (a.sem_parent, a.nonsem_parent, a.imputed_label,
                    a.accepted) == (b.sem_parent, b.nonsem_parent,
                                    b.imputed_label, b.accepted)

    def test_contact_sheet(self, tmp_path, images):
        path = tmp_path / "sheet.png"
        triplets = [(images[0], images[1], images[2]),
                    (images[3], images[4], images[5])]
        contact_sheet(triplets, path)
        from PIL import Image
        with Image.open(path) as im:
            assert im.size == (3 * 34 + 2, 2 * 34 + 2)

    def test_contact_sheet_empty(self, tmp_path):
        with pytest.raises(ValueError):
            contact_sheet([], tmp_path / "x.png")
