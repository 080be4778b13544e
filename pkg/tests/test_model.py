import numpy as np
import pytest
import torch

from fairdisco.model import (ModelBundle, TinyBackbone, Variant, build_bundle, forward_atrb, forward_base,
                             forward_fairdisco, load_checkpoint, predict_proba, save_checkpoint)


def conv2d_valid(x, w, b):
    """Direct loop convolution (cross-correlation, no padding) on a C×H×W array."""
    out_c, _, k, _ = w.shape
    h, wd = x.shape[1] - k + 1, x.shape[2] - k + 1
    out = np.zeros((out_c, h, wd))
    for o in range(out_c):
        for i in range(h):
            for j in range(wd):
                out[o, i, j] = np.sum(x[:, i:i + k, j:j + k] * w[o]) + b[o]
    return out


def max_pool2(x):
    c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    return x[:, :2 * h2, :2 * w2].reshape(c, h2, 2, w2, 2).max(axis=(2, 4))


def tiny_forward_numpy(net, image):
    p = {k: v.detach().double().numpy() for k, v in net.state_dict().items()}
    x = max_pool2(np.maximum(conv2d_valid(image, p["conv1.weight"], p["conv1.bias"]), 0))
    x = max_pool2(np.maximum(conv2d_valid(x, p["conv2.weight"], p["conv2.bias"]), 0))
    x = np.maximum(conv2d_valid(x, p["conv3.weight"], p["conv3.bias"]), 0)
    return x.mean(axis=(1, 2))


@pytest.fixture
def images():
    return torch.randn(5, 3, 32, 32, generator=torch.Generator().manual_seed(0))


class TestTinyBackbone:
    def test_matches_hand_unrolled_forward(self):
        torch.manual_seed(3)
        net = TinyBackbone(8).double()
        image = np.random.default_rng(0).normal(size=(3, 24, 24))
        expected = tiny_forward_numpy(net, image)
        got = net(torch.from_numpy(image)[None]).detach().numpy()[0]
        np.testing.assert_allclose(got, expected, rtol=1e-10, atol=1e-12)

    def test_output_dim(self, images):
        assert TinyBackbone(20)(images).shape == (5, 20)


class TestForward:
    def test_base_rows_are_distributions(self, images):
        probs = forward_base(build_bundle("BASE", 3, 6), images)
        assert probs.shape == (5, 3)
        torch.testing.assert_close(probs.sum(1), torch.ones(5))
        assert (probs >= 0).all()

    def test_deterministic_in_eval_mode(self, images):
        bundle = build_bundle("BASE", 3, 6).eval()
        assert torch.equal(forward_base(bundle, images), forward_base(bundle, images))

    def test_same_seed_same_weights(self):
        a, b = build_bundle("FDC", 3, 6, seed=4), build_bundle("FDC", 3, 6, seed=4)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_variants_share_initial_trunk_and_class_head(self):
        base = build_bundle("BASE", 3, 6, seed=2)
        for variant in ("ATRB", "FDC_NO_CL", "FDC"):
            other = build_bundle(variant, 3, 6, seed=2)
            for name in ("phi", "f_c"):
                for pa, pb in zip(base.scope(name), other.scope(name)):
                    assert torch.equal(pa, pb)

    def test_fairdisco_shapes(self, images):
        c, s, r = forward_fairdisco(build_bundle("FDC", 3, 6), images)
        assert (c.shape, s.shape, r.shape) == ((5, 3), (5, 6), (5, 128))
        torch.testing.assert_close(s.sum(1), torch.ones(5))

    def test_no_contrastive_variant_has_no_projection(self, images):
        c, s, r = forward_fairdisco(build_bundle("FDC_NO_CL", 3, 6), images)
        assert r is None and s.shape == (5, 6)

    def test_zero_representation_gives_softmax_of_biases(self):
        bundle = build_bundle("FDC", 4, 3)
        z = torch.zeros(2, bundle.dim)
        torch.testing.assert_close(torch.softmax(bundle.f_c(z), 1)[0], torch.softmax(bundle.f_c.bias, 0))
        torch.testing.assert_close(torch.softmax(bundle.f_s(z), 1)[0], torch.softmax(bundle.f_s.bias, 0))

    def test_branches_are_independent(self, images):
        bundle = build_bundle("FDC", 3, 6).eval()
        c0, _, r0 = forward_fairdisco(bundle, images)
        with torch.no_grad():
            bundle.f_s.weight.add_(1.0)
        c1, s1, r1 = forward_fairdisco(bundle, images)
        assert torch.equal(c0, c1) and torch.equal(r0, r1)

    def test_wrong_variant_rejected(self, images):
        with pytest.raises(ValueError):
            forward_fairdisco(build_bundle("BASE", 3, 6), images)
        with pytest.raises(ValueError):
            forward_base(build_bundle("ATRB", 3, 6), images)


class TestAttributeAware:
    def test_zero_embedding_equals_base(self, images):
        base = build_bundle("BASE", 3, 6, seed=1).eval()
        atrb = build_bundle("ATRB", 3, 6, seed=1).eval()
        with torch.no_grad():
            atrb.psi.weight.zero_()
        skin = torch.tensor([0, 1, 2, 3, 4])
        torch.testing.assert_close(forward_atrb(atrb, images, skin), forward_base(base, images))

    def test_skin_type_changes_output(self, images):
        atrb = build_bundle("ATRB", 3, 6).eval()
        same = images[:1].repeat(2, 1, 1, 1)
        probs = forward_atrb(atrb, same, torch.tensor([0, 5]))
        assert not torch.allclose(probs[0], probs[1])

    def test_unknown_skin_type_rejected(self, images):
        atrb = build_bundle("ATRB", 3, 6)
        with pytest.raises(ValueError):
            predict_proba(atrb, images[:1], torch.tensor([-1]))
        with pytest.raises(ValueError):
            predict_proba(atrb, images[:1])


class TestParameterCount:
    @pytest.mark.parametrize("variant,heads", [
        ("BASE", 64 * 3 + 3),
        ("ATRB", 64 * 3 + 3 + 6 * 64),
        ("FDC_NO_CL", 64 * 3 + 3 + 64 * 6 + 6),
        ("FDC", 64 * 3 + 3 + 64 * 6 + 6 + 64 * 512 + 512 + 512 * 128 + 128),
    ])
    def test_counts(self, variant, heads):
        bundle = build_bundle(variant, 3, 6)
        trunk = (3 * 16 * 9 + 16) + (16 * 32 * 9 + 32) + (32 * 64 * 9 + 64)
        total = sum(p.numel() for p in bundle.parameters())
        assert total == trunk + heads == bundle.declared_parameter_count()

    def test_resnet18_trunk(self):
        bundle = ModelBundle(Variant.BASE, 2, 3, backbone="resnet18")
        assert bundle.dim == 512
        assert sum(p.numel() for p in bundle.phi.parameters()) == 11_176_512


class TestCheckpoint:
    def test_round_trip(self, tmp_path, images):
        bundle = build_bundle("FDC", 3, 6, seed=9).eval()
        save_checkpoint(bundle, tmp_path / "m.zip", {"conditions": ["a", "b", "c"]})
        loaded, meta = load_checkpoint(tmp_path / "m.zip")
        assert meta["variant"] == "FDC" and meta["conditions"] == ["a", "b", "c"]
        assert (meta["D"], meta["M"], meta["N"]) == (64, 3, 6)
        for a, b in zip(forward_fairdisco(bundle, images), forward_fairdisco(loaded, images)):
            assert torch.equal(a, b)

    def test_identical_bytes(self, tmp_path):
        bundle = build_bundle("ATRB", 2, 3, seed=1)
        save_checkpoint(bundle, tmp_path / "a.zip", {})
        save_checkpoint(bundle, tmp_path / "b.zip", {})
        assert (tmp_path / "a.zip").read_bytes() == (tmp_path / "b.zip").read_bytes()
