import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from fairdisco.data import load_manifest
from fairdisco.synth import SynthSpec, generate, linear_probe, mutual_information, sample_pair, write_synth


def draw_pairs(n, rho, n_classes=3, n_types=3, seed=0):
    rng = np.random.default_rng(seed)
    pairs = np.array([sample_pair(rng, n_classes, n_types, rho) for _ in range(n)])
    return pairs[:, 0], pairs[:, 1]


class TestCoupling:
    def test_independent_at_zero(self):
        y, s = draw_pairs(10_000, 0.0)
        assert mutual_information(y, s) < 0.01

    def test_diagonal_at_one(self):
        y, s = draw_pairs(2_000, 1.0)
        assert np.array_equal(y, s)

    def test_strength_increases_dependence(self):
        mi = [mutual_information(*draw_pairs(5_000, rho)) for rho in (0.0, 0.4, 0.8)]
        assert mi[0] < mi[1] < mi[2]

    @pytest.mark.parametrize("rho", [0.0, 0.5, 0.8, 1.0])
    def test_uniform_marginals(self, rho):
        y, s = draw_pairs(30_000, rho, n_classes=3, n_types=4)
        np.testing.assert_allclose(np.bincount(y) / len(y), 1 / 3, atol=0.015)
        np.testing.assert_allclose(np.bincount(s) / len(s), 1 / 4, atol=0.015)

    def test_invalid_rho(self):
        with pytest.raises(ValueError):
            SynthSpec(rho=1.5)


class TestGenerate:
    def test_same_seed_same_bytes(self):
        spec = SynthSpec(n_samples=40, seed=3)
        (m1, a), (m2, b) = generate(spec), generate(spec)
        assert a.tobytes() == b.tobytes() and m1.ids() == m2.ids()
        assert generate(SynthSpec(n_samples=40, seed=4))[1].tobytes() != a.tobytes()

    def test_prefix_stable(self):
        _, small = generate(SynthSpec(n_samples=10))
        _, large = generate(SynthSpec(n_samples=20))
        assert small.tobytes() == large[:10].tobytes()

    def test_manifest_shape(self):
        m, images = generate(SynthSpec(n_samples=30, n_classes=4, n_types=5, image_size=16))
        assert images.shape == (30, 16, 16, 3) and images.dtype == np.uint8
        assert len(m.conditions) <= 4 and len(m.skin_types) <= 5
        assert all(s.source_domain == "Synth" for s in m.samples)

    def test_background_tone_tracks_type(self):
        m, images = generate(SynthSpec(n_samples=300, noise=0.0, rho=0.0))
        corner = images[:, 0, 0].astype(float).mean(axis=1)
        by_type = [corner[m.skin_array() == t].mean() for t in range(len(m.skin_types))]
        assert by_type == sorted(by_type, reverse=True)

    def test_written_dataset_loads(self, tmp_path):
        path = write_synth(SynthSpec(n_samples=12, image_size=16), tmp_path)
        m = load_manifest(path, check_images=True)
        assert len(m) == 12
        again = write_synth(SynthSpec(n_samples=12, image_size=16), tmp_path / "b")
        assert path.read_bytes() == again.read_bytes()


class TestProbe:
    def test_one_hot_is_perfect(self):
        s = np.random.default_rng(0).integers(0, 3, 600)
        assert linear_probe(np.eye(3)[s], s).probe_accuracy == pytest.approx(1.0)

    def test_noise_is_chance(self):
        rng = np.random.default_rng(1)
        accs = [linear_probe(rng.normal(size=(3000, 16)), rng.integers(0, 3, 3000), seed=k).probe_accuracy
                for k in range(3)]
        assert abs(np.mean(accs) - 1 / 3) < 0.03

    def test_chance_level(self):
        s = np.arange(90) % 3
        assert linear_probe(np.eye(3)[s], s).chance == pytest.approx(1 / 3)

    def test_single_label_rejected(self):
        with pytest.raises(ValueError):
            linear_probe(np.ones((10, 2)), np.zeros(10, dtype=int))

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        z, s = rng.normal(size=(500, 8)), rng.integers(0, 3, 500)
        assert linear_probe(z, s) == linear_probe(z, s)

    @given(st.integers(0, 2 ** 16))
    @settings(max_examples=10, deadline=None)
    def test_rotation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        s = rng.integers(0, 3, 900)
        z = rng.normal(size=(900, 12)) + 0.8 * np.eye(3, 12)[s] + 2.0
        rotation = ortho_group.rvs(12, random_state=seed)
        a = linear_probe(z, s).probe_accuracy
        b = linear_probe(z @ rotation, s).probe_accuracy
        assert abs(a - b) < 0.02
