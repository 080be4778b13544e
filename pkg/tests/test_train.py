import numpy as np
import pytest
import torch

from fairdisco.core import DataError
from fairdisco.data import manifest_from_rows
from fairdisco.losses import DEFAULT_SCOPES
from fairdisco.model import build_bundle
from fairdisco.synth import SynthSpec, generate
from fairdisco.train import (Method, TrainConfig, check_vocabularies, compute_losses, evaluate, lr_at,
                             scoped_step, sweep, train)


def tiny_config(**overrides):
    base = dict(backbone="tiny", dim=16, image_size=24, batch_size=16, epochs=1, lr=1e-3, seed=0)
    return TrainConfig(**{**base, **overrides})


@pytest.fixture(scope="module")
def synth():
    return generate(SynthSpec(n_samples=64, image_size=24, rho=0.0, seed=5))


def batch(manifest, images, n=16):
    x = torch.from_numpy(images[:n]).permute(0, 3, 1, 2).float() / 255.0
    return x, torch.from_numpy(manifest.conditions_array()[:n]), torch.from_numpy(manifest.skin_array()[:n])


def snapshot(bundle):
    return {n: p.detach().clone() for n, p in bundle.named_parameters()}


def changed_scopes(before, bundle):
    return {n.split(".")[0] for n, p in bundle.named_parameters() if not torch.equal(before[n], p.detach())}


class TestConfig:
    def test_lr_schedule(self):
        cfg = TrainConfig()
        assert [lr_at(cfg, e) for e in range(6)] == [1e-4, 1e-4, 1e-4 * 0.9, 1e-4 * 0.9, 1e-4 * 0.81, 1e-4 * 0.81]

    def test_from_mapping_rejects_unknown_keys(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            TrainConfig.from_mapping({"alpha": 1.0, "gamma": 2})

    def test_round_trip(self):
        cfg = TrainConfig(method="rewt", alpha=0.5)
        assert TrainConfig.from_mapping(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("bad", [{"tau": 0.0}, {"alpha": -1.0}, {"lr": 0.0}, {"method": "nope"}])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


class TestTrain:
    def test_zero_epochs_returns_initialization(self, synth):
        cfg = tiny_config(epochs=0, method="fdc")
        bundle, state = train(cfg, *synth)
        fresh = build_bundle("FDC", len(synth[0].conditions), len(synth[0].skin_types), "tiny", 16, seed=0)
        for (n, a), b in zip(bundle.named_parameters(), fresh.parameters()):
            assert torch.equal(a, b), n
        assert state.lr_history == [] and state.epoch == 0

    def test_state_records_history(self, synth):
        _, state = train(tiny_config(epochs=3, lr_step=1, lr_gamma=0.5), *synth)
        assert state.lr_history == [1e-3, 5e-4, 2.5e-4]
        assert len(state.epoch_history) == 3 and len(state.step_history) == 12
        assert all(r.l_contr > 0 for r in state.step_history)

    def test_same_seed_same_weights(self, synth):
        a, _ = train(tiny_config(method="fdc"), *synth)
        b, _ = train(tiny_config(method="fdc"), *synth)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_check_scopes_passes_for_real_training(self, synth):
        train(tiny_config(method="fdc", check_scopes=True), *synth)

    def test_empty_training_set(self, synth):
        with pytest.raises(DataError):
            train(tiny_config(), synth[0].subset([]), synth[1][:0])

    @pytest.mark.parametrize("method", list(Method))
    def test_every_method_runs(self, synth, method):
        bundle, state = train(tiny_config(method=method), *synth)
        assert np.isfinite(state.epoch_history[0].l_total)
        assert len(evaluate(bundle, *synth).sample_ids) == len(synth[0])


class TestEvaluate:
    def test_repeatable(self, synth):
        bundle = build_bundle("BASE", 3, 3, "tiny", 16)
        a, b = evaluate(bundle, *synth), evaluate(bundle, *synth)
        assert a.probs.tobytes() == b.probs.tobytes() and a.sample_ids == b.sample_ids

    def test_untrained_model_near_chance(self):
        manifest, images = generate(SynthSpec(n_samples=1500, image_size=24, rho=0.0, seed=11))
        log = evaluate(build_bundle("BASE", 3, 3, "tiny", 16, seed=3), manifest, images)
        assert abs(float((log.pred == log.true).mean()) - 1 / 3) < 0.05

    def test_vocabulary_size_mismatch(self, synth):
        with pytest.raises(DataError):
            evaluate(build_bundle("BASE", 5, 3, "tiny", 16), *synth)

    def test_vocabulary_name_mismatch(self, synth):
        with pytest.raises(DataError, match="mismatch"):
            check_vocabularies({"conditions": ["x", "y", "z"]}, synth[0])
        check_vocabularies({"conditions": list(synth[0].conditions.names)}, synth[0])


class CountingOptimizer(torch.optim.Optimizer):
    """Adds one to every parameter, ignoring gradients."""

    def __init__(self, params):
        super().__init__(params, {})

    def step(self, closure=None):
        for group in self.param_groups:
            for p in group["params"]:
                p.data.add_(1.0)


class TestScopedStep:
    def step_with(self, synth, coefficients, scopes=DEFAULT_SCOPES, optimizer=None, check=True):
        bundle = build_bundle("FDC", 3, 3, "tiny", 16, seed=1)
        opt = optimizer(bundle.parameters()) if optimizer else torch.optim.Adam(bundle.parameters(), lr=1e-2)
        before = snapshot(bundle)
        x, y, s = batch(*synth)
        losses = compute_losses(bundle, x, y, s, tiny_config())
        scoped_step(bundle, opt, losses, coefficients, scopes, check)
        return changed_scopes(before, bundle)

    def test_sensitive_loss_only_moves_adversary(self, synth):
        assert self.step_with(synth, {"l_s": 1.0}) == {"f_s"}

    def test_confusion_loss_only_moves_trunk(self, synth):
        assert self.step_with(synth, {"l_conf": 1.0}) == {"phi"}

    def test_contrastive_loss_moves_trunk_and_projection(self, synth):
        assert self.step_with(synth, {"l_contr": 1.0}) == {"phi", "H"}

    def test_full_objective(self, synth):
        coefficients = {"l_c": 1.0, "l_conf": 1.0, "l_s": 1.0, "l_contr": 1.0}
        assert self.step_with(synth, coefficients) == {"phi", "f_c", "f_s", "H"}

    def test_zero_coefficients_are_skipped(self, synth):
        assert self.step_with(synth, {"l_c": 1.0, "l_conf": 0.0, "l_s": 0.0, "l_contr": 0.0}) == {"phi", "f_c"}

    def test_check_catches_out_of_scope_update(self, synth):
        with pytest.raises(AssertionError, match="outside the active loss scopes"):
            self.step_with(synth, {"l_s": 1.0}, optimizer=CountingOptimizer)


def independent_manifest():
    rows = []
    for c in range(3):
        for t in range(1, 4):
            rows += [{"id": f"{c}{t}{k}", "image_path": "x", "condition": f"c{c}", "fitzpatrick": str(t),
                      "source": "Synth"} for k in range(4 * (c + 1))]
    return manifest_from_rows(rows)


def test_reweighting_on_independent_data_matches_baseline():
    manifest = independent_manifest()
    images = np.random.default_rng(0).integers(0, 256, (len(manifest), 24, 24, 3), dtype=np.uint8)
    base, s_base = train(tiny_config(method="base", epochs=2), manifest, images)
    rewt, s_rewt = train(tiny_config(method="rewt", epochs=2), manifest, images)
    for a, b in zip(s_base.step_history, s_rewt.step_history):
        assert abs(a.l_c - b.l_c) < 1e-6
    for pa, pb in zip(base.parameters(), rewt.parameters()):
        torch.testing.assert_close(pa, pb, atol=1e-6, rtol=0)


class TestSweep:
    def test_single_point_matches_standalone(self, synth):
        cfg = tiny_config(method="fdc")
        rows = sweep(cfg, "alpha", [0.5], synth[0], synth[0], synth[1], synth[1])
        bundle, _ = train(tiny_config(method="fdc", alpha=0.5), *synth)
        log = evaluate(bundle, *synth)
        assert rows[0]["accuracy"] == float((log.pred == log.true).mean())
        assert (rows[0]["alpha"], rows[0]["beta"]) == (0.5, 1.0)

    def test_alpha_sweep_keeps_beta(self, synth):
        rows = sweep(tiny_config(method="fdc", beta=0.3, epochs=0), "alpha", [0.0, 2.0], synth[0], synth[0],
                     synth[1], synth[1])
        assert [(r["alpha"], r["beta"]) for r in rows] == [(0.0, 0.3), (2.0, 0.3)]
        assert set(rows[0]) == {"alpha", "beta", "accuracy", "pqd", "dpm", "eom"}

    def test_bad_parameter(self, synth):
        with pytest.raises(ValueError):
            sweep(tiny_config(), "tau", [0.1], synth[0], synth[0])
