"""Tests for the inverse-rendering engine: comparison space, losses,
the render bridge's gradients, scheduling phases, and the fitting
loops on small problems."""

import numpy as np
import pytest

import flashmat.autodiff as ad
import flashmat.inversion as inv
from flashmat.autodiff import Tensor
from flashmat.brdf import SvbrdfMaps, project_to_disk
from flashmat.generator import (GeneratorConfig, init_generator_weights,
                                sample_material, tensor_from_maps)
from flashmat.render import make_collocated_view, render

F64 = np.float64
SMALL = GeneratorConfig(latent_dim=16, num_blocks=3, mapping_depth=2)


def random_maps(rng, res=16):
    return SvbrdfMaps(
        albedo=rng.uniform(0.1, 0.9, (res, res, 3)),
        normal_xy=project_to_disk(rng.uniform(-0.4, 0.4, (res, res, 2))),
        roughness=rng.uniform(0.2, 0.9, (res, res)),
        specular=rng.uniform(0.02, 0.3, (res, res, 3)),
    )


def make_views(maps, count=3, distance=1.0, intensity=3.0):
    offsets = [(0.0, 0.0), (0.25, 0.1), (-0.2, -0.25)][:count]
    views = []
    for off in offsets:
        v = make_collocated_view(distance, intensity, maps.height,
                                 offset_xy=off)
        v.image = render(maps, v)
        views.append(v)
    return views


class TestComparisonSpace:
    def test_linear_is_identity(self):
        x = Tensor(np.random.default_rng(0).uniform(0, 1, (1, 3, 4, 4)),
                   dtype=F64)
        np.testing.assert_array_equal(
            inv.to_comparison_space(x, "linear").data, x.data)

    def test_gamma_matches_numpy(self):
        arr = np.random.default_rng(1).uniform(0, 2, (1, 3, 4, 4))
        out = inv.to_comparison_space(Tensor(arr, dtype=F64), "gamma")
        expected = np.clip(arr, 1e-4, 1.0) ** (1.0 / inv.GAMMA)
        np.testing.assert_allclose(out.data, expected, rtol=1e-12)

    def test_loss_config_validation(self):
        with pytest.raises(ValueError):
            inv.LossConfig(comparison_space="srgbish")
        with pytest.raises(ValueError):
            inv.LossConfig(w_plus_layer_weights=(1, 2, 3))


class TestRenderBridge:
    def test_forward_matches_renderer(self):
        rng = np.random.default_rng(2)
        maps = random_maps(rng, res=8)
        view = make_collocated_view(1.0, 2.0, 8)
        out = inv.render_tensor(Tensor(tensor_from_maps(maps, F64),
                                       dtype=F64), view)
        np.testing.assert_allclose(
            np.transpose(out.data[0], (1, 2, 0)), render(maps, view),
            rtol=1e-10)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(3)
        maps = random_maps(rng, res=8)
        view = make_collocated_view(1.2, 2.5, 8, offset_xy=(0.1, 0.2))
        probe = np.random.default_rng(4).standard_normal((1, 3, 8, 8))
        base = tensor_from_maps(maps, F64)

        def value(arr):
            out = inv.render_tensor(Tensor(arr, dtype=F64), view)
            return float(np.sum(out.data * probe))

        maps9 = Tensor(base.copy(), requires_grad=True, dtype=F64)
        loss = ad.sum_all(ad.mul(inv.render_tensor(maps9, view),
                                 Tensor(probe, dtype=F64)))
        loss.backward()

        eps = 1e-6
        for _ in range(8):
            idx = (0, rng.integers(0, 9), rng.integers(0, 8),
                   rng.integers(0, 8))
            p, m = base.copy(), base.copy()
            p[idx] += eps
            m[idx] -= eps
            fd = (value(p) - value(m)) / (2 * eps)
            np.testing.assert_allclose(maps9.grad[idx], fd, rtol=1e-4,
                                       atol=1e-8)


class TestLosses:
    def test_pixel_loss_zero_on_identical(self):
        x = Tensor(np.random.default_rng(5).uniform(0, 1, (1, 3, 4, 4)),
                   dtype=F64)
        assert inv.pixel_loss(x, Tensor(x.data.copy(), dtype=F64)).item() == 0

    def test_pixel_loss_matches_numpy(self):
        rng = np.random.default_rng(6)
        a, b = rng.uniform(0, 1, (2, 1, 3, 4, 4))
        got = inv.pixel_loss(Tensor(a, dtype=F64), Tensor(b, dtype=F64)).item()
        np.testing.assert_allclose(got, np.mean((a - b) ** 2), rtol=1e-12)

    def test_perceptual_loss_zero_on_identical_and_positive_otherwise(self):
        ex = inv.FeatureExtractor(seed=0, dtype=F64)
        rng = np.random.default_rng(7)
        img = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)), dtype=F64)
        feats = ex.extract(img)
        weights = (1.0, 1.0, 1.0, 1.0)
        same = inv.perceptual_loss(feats, [f.detach() for f in feats], weights)
        assert same.item() == 0.0
        other = ex.extract(Tensor(rng.uniform(0, 1, (1, 3, 16, 16)),
                                  dtype=F64))
        assert inv.perceptual_loss(other, [f.detach() for f in feats],
                                   weights).item() > 0

    def test_feature_extractor_tap_strides(self):
        ex = inv.FeatureExtractor(seed=0, dtype=F64)
        taps = ex.extract(Tensor(np.zeros((1, 3, 32, 32)), dtype=F64))
        assert [t.shape[2] for t in taps] == [32, 32, 8, 4]

    def test_feature_extractor_save_load(self, tmp_path):
        ex = inv.FeatureExtractor(seed=3, dtype=F64)
        ex.save(tmp_path / "feat.fmt")
        ex2 = inv.FeatureExtractor.from_file(tmp_path / "feat.fmt", dtype=F64)
        img = Tensor(np.random.default_rng(8).uniform(0, 1, (1, 3, 16, 16)),
                     dtype=F64)
        for a, b in zip(ex.extract(img), ex2.extract(img)):
            np.testing.assert_array_equal(a.data, b.data)

    def test_objective_requires_images(self):
        view = make_collocated_view(1.0, 1.0, 8)  # no image attached
        with pytest.raises(ValueError):
            inv.Objective([view], inv.LossConfig())


class TestScheduling:
    def test_s1_splits_halfway(self):
        cfg = inv.FitConfig(strategy="s1", iterations=10)
        phases = [inv._phase_for(i, cfg) for i in range(10)]
        assert phases == ["w"] * 5 + ["n"] * 5

    def test_s2_is_joint(self):
        cfg = inv.FitConfig(strategy="s2", iterations=4)
        assert all(inv._phase_for(i, cfg) == "wn" for i in range(4))

    def test_s3_alternates_with_period(self):
        cfg = inv.FitConfig(strategy="s3", iterations=40, period=10)
        phases = [inv._phase_for(i, cfg) for i in range(40)]
        assert phases[:10] == ["w"] * 10
        assert phases[10:20] == ["n"] * 10
        assert phases[20:30] == ["w"] * 10

    def test_w_space_never_touches_noise(self):
        cfg = inv.FitConfig(strategy="s3", iterations=30, latent_space="w")
        assert all(inv._phase_for(i, cfg) == "w" for i in range(30))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            inv.FitConfig(strategy="s9")
        with pytest.raises(ValueError):
            inv.FitConfig(iterations=0)


class TestLatentStateIO:
    def test_round_trip(self, tmp_path):
        weights = init_generator_weights(SMALL, seed=0, dtype=F64)
        _, state = sample_material(weights, SMALL, seed=0)
        inv.save_latent_state(tmp_path / "s.fmt", state)
        back = inv.load_latent_state(tmp_path / "s.fmt")
        np.testing.assert_allclose(back.w_plus, state.w_plus, rtol=1e-12)
        assert len(back.noise) == len(state.noise)
        for a, b in zip(back.noise, state.noise):
            np.testing.assert_allclose(a, b, rtol=1e-12)
        back.validate(SMALL)


class TestFitting:
    def test_fit_direct_reduces_loss(self):
        rng = np.random.default_rng(9)
        target = random_maps(rng, res=8)
        views = make_views(target, count=2)
        cfg = inv.FitConfig(iterations=60)
        loss_cfg = inv.LossConfig(lambda_percept=0.0)
        result = inv.fit_direct(views, SvbrdfMaps.constant(8, 8), cfg,
                                loss_cfg)
        first = result.trace[0][1]
        assert result.final_loss < first / 5
        result.maps.validate()

    def test_fit_latent_reduces_loss_and_traces(self, tmp_path):
        weights = init_generator_weights(SMALL, seed=0)
        target, _ = sample_material(weights, SMALL, seed=1)
        views = make_views(target, count=2)
        cfg = inv.FitConfig(strategy="s3", iterations=40, init="mean_w",
                            period=5)
        result = inv.fit_latent(views, weights, SMALL, cfg)
        assert result.final_loss < result.trace[0][1]
        assert result.latents is not None
        result.latents.validate(SMALL)
        best = result.best_so_far()
        assert np.all(np.diff(best) <= 0)
        result.write_trace(tmp_path / "trace.csv")
        lines = (tmp_path / "trace.csv").read_text().splitlines()
        assert lines[0] == "iter,total,pixel,percept"
        assert len(lines) == len(result.trace) + 1

    def test_run_manifest_contents(self, tmp_path):
        import json
        weights = init_generator_weights(SMALL, seed=0)
        target, _ = sample_material(weights, SMALL, seed=2)
        views = make_views(target, count=1)
        fit_cfg = inv.FitConfig(iterations=5, init="mean_w")
        loss_cfg = inv.LossConfig()
        result = inv.fit_latent(views, weights, SMALL, fit_cfg, loss_cfg)
        inv.write_run_manifest(tmp_path / "run.json", fit_cfg, loss_cfg,
                               result)
        payload = json.loads((tmp_path / "run.json").read_text())
        assert payload["fit"]["strategy"] == "s3"
        assert payload["fit"]["seed"] == 0
        assert payload["loss"]["comparison_space"] == "gamma"
        assert np.isfinite(payload["final_loss"])

    def test_missing_low_rough_preset_raises(self, tmp_path):
        weights = init_generator_weights(SMALL, seed=0)
        with pytest.raises(FileNotFoundError):
            inv.resolve_init("low_rough", weights, SMALL,
                             init_path=tmp_path / "missing.fmt")

    def test_embed_maps_recovers_generated_target(self):
        """Embedding a target the generator itself produced gets close
        in map space."""
        weights = init_generator_weights(SMALL, seed=0)
        target, _ = sample_material(weights, SMALL, seed=3)
        cfg = inv.FitConfig(iterations=60, learning_rate=0.02)
        result = inv.embed_maps(target, weights, SMALL, cfg,
                                percept_weight=0.0)
        rmse = np.sqrt(np.mean((result.maps.stack_channels()
                                - target.stack_channels()) ** 2))
        assert rmse < 0.15
        assert result.final_loss < result.trace[0][1]
