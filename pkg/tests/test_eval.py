"""Tests for evaluation metrics, reports and latent morphing."""

import numpy as np
import pytest

import flashmat.evaluate as ev
from flashmat.brdf import SvbrdfMaps, project_to_disk
from flashmat.generator import (GeneratorConfig, init_generator_weights,
                                sample_material)
from flashmat.render import make_collocated_view, render

SMALL = GeneratorConfig(latent_dim=16, num_blocks=3, mapping_depth=2)


def random_maps(rng, res=8):
    return SvbrdfMaps(
        albedo=rng.uniform(0, 1, (res, res, 3)),
        normal_xy=project_to_disk(rng.uniform(-0.5, 0.5, (res, res, 2))),
        roughness=rng.uniform(0.1, 1.0, (res, res)),
        specular=rng.uniform(0, 1, (res, res, 3)),
    )


class TestMapRmse:
    def test_zero_on_identical(self):
        maps = random_maps(np.random.default_rng(0))
        metrics = ev.map_rmse(maps, maps)
        for key in ("albedo_rmse", "normal_rmse", "roughness_rmse",
                    "specular_rmse", "maps_rmse", "normal_angle_deg"):
            assert metrics[key] == 0.0

    def test_known_albedo_offset(self):
        maps = random_maps(np.random.default_rng(1))
        shifted = maps.copy()
        shifted.albedo = np.clip(shifted.albedo + 0.1, 0, 1)
        delta = shifted.albedo - maps.albedo
        expected = float(np.sqrt(np.mean(delta ** 2)))
        np.testing.assert_allclose(ev.map_rmse(shifted, maps)["albedo_rmse"],
                                   expected, rtol=1e-12)

    def test_normal_angle_for_known_tilt(self):
        """A uniform tilt of sin(10deg) along x against flat normals
        reads back as a 10-degree mean angular error."""
        flat = SvbrdfMaps.constant(4, 4)
        tilted = SvbrdfMaps.constant(
            4, 4, normal_xy=(np.sin(np.radians(10.0)), 0.0))
        metrics = ev.map_rmse(tilted, flat)
        np.testing.assert_allclose(metrics["normal_angle_deg"], 10.0,
                                   atol=1e-9)

    def test_resolution_mismatch_raises(self):
        with pytest.raises(ValueError):
            ev.map_rmse(SvbrdfMaps.constant(4, 4), SvbrdfMaps.constant(8, 8))


class TestRenderRmse:
    def test_zero_for_consistent_views(self):
        maps = random_maps(np.random.default_rng(2))
        v = make_collocated_view(1.0, 2.0, 8)
        v.image = render(maps, v)
        assert ev.render_rmse(maps, [v]) == 0.0

    def test_positive_for_wrong_maps(self):
        rng = np.random.default_rng(3)
        maps = random_maps(rng)
        v = make_collocated_view(1.0, 2.0, 8)
        v.image = render(maps, v)
        assert ev.render_rmse(random_maps(rng), [v]) > 0.0

    def test_requires_images(self):
        maps = random_maps(np.random.default_rng(4))
        with pytest.raises(ValueError):
            ev.render_rmse(maps, [make_collocated_view(1.0, 1.0, 8)])
        with pytest.raises(ValueError):
            ev.render_rmse(maps, [])


class TestEvalFit:
    def _views(self, maps, offsets):
        out = []
        for off in offsets:
            v = make_collocated_view(1.0, 2.0, maps.height, offset_xy=off)
            v.image = render(maps, v)
            out.append(v)
        return out

    def test_disjointness_enforced(self):
        maps = random_maps(np.random.default_rng(5))
        fit = self._views(maps, [(0.0, 0.0)])
        overlap = self._views(maps, [(0.0, 0.0)])
        with pytest.raises(ValueError):
            ev.eval_fit(maps, fit, overlap)

    def test_metrics_and_gap(self):
        maps = random_maps(np.random.default_rng(6))
        fit = self._views(maps, [(0.0, 0.0)])
        novel = self._views(maps, [(0.3, 0.2)])
        report = ev.eval_fit(maps, fit, novel, reference=maps)
        assert report.metrics["render_rmse_fit"] == 0.0
        assert report.metrics["render_rmse_novel"] == 0.0
        assert report.metrics["render_rmse_gap"] == 0.0
        assert report.metrics["maps_rmse"] == 0.0

    def test_report_save_load(self, tmp_path):
        report = ev.EvalReport({"a_metric": 0.5, "b_metric": 1.25e-3})
        report.save(tmp_path / "r.txt")
        back = ev.EvalReport.load(tmp_path / "r.txt")
        assert back.metrics == pytest.approx(report.metrics)
        text = (tmp_path / "r.txt").read_text()
        assert "a_metric=0.5" in text


@pytest.fixture(scope="module")
def weights():
    return init_generator_weights(SMALL, seed=0)


class TestMorph:

    def test_endpoints_decode_parents(self, weights):
        maps_a, state_a = sample_material(weights, SMALL, seed=0)
        maps_b, state_b = sample_material(weights, SMALL, seed=1)
        frames = ev.morph(weights, SMALL, state_a, state_b, 5)
        assert len(frames) == 5
        rmse_a = np.sqrt(np.mean((frames[0].stack_channels()
                                  - maps_a.stack_channels()) ** 2))
        rmse_b = np.sqrt(np.mean((frames[-1].stack_channels()
                                  - maps_b.stack_channels()) ** 2))
        assert rmse_a < 1e-5 and rmse_b < 1e-5

    def test_intermediates_are_valid(self, weights):
        _, a = sample_material(weights, SMALL, seed=2)
        _, b = sample_material(weights, SMALL, seed=3)
        for frame in ev.morph(weights, SMALL, a, b, 5):
            frame.validate()

    def test_needs_two_frames(self, weights):
        _, a = sample_material(weights, SMALL, seed=4)
        with pytest.raises(ValueError):
            ev.morph(weights, SMALL, a, a, 1)

    def test_pixel_lerp_baseline(self):
        rng = np.random.default_rng(7)
        a, b = random_maps(rng), random_maps(rng)
        mid = ev.pixel_lerp_maps(a, b, 0.5)
        mid.validate()
        np.testing.assert_allclose(
            mid.albedo, (a.albedo + b.albedo) / 2, rtol=1e-12)
        np.testing.assert_array_equal(
            ev.pixel_lerp_maps(a, b, 0.0).stack_channels(),
            a.stack_channels())
