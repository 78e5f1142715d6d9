"""Unit tests for the material data model and scalar shading math."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flashmat.brdf import (R_MIN, ShadingPoint, SvbrdfMaps, brdf_eval,
                           decode_normal, fresnel_schlick, ggx_ndf,
                           project_to_disk, smith_g)


def random_maps(rng, res=8):
    return SvbrdfMaps(
        albedo=rng.uniform(0, 1, (res, res, 3)),
        normal_xy=project_to_disk(rng.uniform(-0.8, 0.8, (res, res, 2))),
        roughness=rng.uniform(R_MIN, 1.0, (res, res)),
        specular=rng.uniform(0, 1, (res, res, 3)),
    )


def random_direction(rng, upper=True):
    v = rng.standard_normal(3)
    v /= np.linalg.norm(v)
    if upper and v[2] < 0:
        v[2] = -v[2]
    return v


class TestSvbrdfMaps:
    def test_validate_accepts_random_valid_maps(self):
        random_maps(np.random.default_rng(0)).validate()

    def test_validate_rejects_bad_shapes(self):
        maps = random_maps(np.random.default_rng(1))
        maps.roughness = maps.roughness[:4]
        with pytest.raises(ValueError):
            maps.validate()

    def test_validate_rejects_out_of_range_albedo(self):
        maps = random_maps(np.random.default_rng(2))
        maps.albedo[0, 0, 0] = 1.5
        with pytest.raises(ValueError):
            maps.validate()

    def test_validate_rejects_normal_outside_disk(self):
        maps = random_maps(np.random.default_rng(3))
        maps.normal_xy[0, 0] = (0.9, 0.9)
        with pytest.raises(ValueError):
            maps.validate()

    def test_validate_rejects_nonfinite(self):
        maps = random_maps(np.random.default_rng(4))
        maps.specular[1, 1, 2] = np.nan
        with pytest.raises(ValueError):
            maps.validate()

    def test_stack_channels_round_trip(self):
        maps = random_maps(np.random.default_rng(5))
        back = SvbrdfMaps.from_channels(maps.stack_channels())
        np.testing.assert_array_equal(back.albedo, maps.albedo)
        np.testing.assert_array_equal(back.normal_xy, maps.normal_xy)
        np.testing.assert_array_equal(back.roughness, maps.roughness)
        np.testing.assert_array_equal(back.specular, maps.specular)

    def test_constant_is_valid(self):
        SvbrdfMaps.constant(4, 4).validate()

    def test_copy_is_deep(self):
        maps = random_maps(np.random.default_rng(6))
        dup = maps.copy()
        dup.albedo[...] = 0.0
        assert maps.albedo.max() > 0


class TestNormalEncoding:
    @given(st.floats(-3, 3), st.floats(-3, 3))
    @settings(max_examples=50, deadline=None)
    def test_project_to_disk_lands_in_disk(self, x, y):
        out = project_to_disk(np.array([x, y]))
        assert np.sum(out ** 2) <= 1.0 + 1e-12

    def test_project_to_disk_identity_inside(self):
        v = np.array([0.3, -0.4])
        np.testing.assert_array_equal(project_to_disk(v), v)

    def test_project_to_disk_preserves_direction(self):
        v = np.array([3.0, 4.0])
        out = project_to_disk(v)
        np.testing.assert_allclose(out, [0.6, 0.8], atol=1e-12)

    @given(st.floats(-0.9, 0.9), st.floats(-0.9, 0.9))
    @settings(max_examples=50, deadline=None)
    def test_decode_normal_unit_length(self, x, y):
        n = decode_normal(np.array([x, y]))
        np.testing.assert_allclose(np.linalg.norm(n), 1.0, atol=1e-9)
        assert n[2] >= 0.0

    def test_decode_flat_normal(self):
        np.testing.assert_allclose(decode_normal(np.zeros(2)), [0, 0, 1])


class TestMicrofacetTerms:
    def test_ggx_peak_value(self):
        # At n.h = 1 the distribution equals 1 / (pi alpha^2).
        for alpha in (0.1, 0.5, 1.0):
            np.testing.assert_allclose(ggx_ndf(1.0, alpha),
                                       1.0 / (np.pi * alpha * alpha),
                                       rtol=1e-12)

    def test_ggx_rough_limit_is_uniform(self):
        # alpha = 1 gives the constant distribution 1/pi.
        for nh in (0.1, 0.5, 0.9):
            np.testing.assert_allclose(ggx_ndf(nh, 1.0), 1.0 / np.pi,
                                       rtol=1e-12)

    def test_smith_g_bounds(self):
        rng = np.random.default_rng(0)
        c = rng.uniform(0.01, 1.0, 100)
        alpha = rng.uniform(0.01, 1.0, 100)
        g = smith_g(c, c, alpha)
        assert np.all(g > 0) and np.all(g <= 1.0 + 1e-12)

    def test_smith_g_smooth_limit(self):
        # alpha -> 0: no shadowing, G = 1.
        np.testing.assert_allclose(smith_g(0.7, 0.3, 1e-9), 1.0, atol=1e-6)

    def test_fresnel_endpoints(self):
        f0 = np.array([0.04, 0.5, 1.0])
        np.testing.assert_allclose(fresnel_schlick(1.0, f0), f0, atol=1e-12)
        np.testing.assert_allclose(fresnel_schlick(0.0, f0), 1.0, atol=1e-12)

    def test_fresnel_monotone_in_angle(self):
        f0 = np.array([0.04])
        vals = [fresnel_schlick(c, f0)[0] for c in np.linspace(0, 1, 20)]
        assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))


class TestBrdfEval:
    def test_reciprocity(self):
        """Swapping incident and outgoing directions leaves the BRDF
        unchanged (Helmholtz reciprocity)."""
        rng = np.random.default_rng(7)
        for _ in range(50):
            n = decode_normal(rng.uniform(-0.7, 0.7, 2))
            wi = random_direction(rng)
            wo = random_direction(rng)
            kwargs = dict(albedo=rng.uniform(0, 1, 3), normal=n,
                          roughness=rng.uniform(R_MIN, 1.0),
                          specular=rng.uniform(0, 1, 3))
            a = brdf_eval(ShadingPoint(wi=wi, wo=wo, **kwargs))
            b = brdf_eval(ShadingPoint(wi=wo, wo=wi, **kwargs))
            np.testing.assert_allclose(a, b, atol=1e-9)

    def test_below_horizon_is_black(self):
        p = ShadingPoint(albedo=np.full(3, 0.5), normal=np.array([0, 0, 1.0]),
                         roughness=0.5, specular=np.full(3, 0.04),
                         wi=np.array([0, 0, -1.0]), wo=np.array([0, 0, 1.0]))
        np.testing.assert_array_equal(brdf_eval(p), np.zeros(3))

    def test_nonnegative(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            p = ShadingPoint(
                albedo=rng.uniform(0, 1, 3),
                normal=decode_normal(rng.uniform(-0.7, 0.7, 2)),
                roughness=rng.uniform(R_MIN, 1.0),
                specular=rng.uniform(0, 1, 3),
                wi=random_direction(rng), wo=random_direction(rng))
            assert np.all(brdf_eval(p) >= 0.0)

    def test_pure_diffuse_value(self):
        """With black specular and grazing-free geometry the BRDF reduces
        to albedo/pi plus a tiny Fresnel-driven term; with specular = 0
        the Schlick term still rises to 1 at grazing, so test at normal
        incidence where F = 0 exactly."""
        albedo = np.array([0.2, 0.4, 0.6])
        p = ShadingPoint(albedo=albedo, normal=np.array([0, 0, 1.0]),
                         roughness=1.0, specular=np.zeros(3),
                         wi=np.array([0, 0, 1.0]), wo=np.array([0, 0, 1.0]))
        np.testing.assert_allclose(brdf_eval(p), albedo / np.pi, atol=1e-12)

    def test_ggx_normalization_small_sample(self):
        """Quick Monte-Carlo check of projected-area normalization;
        the full 1e6-sample version runs in the acceptance suite."""
        rng = np.random.default_rng(9)
        n = 200_000
        # Uniform over the hemisphere (cos theta uniform): pdf = 1 / (2 pi).
        cos_t = rng.uniform(0, 1, n)
        integral = np.mean(ggx_ndf(cos_t, 0.5) * cos_t) * 2 * np.pi
        np.testing.assert_allclose(integral, 1.0, rtol=0.05)
