"""Tests for the differentiable renderer: forward against the scalar
oracle, analytic gradients against central finite differences, and the
adjoint identity."""

import numpy as np
import pytest

from flashmat.brdf import R_MIN, SvbrdfMaps, project_to_disk
from flashmat.render import (CaptureView, grid_offsets_3x3,
                             make_collocated_view, pixel_plane_positions,
                             render, render_backward, render_reference)


def random_maps(rng, res=8, max_tilt=0.7):
    return SvbrdfMaps(
        albedo=rng.uniform(0, 1, (res, res, 3)),
        normal_xy=project_to_disk(rng.uniform(-max_tilt, max_tilt,
                                              (res, res, 2))),
        roughness=rng.uniform(0.1, 1.0, (res, res)),
        specular=rng.uniform(0, 1, (res, res, 3)),
    )


class TestViewSetup:
    def test_collocated_light_at_camera(self):
        v = make_collocated_view(2.0, 5.0, 8, offset_xy=(0.1, -0.2))
        np.testing.assert_array_equal(v.camera_position, v.light_position)
        assert v.shape == (8, 8)

    def test_collocated_rejects_nonpositive_distance(self):
        with pytest.raises(ValueError):
            make_collocated_view(0.0, 1.0, 8)

    def test_grid_has_nine_unique_offsets(self):
        offsets = grid_offsets_3x3()
        assert len(offsets) == 9
        assert len(set(offsets)) == 9

    def test_pixel_positions_cover_unit_square(self):
        pos = pixel_plane_positions(4, 4)
        assert pos.shape == (4, 4, 3)
        np.testing.assert_allclose(pos[0, 0], [-0.375, 0.375, 0.0])
        np.testing.assert_allclose(pos[-1, -1], [0.375, -0.375, 0.0])
        np.testing.assert_array_equal(pos[..., 2], 0.0)

    def test_validate_rejects_camera_below_plane(self):
        v = CaptureView(camera_position=[0, 0, -1.0],
                        light_position=[0, 0, 1.0],
                        light_intensity=1.0, resolution=(4, 4))
        with pytest.raises(ValueError):
            v.validate()


class TestForward:
    def test_matches_scalar_oracle(self):
        """Vectorized renderer against the per-pixel loop, random maps
        and an off-axis view."""
        rng = np.random.default_rng(0)
        maps = random_maps(rng)
        view = make_collocated_view(1.5, 4.0, 8, offset_xy=(0.2, -0.1))
        fast = render(maps, view)
        slow = render_reference(maps, view)
        np.testing.assert_allclose(fast, slow, rtol=1e-6, atol=1e-12)

    def test_matches_oracle_non_collocated(self):
        rng = np.random.default_rng(1)
        maps = random_maps(rng)
        view = CaptureView(camera_position=[0.3, 0.1, 1.2],
                           light_position=[-0.2, 0.4, 0.8],
                           light_intensity=2.0, resolution=(8, 8))
        np.testing.assert_allclose(render(maps, view),
                                   render_reference(maps, view),
                                   rtol=1e-6, atol=1e-12)

    def test_output_nonnegative_and_finite(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            img = render(random_maps(rng), make_collocated_view(1.0, 3.0, 8))
            assert np.all(np.isfinite(img)) and img.min() >= 0

    def test_inverse_square_falloff(self):
        """Doubling the collocated distance quarters the diffuse signal
        (up to the small change in view direction at off-center pixels)."""
        maps = SvbrdfMaps.constant(8, 8, roughness=1.0, specular=(0, 0, 0))
        near = render(maps, make_collocated_view(10.0, 1.0, 8))
        far = render(maps, make_collocated_view(20.0, 1.0, 8))
        np.testing.assert_allclose(near / far, 4.0, rtol=1e-2)

    def test_size_mismatch_raises(self):
        maps = SvbrdfMaps.constant(8, 8)
        with pytest.raises(ValueError):
            render(maps, make_collocated_view(1.0, 1.0, 16))


def finite_difference_grad(maps, view, adjoint, channel, index, eps=1e-5):
    """Central finite difference of <render, adjoint> in one map entry."""
    def value(m):
        return float(np.sum(render(m, view) * adjoint))

    plus = maps.copy()
    minus = maps.copy()
    getattr(plus, channel)[index] += eps
    getattr(minus, channel)[index] -= eps
    return (value(plus) - value(minus)) / (2 * eps)


class TestBackward:
    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        maps = random_maps(rng, max_tilt=0.6)
        view = make_collocated_view(1.2, 3.0, 8, offset_xy=(0.15, 0.05))
        adjoint = rng.standard_normal((8, 8, 3))
        grads = render_backward(maps, view, adjoint)

        checks = 0
        for channel, grad_arr in (("albedo", grads.albedo),
                                  ("normal_xy", grads.normal_xy),
                                  ("roughness", grads.roughness),
                                  ("specular", grads.specular)):
            arr = getattr(maps, channel)
            for _ in range(10):
                index = tuple(rng.integers(0, s) for s in arr.shape)
                fd = finite_difference_grad(maps, view, adjoint, channel, index)
                an = grad_arr[index]
                np.testing.assert_allclose(
                    an, fd, rtol=1e-4, atol=1e-7,
                    err_msg=f"{channel}{index}")
                checks += 1
        assert checks == 40

    def test_adjoint_identity(self):
        """<J v, u> == <v, J^T u> for random tangent v and adjoint u."""
        rng = np.random.default_rng(4)
        maps = random_maps(rng, max_tilt=0.6)
        view = make_collocated_view(1.0, 2.0, 8)
        u = rng.standard_normal((8, 8, 3))
        v = SvbrdfMaps(
            albedo=rng.standard_normal(maps.albedo.shape),
            normal_xy=rng.standard_normal(maps.normal_xy.shape),
            roughness=rng.standard_normal(maps.roughness.shape),
            specular=rng.standard_normal(maps.specular.shape))

        eps = 1e-6
        plus = maps.copy()
        minus = maps.copy()
        for ch in ("albedo", "normal_xy", "roughness", "specular"):
            getattr(plus, ch)[...] += eps * getattr(v, ch)
            getattr(minus, ch)[...] -= eps * getattr(v, ch)
        jv_u = float(np.sum((render(plus, view) - render(minus, view)) * u)
                     / (2 * eps))

        g = render_backward(maps, view, u)
        v_jtu = float(sum(np.sum(getattr(g, ch) * getattr(v, ch))
                          for ch in ("albedo", "normal_xy", "roughness",
                                     "specular")))
        np.testing.assert_allclose(jv_u, v_jtu, rtol=1e-4)

    def test_masked_pixels_get_zero_gradient(self):
        """A pixel tilted fully away from the light contributes nothing."""
        maps = SvbrdfMaps.constant(4, 4)
        maps.normal_xy[0, 0] = (0.9999, 0.0)
        view = CaptureView(camera_position=[-5.0, 0, 0.05],
                           light_position=[-5.0, 0, 0.05],
                           light_intensity=1.0, resolution=(4, 4))
        g = render_backward(maps, view, np.ones((4, 4, 3)))
        assert g.albedo[0, 0].max() == 0.0

    def test_adjoint_shape_mismatch_raises(self):
        maps = SvbrdfMaps.constant(4, 4)
        with pytest.raises(ValueError):
            render_backward(maps, make_collocated_view(1.0, 1.0, 4),
                            np.ones((5, 5, 3)))
