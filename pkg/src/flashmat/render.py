"""Differentiable point-light renderer for flat material samples.

The sample occupies the unit square on the z=0 plane.  Pixels map
orthographically to plane points; the camera position only affects the
view direction and the light position drives the inverse-square falloff.
Both the forward image and the analytic gradients with respect to every
material channel are computed with vectorized numpy; the gradient code
is the hand-derived chain rule through the shading model, validated
against finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .brdf import SvbrdfMaps, decode_normal

# z-floor used only in the normal-decoding Jacobian; keeps gradients
# finite when a normal sits on the rim of the disk.
_Z_EPS = 1e-4


@dataclass
class CaptureView:
    """One measurement's light/camera configuration plus (optionally)
    the captured image it produced."""

    camera_position: np.ndarray          # (3,), z > 0
    light_position: np.ndarray           # (3,)
    light_intensity: float               # radiant intensity, linear units
    image: np.ndarray | None = None      # (H, W, 3) linear radiance
    resolution: tuple[int, int] | None = None  # (H, W) when image is None
    projection: str = "ortho"

    def __post_init__(self):
        self.camera_position = np.asarray(self.camera_position, dtype=np.float64)
        self.light_position = np.asarray(self.light_position, dtype=np.float64)

    def validate(self) -> None:
        if self.camera_position[2] <= 0:
            raise ValueError("camera must be above the sample plane")
        if self.image is not None:
            if not np.all(np.isfinite(self.image)) or self.image.min() < 0:
                raise ValueError("captured image must be finite and non-negative")

    @property
    def shape(self) -> tuple[int, int]:
        if self.image is not None:
            return self.image.shape[:2]
        if self.resolution is None:
            raise ValueError("view has neither an image nor a resolution")
        return self.resolution


def make_collocated_view(distance: float, intensity: float, resolution: int,
                         offset_xy=(0.0, 0.0)) -> CaptureView:
    """Camera and flash at the same point above the sample.

    A 3x3 grid of offsets reproduces the handheld capture protocol where
    the specular highlight sweeps across the sample.
    """
    if distance <= 0:
        raise ValueError("distance must be positive")
    pos = np.array([offset_xy[0], offset_xy[1], distance], dtype=np.float64)
    return CaptureView(
        camera_position=pos,
        light_position=pos.copy(),
        light_intensity=intensity,
        resolution=(resolution, resolution),
    )


def grid_offsets_3x3(extent: float = 0.35) -> list[tuple[float, float]]:
    """Offsets covering the sample with a 3x3 pattern of highlights."""
    ticks = (-extent, 0.0, extent)
    return [(x, y) for y in ticks for x in ticks]


def pixel_plane_positions(height: int, width: int) -> np.ndarray:
    """(H, W, 3) plane positions of pixel centers on the unit square."""
    xs = (np.arange(width) + 0.5) / width - 0.5
    ys = 0.5 - (np.arange(height) + 0.5) / height
    px, py = np.meshgrid(xs, ys)
    return np.stack([px, py, np.zeros_like(px)], axis=-1)


def _geometry(maps: SvbrdfMaps, view: CaptureView):
    """Shared per-pixel quantities for forward and backward passes."""
    h_px, w_px = view.shape
    if (maps.height, maps.width) != (h_px, w_px):
        raise ValueError(
            f"map size {(maps.height, maps.width)} does not match "
            f"view size {(h_px, w_px)}")
    pos = pixel_plane_positions(h_px, w_px)
    to_light = view.light_position[None, None, :] - pos
    dist2 = np.sum(to_light ** 2, axis=-1)
    wi = to_light / np.sqrt(dist2)[..., None]
    to_cam = view.camera_position[None, None, :] - pos
    wo = to_cam / np.linalg.norm(to_cam, axis=-1, keepdims=True)
    half = wi + wo
    half /= np.linalg.norm(half, axis=-1, keepdims=True)
    n = decode_normal(maps.normal_xy)
    ci = np.sum(n * wi, axis=-1)
    co = np.sum(n * wo, axis=-1)
    mask = (ci > 0.0) & (co > 0.0)
    nh = np.clip(np.sum(n * half, axis=-1), 0.0, 1.0)
    oh = np.clip(np.sum(wo * half, axis=-1), 0.0, 1.0)
    falloff = view.light_intensity / dist2
    return wi, wo, half, n, ci, co, mask, nh, oh, falloff


def render(maps: SvbrdfMaps, view: CaptureView) -> np.ndarray:
    """Render (H, W, 3) linear radiance of the maps under the view."""
    wi, wo, half, n, ci, co, mask, nh, oh, falloff = _geometry(maps, view)
    alpha = maps.roughness ** 2
    a2 = alpha * alpha
    t = nh * nh * (a2 - 1.0) + 1.0
    d = a2 / (np.pi * t * t)
    ci_s = np.where(mask, ci, 1.0)
    co_s = np.where(mask, co, 1.0)
    g1i = 2.0 * ci_s / (ci_s + np.sqrt(a2 + (1.0 - a2) * ci_s ** 2))
    g1o = 2.0 * co_s / (co_s + np.sqrt(a2 + (1.0 - a2) * co_s ** 2))
    fres = maps.specular + (1.0 - maps.specular) * ((1.0 - oh) ** 5)[..., None]
    spec = (d * g1i * g1o / (4.0 * ci_s * co_s))[..., None] * fres
    out = (maps.albedo / np.pi + spec) * (ci * falloff)[..., None]
    out = np.where(mask[..., None], out, 0.0)
    return np.maximum(out, 0.0)


def render_backward(maps: SvbrdfMaps, view: CaptureView,
                    d_out: np.ndarray) -> SvbrdfMaps:
    """Adjoint of render: maps an image-shaped adjoint to map-shaped
    gradients, packaged in an SvbrdfMaps-shaped container."""
    wi, wo, half, n, ci, co, mask, nh, oh, falloff = _geometry(maps, view)
    if d_out.shape != (maps.height, maps.width, 3):
        raise ValueError(f"adjoint shape {d_out.shape} does not match maps")
    w = np.where(mask[..., None], d_out, 0.0)

    r = maps.roughness
    alpha = r ** 2
    a2 = alpha * alpha
    t = nh * nh * (a2 - 1.0) + 1.0
    d = a2 / (np.pi * t * t)
    ci_s = np.where(mask, ci, 1.0)
    co_s = np.where(mask, co, 1.0)
    qi = np.sqrt(a2 + (1.0 - a2) * ci_s ** 2)
    qo = np.sqrt(a2 + (1.0 - a2) * co_s ** 2)
    g1i = 2.0 * ci_s / (ci_s + qi)
    g1o = 2.0 * co_s / (co_s + qo)
    one_oh5 = (1.0 - oh) ** 5
    fres = maps.specular + (1.0 - maps.specular) * one_oh5[..., None]
    k = ci * falloff  # cosine times inverse-square falloff

    # Albedo: out_c = (a_c / pi) * k + ...
    grad_albedo = w * (k / np.pi)[..., None]

    # Specular: out_spec_c = falloff * D G1i G1o F_c / (4 co)
    spec_common = falloff * d * g1i * g1o / (4.0 * co_s)
    grad_specular = w * (spec_common * (1.0 - one_oh5))[..., None]

    # Weighted channel sums collapse RGB once for the scalar channels.
    sum_wf = np.sum(w * fres, axis=-1)
    sum_wa = np.sum(w * maps.albedo, axis=-1)

    # Roughness via alpha = r^2.
    dd_da = 2.0 * alpha * (t - 2.0 * a2 * nh * nh) / (np.pi * t ** 3)
    dg1i_da = -2.0 * ci_s * alpha * (1.0 - ci_s ** 2) / (qi * (ci_s + qi) ** 2)
    dg1o_da = -2.0 * co_s * alpha * (1.0 - co_s ** 2) / (qo * (co_s + qo) ** 2)
    dspec_da = (falloff / (4.0 * co_s)) * (
        dd_da * g1i * g1o + d * dg1i_da * g1o + d * g1i * dg1o_da)
    grad_roughness = np.where(mask, sum_wf * dspec_da * 2.0 * r, 0.0)

    # Normal: out depends on n through ci, co and nh.
    dd_dnh = -4.0 * a2 * (a2 - 1.0) * nh / (np.pi * t ** 3)
    dg1i_dci = 2.0 * a2 / (qi * (ci_s + qi) ** 2)
    # d[G1(co)/co]/dco for the combined G1o / co factor
    dqo_dco = (1.0 - a2) * co_s / qo
    dg1o_over_co_dco = -2.0 * (1.0 + dqo_dco) / (co_s + qo) ** 2
    base = falloff / 4.0
    coef_ci = sum_wf * base * d * dg1i_dci * g1o / co_s \
        + sum_wa * falloff / np.pi
    coef_co = sum_wf * base * d * g1i * dg1o_over_co_dco
    coef_nh = sum_wf * base * dd_dnh * g1i * g1o / co_s
    grad_n3 = (coef_ci[..., None] * wi + coef_co[..., None] * wo
               + coef_nh[..., None] * half)
    grad_n3 = np.where(mask[..., None], grad_n3, 0.0)

    # Chain through z = sqrt(1 - x^2 - y^2) with a floored Jacobian.
    z = np.maximum(n[..., 2], _Z_EPS)
    grad_nx = grad_n3[..., 0] - grad_n3[..., 2] * maps.normal_xy[..., 0] / z
    grad_ny = grad_n3[..., 1] - grad_n3[..., 2] * maps.normal_xy[..., 1] / z

    return SvbrdfMaps(
        albedo=grad_albedo,
        normal_xy=np.stack([grad_nx, grad_ny], axis=-1),
        roughness=grad_roughness,
        specular=grad_specular,
    )


def render_reference(maps: SvbrdfMaps, view: CaptureView) -> np.ndarray:
    """Scalar per-pixel oracle: loops over pixels and calls the scalar
    BRDF.  Slow; used only for validating render()."""
    from .brdf import ShadingPoint, brdf_eval

    height, width = view.shape
    pos = pixel_plane_positions(height, width)
    normals = decode_normal(maps.normal_xy)
    out = np.zeros((height, width, 3))
    for i in range(height):
        for j in range(width):
            to_light = view.light_position - pos[i, j]
            dist2 = float(np.dot(to_light, to_light))
            wi = to_light / np.sqrt(dist2)
            to_cam = view.camera_position - pos[i, j]
            wo = to_cam / np.linalg.norm(to_cam)
            n = normals[i, j]
            cos_i = float(np.dot(n, wi))
            if cos_i <= 0.0 or np.dot(n, wo) <= 0.0:
                continue
            point = ShadingPoint(
                albedo=maps.albedo[i, j], normal=n,
                roughness=float(maps.roughness[i, j]),
                specular=maps.specular[i, j], wi=wi, wo=wo)
            out[i, j] = brdf_eval(point) * cos_i * view.light_intensity / dist2
    return out
