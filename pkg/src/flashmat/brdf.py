"""SVBRDF data model and scalar microfacet shading math.

The material model is a diffuse Lambertian lobe plus a single isotropic
GGX microfacet lobe with Schlick Fresnel.  Per-pixel parameters are
diffuse albedo (RGB), a tangent-space normal stored as (x, y), a scalar
roughness, and a specular albedo (RGB) used as the Fresnel base
reflectance.  The GGX width is alpha = roughness**2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Roughness floor: keeps alpha away from the delta-function limit where
# gradients blow up.
R_MIN = 0.02

# 3 albedo + 2 normal + 1 roughness + 3 specular
NUM_CHANNELS = 9


@dataclass
class SvbrdfMaps:
    """Per-pixel material parameter maps.

    albedo, specular: (H, W, 3) in [0, 1], linear.
    normal_xy: (H, W, 2) in [-1, 1] with x^2 + y^2 <= 1 per pixel.
    roughness: (H, W) in [R_MIN, 1].
    """

    albedo: np.ndarray
    normal_xy: np.ndarray
    roughness: np.ndarray
    specular: np.ndarray

    @property
    def height(self) -> int:
        return self.albedo.shape[0]

    @property
    def width(self) -> int:
        return self.albedo.shape[1]

    def validate(self) -> None:
        """Raise ValueError if any invariant is violated."""
        h, w = self.albedo.shape[:2]
        if self.albedo.shape != (h, w, 3):
            raise ValueError(f"albedo must be (H, W, 3), got {self.albedo.shape}")
        if self.normal_xy.shape != (h, w, 2):
            raise ValueError(f"normal_xy must be ({h}, {w}, 2), got {self.normal_xy.shape}")
        if self.roughness.shape != (h, w):
            raise ValueError(f"roughness must be ({h}, {w}), got {self.roughness.shape}")
        if self.specular.shape != (h, w, 3):
            raise ValueError(f"specular must be ({h}, {w}, 3), got {self.specular.shape}")
        for name in ("albedo", "normal_xy", "roughness", "specular"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")
        if self.albedo.min() < 0 or self.albedo.max() > 1:
            raise ValueError("albedo out of [0, 1]")
        if self.specular.min() < 0 or self.specular.max() > 1:
            raise ValueError("specular out of [0, 1]")
        if self.roughness.min() < R_MIN - 1e-6 or self.roughness.max() > 1 + 1e-6:
            raise ValueError("roughness out of [r_min, 1]")
        rho2 = np.sum(self.normal_xy ** 2, axis=-1)
        if rho2.max() > 1 + 1e-6:
            raise ValueError("normal_xy outside the unit disk")

    def copy(self) -> "SvbrdfMaps":
        return SvbrdfMaps(
            self.albedo.copy(), self.normal_xy.copy(),
            self.roughness.copy(), self.specular.copy(),
        )

    def stack_channels(self) -> np.ndarray:
        """Pack the maps into a (H, W, 9) array."""
        return np.concatenate(
            [self.albedo, self.normal_xy, self.roughness[..., None], self.specular],
            axis=-1,
        )

    @staticmethod
    def from_channels(stacked: np.ndarray) -> "SvbrdfMaps":
        """Unpack a (H, W, 9) array produced by stack_channels."""
        if stacked.shape[-1] != NUM_CHANNELS:
            raise ValueError(f"expected {NUM_CHANNELS} channels, got {stacked.shape[-1]}")
        return SvbrdfMaps(
            albedo=stacked[..., 0:3].copy(),
            normal_xy=stacked[..., 3:5].copy(),
            roughness=stacked[..., 5].copy(),
            specular=stacked[..., 6:9].copy(),
        )

    @staticmethod
    def constant(height: int, width: int, albedo=(0.5, 0.5, 0.5),
                 normal_xy=(0.0, 0.0), roughness=0.5,
                 specular=(0.04, 0.04, 0.04)) -> "SvbrdfMaps":
        """Spatially constant maps, handy for tests and presets."""
        return SvbrdfMaps(
            albedo=np.full((height, width, 3), albedo, dtype=np.float64),
            normal_xy=np.full((height, width, 2), normal_xy, dtype=np.float64),
            roughness=np.full((height, width), roughness, dtype=np.float64),
            specular=np.full((height, width, 3), specular, dtype=np.float64),
        )


@dataclass
class ShadingPoint:
    """One pixel's shading inputs: material parameters plus directions."""

    albedo: np.ndarray     # (3,)
    normal: np.ndarray     # unit (3,)
    roughness: float
    specular: np.ndarray   # (3,)
    wi: np.ndarray         # unit (3,), towards the light
    wo: np.ndarray         # unit (3,), towards the viewer

    def validate(self) -> None:
        for name in ("normal", "wi", "wo"):
            v = getattr(self, name)
            if abs(np.linalg.norm(v) - 1.0) > 1e-6:
                raise ValueError(f"{name} is not unit length")
        if self.roughness <= 0:
            raise ValueError("roughness must be positive")


def project_to_disk(normal_xy: np.ndarray) -> np.ndarray:
    """Radially project (..., 2) vectors onto the closed unit disk."""
    rho = np.sqrt(np.sum(normal_xy ** 2, axis=-1, keepdims=True))
    scale = 1.0 / np.maximum(rho, 1.0)
    return normal_xy * scale


def decode_normal(normal_xy: np.ndarray) -> np.ndarray:
    """Reconstruct unit 3-vectors from (..., 2) tangent-space (x, y).

    z = sqrt(max(0, 1 - x^2 - y^2)); out-of-disk inputs are radially
    projected first, so the function is total and z >= 0 always.
    """
    xy = project_to_disk(np.asarray(normal_xy, dtype=np.float64))
    z = np.sqrt(np.maximum(0.0, 1.0 - np.sum(xy ** 2, axis=-1, keepdims=True)))
    n = np.concatenate([xy, z], axis=-1)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    return n / np.maximum(norm, 1e-12)


def ggx_ndf(n_dot_h, alpha):
    """GGX normal distribution D(n.h) with width alpha."""
    t = n_dot_h * n_dot_h * (alpha * alpha - 1.0) + 1.0
    return alpha * alpha / (np.pi * t * t)


def _smith_g1(cos_theta, alpha):
    a2 = alpha * alpha
    return 2.0 * cos_theta / (cos_theta + np.sqrt(a2 + (1.0 - a2) * cos_theta * cos_theta))


def smith_g(n_dot_i, n_dot_o, alpha):
    """Separable Smith shadowing-masking: G1(n.wi) * G1(n.wo)."""
    return _smith_g1(n_dot_i, alpha) * _smith_g1(n_dot_o, alpha)


def fresnel_schlick(cos_theta, f0):
    """Schlick Fresnel with base reflectance f0 (per channel)."""
    f0 = np.asarray(f0, dtype=np.float64)
    return f0 + (1.0 - f0) * (1.0 - cos_theta) ** 5


def brdf_eval(p: ShadingPoint) -> np.ndarray:
    """Evaluate the full BRDF at one shading point; returns RGB.

    Diffuse term albedo/pi plus GGX specular
    D * G * F / (4 (n.wi)(n.wo)); black when either direction is below
    the horizon.
    """
    n_dot_i = float(np.dot(p.normal, p.wi))
    n_dot_o = float(np.dot(p.normal, p.wo))
    if n_dot_i <= 0.0 or n_dot_o <= 0.0:
        return np.zeros(3)
    h = p.wi + p.wo
    h = h / np.linalg.norm(h)
    n_dot_h = float(np.clip(np.dot(p.normal, h), 0.0, 1.0))
    o_dot_h = float(np.clip(np.dot(p.wo, h), 0.0, 1.0))
    alpha = p.roughness ** 2
    d = ggx_ndf(n_dot_h, alpha)
    g = smith_g(n_dot_i, n_dot_o, alpha)
    f = fresnel_schlick(o_dot_h, p.specular)
    spec = d * g * f / (4.0 * n_dot_i * n_dot_o)
    return np.maximum(0.0, np.asarray(p.albedo, dtype=np.float64) / np.pi + spec)
