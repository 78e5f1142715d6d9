"""Quality metrics and evaluation drivers for recovered materials.

Map errors are reported per channel group, with normals additionally
summarized as a mean angular deviation in degrees.  Rendering errors
compare re-rendered images against captured ones in the same comparison
space the fits optimize, separately for the views used during fitting
and for held-out novel views (the gap between the two is the standard
overfitting diagnostic).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .brdf import SvbrdfMaps, decode_normal
from .generator import (GeneratorConfig, LatentState, lerp_latent,
                        maps_from_tensor, synthesize)
from .inversion import GAMMA
from .render import CaptureView, render


def _rmse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def map_rmse(est: SvbrdfMaps, ref: SvbrdfMaps) -> dict:
    """Per-channel-group RMSE plus normal angular error in degrees."""
    if (est.height, est.width) != (ref.height, ref.width):
        raise ValueError("map resolutions differ")
    n_est = decode_normal(est.normal_xy)
    n_ref = decode_normal(ref.normal_xy)
    cos = np.clip(np.sum(n_est * n_ref, axis=-1), -1.0, 1.0)
    return {
        "albedo_rmse": _rmse(est.albedo, ref.albedo),
        "normal_rmse": _rmse(est.normal_xy, ref.normal_xy),
        "normal_angle_deg": float(np.degrees(np.mean(np.arccos(cos)))),
        "roughness_rmse": _rmse(est.roughness, ref.roughness),
        "specular_rmse": _rmse(est.specular, ref.specular),
        "maps_rmse": _rmse(est.stack_channels(), ref.stack_channels()),
    }


def _encode(img: np.ndarray, space: str) -> np.ndarray:
    if space == "linear":
        return img
    return np.clip(img, 1e-4, 1.0) ** (1.0 / GAMMA)


def render_rmse(maps: SvbrdfMaps, views: list,
                comparison_space: str = "gamma") -> float:
    """Mean re-rendering RMSE against the views' captured images."""
    if not views:
        raise ValueError("at least one view is required")
    errors = []
    for v in views:
        if v.image is None:
            raise ValueError("every evaluation view needs a captured image")
        errors.append(_rmse(_encode(render(maps, v), comparison_space),
                            _encode(v.image, comparison_space)))
    return float(np.mean(errors))


@dataclass
class EvalReport:
    """Flat bag of named scalar metrics with a stable text encoding."""

    metrics: dict = field(default_factory=dict)

    def lines(self) -> list:
        return [f"{k}={self.metrics[k]:.6g}" for k in sorted(self.metrics)]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")

    @staticmethod
    def load(path) -> "EvalReport":
        metrics = {}
        for line in Path(path).read_text().splitlines():
            if line.strip():
                k, v = line.split("=", 1)
                metrics[k] = float(v)
        return EvalReport(metrics)


def _views_overlap(a: CaptureView, b: CaptureView) -> bool:
    return (np.allclose(a.camera_position, b.camera_position)
            and np.allclose(a.light_position, b.light_position))


def eval_fit(maps: SvbrdfMaps, fit_views: list, novel_views: list,
             reference: SvbrdfMaps | None = None,
             comparison_space: str = "gamma") -> EvalReport:
    """Evaluate a recovered material on fitting and held-out views.

    The two view sets must be disjoint, otherwise the novel-view error
    silently stops measuring generalization.
    """
    for nv in novel_views:
        if any(_views_overlap(nv, fv) for fv in fit_views):
            raise ValueError("novel views must be disjoint from fit views")
    metrics = {}
    if fit_views:
        metrics["render_rmse_fit"] = render_rmse(maps, fit_views,
                                                 comparison_space)
    if novel_views:
        metrics["render_rmse_novel"] = render_rmse(maps, novel_views,
                                                   comparison_space)
    if "render_rmse_fit" in metrics and "render_rmse_novel" in metrics:
        metrics["render_rmse_gap"] = (metrics["render_rmse_novel"]
                                      - metrics["render_rmse_fit"])
    if reference is not None:
        metrics.update(map_rmse(maps, reference))
    return EvalReport(metrics)


# -- latent morphing ---------------------------------------------------------


def morph(weights: dict, config: GeneratorConfig, state_a: LatentState,
          state_b: LatentState, num_frames: int) -> list:
    """Decode a latent-space interpolation path between two materials.

    Frame 0 decodes state_a exactly and the last frame state_b; frames
    in between traverse the prior's manifold rather than fading pixels.
    """
    if num_frames < 2:
        raise ValueError("a morph needs at least the two endpoint frames")
    frames = []
    for i in range(num_frames):
        t = i / (num_frames - 1)
        state = lerp_latent(state_a, state_b, t)
        frames.append(maps_from_tensor(
            synthesize(weights, config, state.w_plus, state.noise)))
    return frames


def pixel_lerp_maps(a: SvbrdfMaps, b: SvbrdfMaps, t: float) -> SvbrdfMaps:
    """Naive per-pixel blend baseline for comparison against morph()."""
    blended = (1.0 - t) * a.stack_channels() + t * b.stack_channels()
    return SvbrdfMaps.from_channels(blended)
