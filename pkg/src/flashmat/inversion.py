"""Inverse-rendering engine: losses, feature extractor, and the fitting
loops that recover material maps from captured views.

Two modes are supported.  Direct mode optimizes raw per-pixel maps
(reparameterized through the generator's range mapping, so invariants
always hold).  Latent mode optimizes a style matrix w+ and per-layer
noise through the generator, with three scheduling strategies:
    s1 -- optimize w+ for the first half, then noise;
    s2 -- optimize both jointly;
    s3 -- alternate between w+ and noise every `period` iterations.
The objective sums, over views, a pixel L2 term and a feature-space
perceptual term, both evaluated in a configurable comparison space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .brdf import SvbrdfMaps
from .generator import (GeneratorConfig, LatentState, apply_range_mapping,
                        maps_from_tensor, mean_w, raw_from_maps, replicate,
                        synthesize, tensor_from_maps, zero_noise)
from .render import CaptureView, render, render_backward

GAMMA = 2.2

# Default per-layer perceptual weights for the two optimization phases.
W_PLUS_LAYER_WEIGHTS = (1 / 512, 1 / 512, 1 / 128, 1 / 64)
NOISE_LAYER_WEIGHTS = (1 / 64, 1 / 64, 1 / 256, 1 / 512)


@dataclass
class LossConfig:
    lambda_pixel: float = 1.0
    lambda_percept: float = 0.1
    w_plus_layer_weights: tuple = W_PLUS_LAYER_WEIGHTS
    noise_layer_weights: tuple = NOISE_LAYER_WEIGHTS
    comparison_space: str = "gamma"  # "linear" | "gamma"

    def __post_init__(self):
        if len(self.w_plus_layer_weights) != 4 or len(self.noise_layer_weights) != 4:
            raise ValueError("exactly 4 per-layer perceptual weights are required")
        if any(w < 0 for w in self.w_plus_layer_weights + self.noise_layer_weights):
            raise ValueError("layer weights must be non-negative")
        if self.comparison_space not in ("linear", "gamma"):
            raise ValueError(f"unknown comparison space {self.comparison_space!r}")


@dataclass
class FitConfig:
    strategy: str = "s3"            # s1 | s2 | s3
    period: int = 10                # alternation period for s3
    iterations: int = 2000
    learning_rate: float = 0.01
    init: str = "mean_w"            # mean_w | low_rough | dual | file
    init_path: str | None = None
    latent_space: str = "w_plus_noise"  # w | w_plus | w_plus_noise
    post_refine: bool = False
    refine_iterations: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.period < 1:
            raise ValueError("iterations and period must be >= 1")
        if self.strategy not in ("s1", "s2", "s3"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.latent_space not in ("w", "w_plus", "w_plus_noise"):
            raise ValueError(f"unknown latent space {self.latent_space!r}")


# -- comparison space and the render bridge ----------------------------------


def to_comparison_space(img: Tensor, space: str) -> Tensor:
    """Map linear radiance into the space losses are computed in."""
    if space == "linear":
        return img
    return ad.power(ad.clamp(img, 1e-4, 1.0), 1.0 / GAMMA)


def render_tensor(maps9: Tensor, view: CaptureView) -> Tensor:
    """Differentiable rendering layer: (1, 9, H, W) maps to (1, 3, H, W)
    radiance, backed by the analytic renderer."""
    hwc = np.transpose(maps9.data[0].astype(np.float64), (1, 2, 0))
    maps = SvbrdfMaps.from_channels(hwc)
    out = render(maps, view)
    data = np.transpose(out, (2, 0, 1))[None].astype(maps9.dtype)

    def backward_fn(g):
        adj = np.transpose(g[0].astype(np.float64), (1, 2, 0))
        grad_maps = render_backward(maps, view, adj)
        grad_chw = np.transpose(grad_maps.stack_channels(), (2, 0, 1))[None]
        maps9._accumulate(grad_chw.astype(maps9.dtype))

    return ad._make(data, (maps9,), backward_fn)


def image_tensor(image: np.ndarray, dtype=None) -> Tensor:
    """Wrap an (H, W, 3) image as a constant (1, 3, H, W) tensor."""
    chw = np.transpose(np.asarray(image), (2, 0, 1))[None]
    return Tensor(chw.astype(dtype or ad.DEFAULT_DTYPE))


# -- feature extractor -------------------------------------------------------


class FeatureExtractor:
    """Fixed convolutional pyramid with 4 tap points at strides 1, 1, 4, 8.

    Weights are either loaded from a named-tensor container (external
    pretrained features) or generated from a seeded PRNG, so the default
    build is self-contained.  Weights are never updated.
    """

    _PLAN = (  # (in, out, stride, tap_after)
        (3, 16, 1, True),
        (16, 16, 1, True),
        (16, 32, 2, False),
        (32, 32, 2, True),
        (32, 64, 2, True),
    )

    def __init__(self, seed: int = 0, weights: dict | None = None, dtype=None):
        dtype = dtype or ad.DEFAULT_DTYPE
        if weights is None:
            rng = np.random.default_rng(seed)
            weights = {}
            for i, (c_in, c_out, _, _) in enumerate(self._PLAN):
                fan_in = c_in * 9
                weights[f"feat{i}_w"] = rng.standard_normal(
                    (c_out, c_in, 3, 3)) / np.sqrt(fan_in)
                weights[f"feat{i}_b"] = np.zeros((1, c_out, 1, 1))
        self.weights = {k: Tensor(np.asarray(v, dtype=dtype), dtype=dtype)
                        for k, v in weights.items()}

    @classmethod
    def from_file(cls, path, dtype=None) -> "FeatureExtractor":
        return cls(weights=ad.load_tensors(path), dtype=dtype)

    def save(self, path) -> None:
        ad.save_tensors(path, {k: v.data for k, v in self.weights.items()})

    def extract(self, img: Tensor) -> list:
        """Four feature tensors for a (1, 3, H, W) image."""
        taps = []
        x = img
        for i, (_, _, stride, tap_after) in enumerate(self._PLAN):
            x = ad.conv2d(x, self.weights[f"feat{i}_w"],
                          self.weights[f"feat{i}_b"], stride=stride)
            x = ad.leaky_relu(x, 0.2)
            if tap_after:
                taps.append(x)
        return taps


# -- losses ------------------------------------------------------------------


def pixel_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference over all pixels and channels."""
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    d = ad.add(a, ad.scale(b, -1.0))
    return ad.mean_all(ad.mul(d, d))


def perceptual_loss(features_a: list, features_b: list, layer_weights) -> Tensor:
    """Weighted sum of mean squared feature differences over the 4 taps."""
    if len(features_a) != 4 or len(features_b) != 4:
        raise ValueError("perceptual loss expects 4 feature taps")
    total = None
    for fa, fb, w in zip(features_a, features_b, layer_weights):
        if fa.shape != fb.shape:
            raise ValueError(f"feature shapes differ: {fa.shape} vs {fb.shape}")
        d = ad.add(fa, ad.scale(fb, -1.0))
        term = ad.scale(ad.mean_all(ad.mul(d, d)), float(w))
        total = term if total is None else ad.add(total, term)
    return total


class Objective:
    """Sum over views of the pixel + perceptual comparison against the
    captured images, with target encodings precomputed once."""

    def __init__(self, views: list, loss_cfg: LossConfig,
                 extractor: FeatureExtractor | None = None, dtype=None):
        if not views:
            raise ValueError("at least one view is required")
        self.views = views
        self.cfg = loss_cfg
        self.extractor = extractor or FeatureExtractor(dtype=dtype)
        self.dtype = dtype or ad.DEFAULT_DTYPE
        self.targets = []
        self.target_features = []
        for v in views:
            if v.image is None:
                raise ValueError("every fitting view needs a captured image")
            enc = to_comparison_space(
                image_tensor(v.image, self.dtype), loss_cfg.comparison_space)
            enc = enc.detach()
            self.targets.append(enc)
            if loss_cfg.lambda_percept > 0:
                feats = [f.detach() for f in self.extractor.extract(enc)]
            else:
                feats = None
            self.target_features.append(feats)

    def evaluate(self, maps9: Tensor, layer_weights=None):
        """Returns (total, pixel_part, percept_part) scalar tensors."""
        lw = layer_weights or self.cfg.w_plus_layer_weights
        pix_total = None
        per_total = None
        for v, tgt, tfeat in zip(self.views, self.targets, self.target_features):
            img = to_comparison_space(render_tensor(maps9, v),
                                      self.cfg.comparison_space)
            pix = pixel_loss(img, tgt)
            pix_total = pix if pix_total is None else ad.add(pix_total, pix)
            if tfeat is not None:
                per = perceptual_loss(self.extractor.extract(img), tfeat, lw)
                per_total = per if per_total is None else ad.add(per_total, per)
        total = ad.scale(pix_total, self.cfg.lambda_pixel)
        if per_total is not None:
            total = ad.add(total, ad.scale(per_total, self.cfg.lambda_percept))
        else:
            per_total = Tensor(np.zeros((1, 1, 1, 1)), dtype=self.dtype)
        return total, pix_total, per_total


def total_objective(maps_or_tensor, views: list, loss_cfg: LossConfig,
                    extractor: FeatureExtractor | None = None) -> float:
    """Convenience scalar evaluation of the full objective."""
    if isinstance(maps_or_tensor, SvbrdfMaps):
        maps9 = Tensor(tensor_from_maps(maps_or_tensor))
    else:
        maps9 = maps_or_tensor
    obj = Objective(views, loss_cfg, extractor)
    total, _, _ = obj.evaluate(maps9)
    return total.item()


# -- fit results and traces --------------------------------------------------


@dataclass
class FitResult:
    maps: SvbrdfMaps
    latents: LatentState | None
    trace: list                      # rows of (iter, total, pixel, percept)
    final_loss: float
    init_kind: str = ""

    def best_so_far(self) -> np.ndarray:
        """Monotone non-increasing running minimum of the total loss."""
        totals = np.array([row[1] for row in self.trace])
        return np.minimum.accumulate(totals)

    def write_trace(self, path) -> None:
        lines = ["iter,total,pixel,percept"]
        lines += [f"{int(i)},{t:.8g},{p:.8g},{q:.8g}" for i, t, p, q in self.trace]
        Path(path).write_text("\n".join(lines) + "\n")


def write_run_manifest(path, fit_cfg: FitConfig, loss_cfg: LossConfig,
                       result: FitResult, extra: dict | None = None) -> None:
    """Record every hyperparameter, seed, init kind and final loss."""
    payload = {
        "fit": {k: getattr(fit_cfg, k) for k in (
            "strategy", "period", "iterations", "learning_rate", "init",
            "latent_space", "post_refine", "refine_iterations", "seed")},
        "loss": {
            "lambda_pixel": loss_cfg.lambda_pixel,
            "lambda_percept": loss_cfg.lambda_percept,
            "w_plus_layer_weights": list(loss_cfg.w_plus_layer_weights),
            "noise_layer_weights": list(loss_cfg.noise_layer_weights),
            "comparison_space": loss_cfg.comparison_space,
        },
        "init_kind": result.init_kind,
        "final_loss": result.final_loss,
    }
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


# -- direct (per-pixel) fitting ----------------------------------------------


def fit_direct(views: list, init_maps: SvbrdfMaps, fit_cfg: FitConfig,
               loss_cfg: LossConfig | None = None,
               extractor: FeatureExtractor | None = None) -> FitResult:
    """Per-pixel inverse rendering on raw maps (no latent prior).

    Also serves as the post-refinement stage when warm-started from a
    latent fit's decoded maps.
    """
    loss_cfg = loss_cfg or LossConfig()
    raw = Tensor(raw_from_maps(init_maps), requires_grad=True)
    obj = Objective(views, loss_cfg, extractor)
    opt = ad.Adam([raw], lr=fit_cfg.learning_rate)

    best_raw = raw.data.copy()
    best_loss = np.inf
    trace = []
    for it in range(fit_cfg.iterations):
        opt.zero_grad()
        maps9 = apply_range_mapping(raw)
        total, pix, per = obj.evaluate(maps9)
        value = total.item()
        if not np.isfinite(value):
            break  # keep the last good iterate
        trace.append((it, value, pix.item(), per.item()))
        if value < best_loss:
            best_loss = value
            best_raw = raw.data.copy()
        total.backward()
        opt.step()
    final_maps9 = apply_range_mapping(Tensor(best_raw))
    final = total_loss_value(final_maps9, obj)
    if final < best_loss:
        best_loss = final
    return FitResult(maps=maps_from_tensor(final_maps9), latents=None,
                     trace=trace, final_loss=best_loss, init_kind="warm")


def total_loss_value(maps9: Tensor, obj: Objective) -> float:
    total, _, _ = obj.evaluate(Tensor(maps9.data))
    return total.item()


# -- latent-space fitting ----------------------------------------------------


def resolve_init(kind: str, weights: dict, config: GeneratorConfig,
                 init_path=None) -> LatentState:
    """Produce the starting latent state for a fit."""
    if kind == "mean_w":
        w_bar = mean_w(weights, config, num_samples=2000, seed=0)
        return LatentState(replicate(w_bar, config), zero_noise(config))
    if kind == "low_rough":
        path = init_path or default_low_rough_path()
        if not Path(path).exists():
            raise FileNotFoundError(f"low-roughness preset not found: {path}")
        return load_latent_state(path)
    if kind == "file":
        if init_path is None:
            raise ValueError("init 'file' requires init_path")
        return load_latent_state(init_path)
    raise ValueError(f"unknown init kind {kind!r}")


def default_low_rough_path() -> Path:
    return Path(__file__).parent / "assets" / "low_rough_init.fmt"


def save_latent_state(path, state: LatentState) -> None:
    arrays = {"w_plus": state.w_plus}
    for i, xi in enumerate(state.noise):
        arrays[f"noise{i}"] = xi
    ad.save_tensors(path, arrays)


def load_latent_state(path) -> LatentState:
    arrays = ad.load_tensors(path)
    noise = []
    i = 0
    while f"noise{i}" in arrays:
        noise.append(arrays[f"noise{i}"].astype(np.float64))
        i += 1
    return LatentState(arrays["w_plus"].astype(np.float64), noise)


def _phase_for(it: int, fit_cfg: FitConfig) -> str:
    """Active variable set ('w', 'n' or 'wn') for this iteration."""
    if fit_cfg.latent_space == "w_plus_noise":
        if fit_cfg.strategy == "s1":
            return "w" if it < fit_cfg.iterations // 2 else "n"
        if fit_cfg.strategy == "s2":
            return "wn"
        return "w" if (it // fit_cfg.period) % 2 == 0 else "n"
    return "w"


def fit_latent(views: list, weights: dict, config: GeneratorConfig,
               fit_cfg: FitConfig, loss_cfg: LossConfig | None = None,
               extractor: FeatureExtractor | None = None,
               init_state: LatentState | None = None) -> FitResult:
    """Latent-space inverse rendering through the generator.

    With init 'dual', runs once from the mean-latent start and once from
    the low-roughness preset and keeps the lower-loss branch.
    """
    loss_cfg = loss_cfg or LossConfig()
    if fit_cfg.init == "dual" and init_state is None:
        branches = []
        for kind in ("mean_w", "low_rough"):
            sub = replace(fit_cfg, init=kind)
            branches.append(fit_latent(views, weights, config, sub, loss_cfg,
                                       extractor))
        best = min(branches, key=lambda r: r.final_loss)
        return best

    if init_state is None:
        init_state = resolve_init(fit_cfg.init, weights, config,
                                  fit_cfg.init_path)
    init_kind = fit_cfg.init
    dtype = weights["const"].dtype

    tied_w = fit_cfg.latent_space == "w"
    if tied_w:
        w_param = Tensor(init_state.w_plus[:1].reshape(
            1, config.latent_dim, 1, 1).astype(dtype), requires_grad=True,
            dtype=dtype)
    else:
        w_param = Tensor(init_state.w_plus.reshape(
            config.style_slots, config.latent_dim, 1, 1).astype(dtype),
            requires_grad=True, dtype=dtype)
    noise_params = [Tensor(xi.astype(dtype), requires_grad=True, dtype=dtype)
                    for xi in init_state.noise]

    obj = Objective(views, loss_cfg, extractor, dtype=dtype)
    opt_w = ad.Adam([w_param], lr=fit_cfg.learning_rate)
    opt_n = ad.Adam(noise_params, lr=fit_cfg.learning_rate)

    def current_state() -> LatentState:
        if tied_w:
            wp = np.tile(w_param.data.reshape(1, config.latent_dim),
                         (config.style_slots, 1)).astype(np.float64)
        else:
            wp = w_param.data.reshape(config.style_slots,
                                      config.latent_dim).astype(np.float64)
        return LatentState(wp, [xi.data.astype(np.float64)
                                for xi in noise_params])

    def forward() -> Tensor:
        wp = ad.broadcast_batch(w_param, config.style_slots) if tied_w else w_param
        return synthesize(weights, config, wp, noise_params)

    best_state = current_state()
    best_loss = np.inf
    trace = []
    for it in range(fit_cfg.iterations):
        phase = _phase_for(it, fit_cfg)
        lw = (loss_cfg.noise_layer_weights if phase == "n"
              else loss_cfg.w_plus_layer_weights)
        opt_w.zero_grad()
        opt_n.zero_grad()
        maps9 = forward()
        total, pix, per = obj.evaluate(maps9, layer_weights=lw)
        value = total.item()
        if not np.isfinite(value):
            break
        trace.append((it, value, pix.item(), per.item()))
        if value < best_loss:
            best_loss = value
            best_state = current_state()
        total.backward()
        if phase in ("w", "wn"):
            opt_w.step()
        if phase in ("n", "wn") and not tied_w:
            opt_n.step()

    maps9 = synthesize(weights, config, best_state.w_plus, best_state.noise)
    result = FitResult(maps=maps_from_tensor(maps9), latents=best_state,
                       trace=trace, final_loss=best_loss, init_kind=init_kind)
    if fit_cfg.post_refine:
        refine_cfg = replace(fit_cfg, iterations=fit_cfg.refine_iterations)
        refined = fit_direct(views, result.maps, refine_cfg, loss_cfg, extractor)
        result = FitResult(maps=refined.maps, latents=best_state,
                           trace=result.trace + [
                               (len(result.trace) + i, t, p, q)
                               for i, t, p, q in refined.trace],
                           final_loss=min(best_loss, refined.final_loss),
                           init_kind=init_kind)
    return result


# -- map-space embedding -----------------------------------------------------


def embed_maps(target: SvbrdfMaps, weights: dict, config: GeneratorConfig,
               fit_cfg: FitConfig, canonical_view: CaptureView | None = None,
               percept_weight: float = 0.05,
               extractor: FeatureExtractor | None = None) -> FitResult:
    """Project material maps into the chosen latent subset.

    Minimizes map-space L2 plus a small perceptual term on a canonical
    on-axis rendering, which discourages perceptually implausible
    trade-offs between channels.
    """
    target.validate()
    dtype = weights["const"].dtype
    target9 = Tensor(tensor_from_maps(target, dtype), dtype=dtype)
    if canonical_view is None:
        from .render import make_collocated_view
        canonical_view = make_collocated_view(1.0, 3.0, target.height)
    extractor = extractor or FeatureExtractor(dtype=dtype)
    target_render = to_comparison_space(
        render_tensor(target9, canonical_view), "gamma").detach()
    target_feats = [f.detach() for f in extractor.extract(target_render)]

    init_state = resolve_init("mean_w", weights, config)
    tied_w = fit_cfg.latent_space == "w"
    if tied_w:
        w_param = Tensor(init_state.w_plus[:1].reshape(
            1, config.latent_dim, 1, 1).astype(dtype), requires_grad=True,
            dtype=dtype)
    else:
        w_param = Tensor(init_state.w_plus.reshape(
            config.style_slots, config.latent_dim, 1, 1).astype(dtype),
            requires_grad=True, dtype=dtype)
    noise_params = [Tensor(xi.astype(dtype), requires_grad=True, dtype=dtype)
                    for xi in init_state.noise]
    use_noise = fit_cfg.latent_space == "w_plus_noise"

    opt_params = [w_param] + (noise_params if use_noise else [])
    opt = ad.Adam(opt_params, lr=fit_cfg.learning_rate)

    best = None
    best_loss = np.inf
    trace = []
    for it in range(fit_cfg.iterations):
        opt.zero_grad()
        wp = ad.broadcast_batch(w_param, config.style_slots) if tied_w else w_param
        maps9 = synthesize(weights, config, wp, noise_params)
        d = ad.add(maps9, ad.scale(target9, -1.0))
        map_term = ad.mean_all(ad.mul(d, d))
        loss = map_term
        if percept_weight > 0:
            img = to_comparison_space(render_tensor(maps9, canonical_view),
                                      "gamma")
            per = perceptual_loss(extractor.extract(img), target_feats,
                                  W_PLUS_LAYER_WEIGHTS)
            loss = ad.add(loss, ad.scale(per, percept_weight))
        value = loss.item()
        if not np.isfinite(value):
            break
        trace.append((it, value, map_term.item(), value - map_term.item()))
        if value < best_loss:
            best_loss = value
            if tied_w:
                wp_np = np.tile(w_param.data.reshape(1, config.latent_dim),
                                (config.style_slots, 1)).astype(np.float64)
            else:
                wp_np = w_param.data.reshape(
                    config.style_slots, config.latent_dim).astype(np.float64)
            best = LatentState(wp_np, [xi.data.astype(np.float64)
                                       for xi in noise_params])
        loss.backward()
        opt.step()

    maps9 = synthesize(weights, config, best.w_plus, best.noise)
    return FitResult(maps=maps_from_tensor(maps9), latents=best, trace=trace,
                     final_loss=best_loss, init_kind="mean_w")
