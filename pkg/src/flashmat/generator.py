"""Style-based generative material prior.

A miniature style-mapping + synthesis network that decodes latents into
9-channel SVBRDF maps: a mapping MLP turns a Gaussian latent z into an
intermediate latent w; a per-layer style matrix w+ (one column per conv
layer) modulates demodulated convolutions that progressively upsample a
learned constant; single-channel noise maps are injected at every layer.
Output channels are squashed into valid material ranges, so every
decoded map satisfies the SvbrdfMaps invariants by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .brdf import R_MIN, SvbrdfMaps, project_to_disk

# tanh output scale for the normal channels; 0.7 * sqrt(2) < 1 keeps
# every pixel strictly inside the unit disk, so the decode stays smooth.
NORMAL_SCALE = 0.7


@dataclass
class GeneratorConfig:
    latent_dim: int = 128
    base_resolution: int = 4
    num_blocks: int = 5
    mapping_depth: int = 4
    channel_schedule: tuple = ()
    out_channels: int = 9

    def __post_init__(self):
        if not self.channel_schedule:
            # Halve channels as resolution doubles, floor at 16.
            top = self.latent_dim
            sched = [min(top, max(16, top >> max(0, b - 1)))
                     for b in range(self.num_blocks)]
            self.channel_schedule = tuple(sched)
        if len(self.channel_schedule) != self.num_blocks:
            raise ValueError("channel schedule length must equal num_blocks")

    @property
    def style_slots(self) -> int:
        return 2 * self.num_blocks

    @property
    def resolution(self) -> int:
        return self.base_resolution * 2 ** (self.num_blocks - 1)

    def layer_resolution(self, layer: int) -> int:
        return self.base_resolution * 2 ** (layer // 2)

    def to_dict(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "base_resolution": self.base_resolution,
            "num_blocks": self.num_blocks,
            "mapping_depth": self.mapping_depth,
            "channel_schedule": list(self.channel_schedule),
            "out_channels": self.out_channels,
        }

    @staticmethod
    def from_dict(d: dict) -> "GeneratorConfig":
        d = dict(d)
        d["channel_schedule"] = tuple(d.get("channel_schedule", ()))
        return GeneratorConfig(**d)


@dataclass
class LatentState:
    """Optimization variables: style matrix w+ plus per-layer noise."""

    w_plus: np.ndarray          # (style_slots, latent_dim)
    noise: list                  # per layer: (1, 1, res, res)

    def validate(self, config: GeneratorConfig) -> None:
        if self.w_plus.shape != (config.style_slots, config.latent_dim):
            raise ValueError(
                f"w_plus shape {self.w_plus.shape} does not match "
                f"({config.style_slots}, {config.latent_dim})")
        if len(self.noise) != config.style_slots:
            raise ValueError("one noise map per style slot is required")
        for layer, xi in enumerate(self.noise):
            res = config.layer_resolution(layer)
            if xi.shape != (1, 1, res, res):
                raise ValueError(
                    f"noise map {layer} has shape {xi.shape}, expected "
                    f"(1, 1, {res}, {res})")

    def copy(self) -> "LatentState":
        return LatentState(self.w_plus.copy(), [xi.copy() for xi in self.noise])


def zero_noise(config: GeneratorConfig) -> list:
    return [np.zeros((1, 1, config.layer_resolution(l), config.layer_resolution(l)),
                     dtype=np.float64)
            for l in range(config.style_slots)]


def random_noise(config: GeneratorConfig, rng: np.random.Generator) -> list:
    return [rng.standard_normal(
        (1, 1, config.layer_resolution(l), config.layer_resolution(l)))
        for l in range(config.style_slots)]


def _layer_in_channels(config: GeneratorConfig, layer: int) -> int:
    block = layer // 2
    if layer % 2 == 1:
        return config.channel_schedule[block]
    return config.channel_schedule[max(0, block - 1)] if block > 0 \
        else config.channel_schedule[0]


def init_generator_weights(config: GeneratorConfig, seed: int = 0,
                           dtype=None) -> dict:
    """Fresh, untrained generator parameters as named tensors."""
    rng = np.random.default_rng(seed)
    dtype = dtype or ad.DEFAULT_DTYPE
    weights: dict[str, Tensor] = {}

    def param(name, arr):
        weights[name] = Tensor(arr.astype(dtype), requires_grad=True, dtype=dtype)

    d = config.latent_dim
    for i in range(config.mapping_depth):
        param(f"map{i}_w", rng.standard_normal((d, d, 1, 1)) / np.sqrt(d))
        param(f"map{i}_b", np.zeros((1, d, 1, 1)))

    c0 = config.channel_schedule[0]
    param("const", rng.standard_normal((1, c0, config.base_resolution,
                                        config.base_resolution)))
    for layer in range(config.style_slots):
        c_in = _layer_in_channels(config, layer)
        c_out = config.channel_schedule[layer // 2]
        fan_in = c_in * 9
        param(f"conv{layer}_w",
              rng.standard_normal((c_out, c_in, 3, 3)) / np.sqrt(fan_in))
        param(f"conv{layer}_b", np.zeros((1, c_out, 1, 1)))
        param(f"style{layer}_w",
              rng.standard_normal((c_in, d, 1, 1)) / np.sqrt(d))
        param(f"style{layer}_b", np.ones((1, c_in, 1, 1)))
        param(f"noise_gain{layer}", np.full((1, 1, 1, 1), 0.1))
    c_last = config.channel_schedule[-1]
    param("out_w", rng.standard_normal((config.out_channels, c_last, 1, 1))
          / np.sqrt(c_last))
    param("out_b", np.zeros((1, config.out_channels, 1, 1)))
    return weights


def generator_parameters(weights: dict) -> list:
    return [weights[k] for k in sorted(weights)]


def save_generator(path, weights: dict, config: GeneratorConfig) -> None:
    """Weights go into the named-tensor container; the config into a
    sidecar text manifest."""
    ad.save_tensors(path, {k: v.data for k, v in weights.items()})
    Path(str(path) + ".json").write_text(json.dumps(config.to_dict(), indent=2))


def default_prior_path() -> Path:
    """Location of the pre-trained desk-scale prior shipped with the
    package."""
    return Path(__file__).parent / "assets" / "prior64" / "generator.fmt"


def load_generator(path, dtype=None) -> tuple[dict, GeneratorConfig]:
    config = GeneratorConfig.from_dict(
        json.loads(Path(str(path) + ".json").read_text()))
    dtype = dtype or ad.DEFAULT_DTYPE
    arrays = ad.load_tensors(path)
    weights = {k: Tensor(v.astype(dtype), requires_grad=True, dtype=dtype)
               for k, v in arrays.items()}
    return weights, config


# -- forward passes ----------------------------------------------------------


def _as_latent_tensor(z, dim, dtype) -> Tensor:
    if isinstance(z, Tensor):
        return z
    z = np.asarray(z, dtype=dtype)
    if z.ndim == 1:
        z = z.reshape(1, dim, 1, 1)
    elif z.ndim == 2:
        z = z.reshape(z.shape[0], dim, 1, 1)
    return Tensor(z, dtype=dtype)


def mapping_forward(weights: dict, config: GeneratorConfig, z) -> Tensor:
    """Map latent z (vector or batch of vectors) to intermediate w."""
    x = _as_latent_tensor(z, config.latent_dim, weights["const"].dtype)
    x = ad.normalize_2nd_moment(x)
    for i in range(config.mapping_depth):
        x = ad.linear(x, weights[f"map{i}_w"], weights[f"map{i}_b"])
        x = ad.leaky_relu(x, 0.2)
    return x


def replicate(w, config: GeneratorConfig) -> np.ndarray:
    """Tile one intermediate latent into a full style matrix."""
    w = w.data if isinstance(w, Tensor) else np.asarray(w)
    w = w.reshape(-1)[:config.latent_dim]
    return np.tile(w[None, :], (config.style_slots, 1))


def synthesize(weights: dict, config: GeneratorConfig, w_plus, noise) -> Tensor:
    """Run the synthesis stack; returns a (1, 9, H, W) map tensor.

    w_plus may be a (slots, dim) array or a (slots, dim, 1, 1) Tensor
    (for optimization); noise entries likewise arrays or Tensors.
    """
    dtype = weights["const"].dtype
    if not isinstance(w_plus, Tensor):
        w_plus = Tensor(np.asarray(w_plus, dtype=dtype).reshape(
            config.style_slots, config.latent_dim, 1, 1), dtype=dtype)
    if w_plus.shape[0] != config.style_slots:
        raise ValueError(
            f"w_plus has {w_plus.shape[0]} columns, expected {config.style_slots}")
    noise_t = []
    for layer, xi in enumerate(noise):
        if not isinstance(xi, Tensor):
            xi = Tensor(np.asarray(xi, dtype=dtype).reshape(
                1, 1, config.layer_resolution(layer),
                config.layer_resolution(layer)), dtype=dtype)
        noise_t.append(xi)
    if len(noise_t) != config.style_slots:
        raise ValueError("one noise map per layer is required")

    x = weights["const"]
    for layer in range(config.style_slots):
        if layer % 2 == 0 and layer > 0:
            x = ad.upsample2x(x)
        w_col = ad.reshape(ad.slice_batch(w_plus, layer, layer + 1),
                           (1, config.latent_dim, 1, 1))
        style = ad.linear(w_col, weights[f"style{layer}_w"],
                          weights[f"style{layer}_b"])
        x = ad.modulated_conv2d(x, weights[f"conv{layer}_w"], style)
        x = ad.add_noise(x, noise_t[layer], weights[f"noise_gain{layer}"])
        x = ad.add(x, weights[f"conv{layer}_b"])
        x = ad.leaky_relu(x, 0.2)

    raw = ad.conv2d(x, weights["out_w"], weights["out_b"])
    return apply_range_mapping(raw)


def apply_range_mapping(raw: Tensor) -> Tensor:
    """Squash raw 9-channel activations into valid material ranges.

    Smooth and total: sigmoid for albedo/specular, scaled tanh for the
    normal channels (strictly inside the unit disk), sigmoid rescaled to
    [r_min, 1] for roughness.
    """
    albedo = ad.sigmoid(ad.slice_channels(raw, 0, 3))
    normal = ad.scale(ad.tanh(ad.slice_channels(raw, 3, 5)), NORMAL_SCALE)
    rough = ad.shift(ad.scale(ad.sigmoid(ad.slice_channels(raw, 5, 6)),
                              1.0 - R_MIN), R_MIN)
    spec = ad.sigmoid(ad.slice_channels(raw, 6, 9))
    return ad.concat_channels([albedo, normal, rough, spec])


def raw_from_maps(maps: SvbrdfMaps, dtype=None) -> np.ndarray:
    """Invert apply_range_mapping; pseudo-inverse at the range bounds."""
    def logit(p):
        p = np.clip(p, 1e-5, 1.0 - 1e-5)
        return np.log(p / (1.0 - p))

    albedo = logit(maps.albedo)
    n = np.clip(maps.normal_xy / NORMAL_SCALE, -0.999, 0.999)
    normal = np.arctanh(n)
    rough = logit((np.clip(maps.roughness, R_MIN, 1.0) - R_MIN) / (1.0 - R_MIN))
    spec = logit(maps.specular)
    hwc = np.concatenate([albedo, normal, rough[..., None], spec], axis=-1)
    chw = np.transpose(hwc, (2, 0, 1))[None]
    return chw.astype(dtype or ad.DEFAULT_DTYPE)


def maps_from_tensor(t) -> SvbrdfMaps:
    """Convert a (1, 9, H, W) map tensor/array to an SvbrdfMaps."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    hwc = np.transpose(data[0].astype(np.float64), (1, 2, 0))
    maps = SvbrdfMaps.from_channels(hwc)
    maps.normal_xy = project_to_disk(maps.normal_xy)
    maps.roughness = np.clip(maps.roughness, R_MIN, 1.0)
    maps.albedo = np.clip(maps.albedo, 0.0, 1.0)
    maps.specular = np.clip(maps.specular, 0.0, 1.0)
    return maps


def tensor_from_maps(maps: SvbrdfMaps, dtype=None) -> np.ndarray:
    """(1, 9, H, W) array view of an SvbrdfMaps."""
    chw = np.transpose(maps.stack_channels(), (2, 0, 1))[None]
    return chw.astype(dtype or ad.DEFAULT_DTYPE)


def sample_material(weights: dict, config: GeneratorConfig,
                    seed: int) -> tuple[SvbrdfMaps, LatentState]:
    """Draw z and noise from a seeded PRNG and decode them."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(config.latent_dim)
    noise = random_noise(config, rng)
    w = mapping_forward(weights, config, z)
    w_plus = replicate(w, config)
    maps_t = synthesize(weights, config, w_plus, noise)
    return maps_from_tensor(maps_t), LatentState(w_plus, noise)


def mean_w(weights: dict, config: GeneratorConfig, num_samples: int = 10000,
           seed: int = 0) -> np.ndarray:
    """Monte-Carlo average of the mapping network's output."""
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    rng = np.random.default_rng(seed)
    total = np.zeros(config.latent_dim, dtype=np.float64)
    batch = 256
    done = 0
    while done < num_samples:
        n = min(batch, num_samples - done)
        z = rng.standard_normal((n, config.latent_dim))
        w = mapping_forward(weights, config, z)
        total += w.data.reshape(n, config.latent_dim).sum(axis=0)
        done += n
    return total / num_samples


def lerp_latent(a: LatentState, b: LatentState, t: float) -> LatentState:
    """Element-wise linear interpolation of both latent components."""
    if a.w_plus.shape != b.w_plus.shape or len(a.noise) != len(b.noise):
        raise ValueError("latent states have mismatched shapes")
    return LatentState(
        (1.0 - t) * a.w_plus + t * b.w_plus,
        [(1.0 - t) * xa + t * xb for xa, xb in zip(a.noise, b.noise)],
    )
