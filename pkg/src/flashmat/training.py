"""Desk-scale adversarial training of the material prior.

The training corpus is procedurally synthesized: four texture families
(tiles, stripes, blobs, speckle) with random crops, rotations, flips
and cross-sample blending as augmentation.  The generator/discriminator
pair trains with non-saturating logistic losses plus R1 gradient
regularization on real samples; the R1 term's parameter gradient is
obtained by unrolling the discriminator's input-gradient computation
onto the tape (reverse-over-reverse with activation masks frozen, which
is exact almost everywhere for piecewise-linear activations).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter

from . import autodiff as ad
from .autodiff import Tensor
from .brdf import R_MIN, SvbrdfMaps, decode_normal, project_to_disk
from .generator import (GeneratorConfig, generator_parameters,
                        init_generator_weights, load_generator,
                        mapping_forward, random_noise, save_generator,
                        synthesize, tensor_from_maps)

FAMILIES = ("tiles", "stripes", "blobs", "speckle")


@dataclass
class ProceduralDatasetConfig:
    count: int = 256
    resolution: int = 64
    seed: int = 0
    mix_weights: dict = field(default_factory=lambda: {f: 0.25 for f in FAMILIES})
    crop_min_fraction: float = 0.5
    blend_probability: float = 0.3

    def __post_init__(self):
        total = sum(self.mix_weights.get(f, 0.0) for f in FAMILIES)
        if total <= 0 or any(self.mix_weights.get(f, 0.0) < 0 for f in FAMILIES):
            raise ValueError("mix weights must be non-negative with positive sum")
        self.mix_weights = {f: self.mix_weights.get(f, 0.0) / total
                            for f in FAMILIES}
        if self.resolution & (self.resolution - 1):
            raise ValueError("resolution must be a power of two")


# -- procedural texture families ---------------------------------------------


def _smooth_noise(rng, res, sigma):
    x = gaussian_filter(rng.standard_normal((res, res)), sigma, mode="wrap")
    lo, hi = x.min(), x.max()
    return (x - lo) / max(hi - lo, 1e-9)


def _make_tiles(rng, res) -> SvbrdfMaps:
    nx, ny = rng.integers(2, 6, size=2)
    xs = np.minimum((np.arange(res) * nx) // res, nx - 1)
    ys = np.minimum((np.arange(res) * ny) // res, ny - 1)
    tile_id = ys[:, None] * nx + xs[None, :]
    colors = rng.uniform(0.1, 0.9, (nx * ny, 3))
    roughs = rng.uniform(0.6, 0.8, nx * ny)
    albedo = colors[tile_id]
    roughness = roughs[tile_id]
    specular = np.full((res, res, 3), rng.uniform(0.03, 0.08))
    # Bevel: tilt normals across tile boundaries by one pixel each side.
    amp = rng.uniform(0.2, 0.45)
    normal = np.zeros((res, res, 2))
    for b in range(1, nx):
        col = (b * res) // nx
        if 0 < col < res:
            normal[:, col - 1, 0] += amp
            normal[:, col, 0] -= amp
    for b in range(1, ny):
        row = (b * res) // ny
        if 0 < row < res:
            normal[row - 1, :, 1] -= amp
            normal[row, :, 1] += amp
    return _finalize(albedo, normal, roughness, specular)


def _make_stripes(rng, res) -> SvbrdfMaps:
    angle = rng.integers(0, 12) * np.pi / 6
    period = rng.uniform(6, 16)
    ii, jj = np.meshgrid(np.arange(res), np.arange(res), indexing="ij")
    coord = jj * np.cos(angle) + ii * np.sin(angle)
    phase = np.sin(2 * np.pi * coord / period)
    band = phase > 0
    c1, c2 = rng.uniform(0.1, 0.9, (2, 3))
    albedo = np.where(band[..., None], c1, c2)
    r1, r2 = rng.uniform(0.45, 0.6, 2)
    roughness = np.where(band, r1, r2)
    tilt = rng.uniform(0.05, 0.25)
    normal = np.stack([tilt * phase * np.cos(angle),
                       -tilt * phase * np.sin(angle)], axis=-1)
    specular = np.full((res, res, 3), rng.uniform(0.03, 0.1))
    return _finalize(albedo, normal, roughness, specular)


def _make_blobs(rng, res) -> SvbrdfMaps:
    sigma = rng.uniform(3, 8)
    albedo = np.stack([0.1 + 0.8 * _smooth_noise(rng, res, sigma)
                       for _ in range(3)], axis=-1)
    height = _smooth_noise(rng, res, sigma)
    gy, gx = np.gradient(height)
    slope = rng.uniform(2.0, 6.0)
    normal = project_to_disk(np.stack([-slope * gx, slope * gy], axis=-1) * 0.9)
    roughness = 0.25 + 0.2 * _smooth_noise(rng, res, sigma)
    specular = np.full((res, res, 3), rng.uniform(0.03, 0.06))
    return _finalize(albedo, normal, roughness, specular)


def _make_speckle(rng, res) -> SvbrdfMaps:
    base = rng.uniform(0.15, 0.6, 3)
    albedo = np.tile(base, (res, res, 1))
    roughness = np.full((res, res), rng.uniform(0.75, 0.95))
    specular = np.full((res, res, 3), rng.uniform(0.02, 0.05))
    normal = np.zeros((res, res, 2))
    count = max(4, res * res // 64)
    for _ in range(count):
        i, j = rng.integers(0, res, 2)
        rad = int(rng.integers(1, 3))
        bright = rng.uniform(0.6, 1.0, 3)
        spec = rng.uniform(0.5, 0.9)
        lo_r = rng.uniform(0.1, 0.3)
        sl_i = slice(max(0, i - rad), min(res, i + rad))
        sl_j = slice(max(0, j - rad), min(res, j + rad))
        albedo[sl_i, sl_j] = bright
        specular[sl_i, sl_j] = spec
        roughness[sl_i, sl_j] = lo_r
    return _finalize(albedo, normal, roughness, specular)


def _finalize(albedo, normal, roughness, specular) -> SvbrdfMaps:
    return SvbrdfMaps(
        albedo=np.clip(albedo, 0.0, 1.0),
        normal_xy=project_to_disk(normal),
        roughness=np.clip(roughness, R_MIN, 1.0),
        specular=np.clip(specular, 0.0, 1.0),
    )


_FAMILY_MAKERS = {
    "tiles": _make_tiles,
    "stripes": _make_stripes,
    "blobs": _make_blobs,
    "speckle": _make_speckle,
}


def make_family_sample(family: str, resolution: int,
                       rng: np.random.Generator) -> SvbrdfMaps:
    return _FAMILY_MAKERS[family](rng, resolution)


def generate_procedural_dataset(cfg: ProceduralDatasetConfig) -> list:
    """Deterministic list of SvbrdfMaps drawn from the family mix."""
    rng = np.random.default_rng(cfg.seed)
    names = list(FAMILIES)
    probs = np.array([cfg.mix_weights[f] for f in names])
    out = []
    for _ in range(cfg.count):
        family = names[rng.choice(len(names), p=probs)]
        out.append(make_family_sample(family, cfg.resolution, rng))
    return out


# -- augmentation ------------------------------------------------------------


def _rotate_normals(normal_xy: np.ndarray, k: int) -> np.ndarray:
    """Rotate the vectors to match a k*90-degree CCW image rotation."""
    x, y = normal_xy[..., 0], normal_xy[..., 1]
    for _ in range(k % 4):
        x, y = -y, x
    return np.stack([x, y], axis=-1)


def augment(maps: SvbrdfMaps, seed=None, rotations=None, flip=None,
            crop_fraction=None, blend_with: SvbrdfMaps | None = None,
            blend_weight=None, crop_min_fraction: float = 0.5) -> SvbrdfMaps:
    """Random crop, 90-degree rotation, flip and optional blend.

    Explicit arguments override the seeded random choices; the identity
    augmentation (zero rotation, no flip, full crop, no blend) returns
    the input unchanged.
    """
    rng = np.random.default_rng(seed)
    res = maps.height
    stacked = maps.stack_channels().copy()

    if rotations is None:
        rotations = int(rng.integers(0, 4))
    if flip is None:
        flip = bool(rng.integers(0, 2))
    if crop_fraction is None:
        crop_fraction = float(rng.uniform(crop_min_fraction, 1.0))

    if rotations:
        stacked = np.rot90(stacked, rotations, axes=(0, 1)).copy()
        stacked[..., 3:5] = _rotate_normals(stacked[..., 3:5], rotations)
    if flip:
        stacked = stacked[:, ::-1].copy()
        stacked[..., 3] = -stacked[..., 3]

    size = max(8, int(round(res * crop_fraction)))
    if size < res:
        i0 = int(rng.integers(0, res - size + 1))
        j0 = int(rng.integers(0, res - size + 1))
        crop = stacked[i0:i0 + size, j0:j0 + size]
        stacked = cv2.resize(crop, (res, res), interpolation=cv2.INTER_LINEAR)

    out = SvbrdfMaps.from_channels(stacked)
    if blend_with is not None:
        if blend_weight is None:
            blend_weight = float(rng.uniform(0.3, 0.7))
        w = float(blend_weight)
        other = blend_with
        out.albedo = w * out.albedo + (1 - w) * other.albedo
        out.specular = w * out.specular + (1 - w) * other.specular
        out.roughness = w * out.roughness + (1 - w) * other.roughness
        # Normals blend as decoded 3-vectors, then re-encode.
        n = w * decode_normal(out.normal_xy) + (1 - w) * decode_normal(other.normal_xy)
        n /= np.linalg.norm(n, axis=-1, keepdims=True)
        out.normal_xy = n[..., :2]
    out.normal_xy = project_to_disk(out.normal_xy)
    out.roughness = np.clip(out.roughness, R_MIN, 1.0)
    out.albedo = np.clip(out.albedo, 0.0, 1.0)
    out.specular = np.clip(out.specular, 0.0, 1.0)
    return out


# -- discriminator -----------------------------------------------------------


def discriminator_layer_plan(resolution: int) -> list:
    """Conv layers (channels_in, channels_out, stride) from 9-channel
    input down to a 4x4 feature map."""
    channels = {64: 8, 32: 16, 16: 32, 8: 64, 4: 64}

    def chan(res):
        return channels.get(res, 64 if res < 64 else 8)

    plan = [(9, chan(resolution), 1)]
    res = resolution
    while res > 4:
        plan.append((chan(res), chan(res // 2), 2))
        res //= 2
    plan.append((chan(4), chan(4), 1))
    return plan


def init_discriminator_weights(resolution: int, seed: int = 0,
                               dtype=None) -> dict:
    rng = np.random.default_rng(seed)
    dtype = dtype or ad.DEFAULT_DTYPE
    weights = {}

    def param(name, arr):
        weights[name] = Tensor(arr.astype(dtype), requires_grad=True, dtype=dtype)

    for i, (c_in, c_out, _) in enumerate(discriminator_layer_plan(resolution)):
        fan_in = c_in * 9
        param(f"dconv{i}_w", rng.standard_normal((c_out, c_in, 3, 3))
              / np.sqrt(fan_in))
        param(f"dconv{i}_b", np.zeros((1, c_out, 1, 1)))
    c_last = discriminator_layer_plan(resolution)[-1][1]
    feat = c_last * 16
    param("dfc_w", rng.standard_normal((1, feat, 1, 1)) / np.sqrt(feat))
    param("dfc_b", np.zeros((1, 1, 1, 1)))
    return weights


def discriminator_parameters(weights: dict) -> list:
    return [weights[k] for k in sorted(weights)]


def disc_forward(weights: dict, plan: list, x: Tensor):
    """Returns (logits (B,1,1,1), cache) where the cache carries what the
    fused R1 routine needs: per-layer input shapes and activation masks."""
    cache = []
    h = x
    for i, (_, _, stride) in enumerate(plan):
        pre = ad.conv2d(h, weights[f"dconv{i}_w"], weights[f"dconv{i}_b"],
                        stride=stride)
        cache.append({"index": i, "stride": stride, "in_shape": h.shape,
                      "mask": pre.data > 0})
        h = ad.leaky_relu(pre, 0.2)
    b = h.shape[0]
    flat = ad.reshape(h, (b, h.data.size // b, 1, 1))
    logits = ad.linear(flat, weights["dfc_w"], weights["dfc_b"])
    cache_final = {"feat_shape": h.shape}
    return logits, (cache, cache_final)


def input_gradient_graph(weights: dict, cache, batch: int) -> Tensor:
    """Build, on the tape, the gradient of each logit with respect to its
    input sample (activation masks held fixed).

    Differentiating the result with respect to the discriminator weights
    gives the R1 parameter gradient without second-order support in the
    engine.
    """
    layer_cache, cache_final = cache
    feat_shape = cache_final["feat_shape"]
    slope = 0.2
    a = ad.broadcast_batch(ad.reshape(weights["dfc_w"],
                                      (1,) + feat_shape[1:]), batch)
    for entry in reversed(layer_cache):
        deriv = np.where(entry["mask"], 1.0, slope)
        a = ad.mul(a, Tensor(deriv.astype(a.dtype), dtype=a.dtype))
        a = ad.conv2d_input_grad(a, weights[f"dconv{entry['index']}_w"],
                                 entry["in_shape"], stride=entry["stride"])
    return a


def r1_penalty(weights: dict, plan: list, real: np.ndarray):
    """Fused R1: mean over the batch of the squared input-gradient norm,
    as a differentiable scalar, plus the real logits for reuse."""
    x = Tensor(real)
    logits, cache = disc_forward(weights, plan, x)
    g = input_gradient_graph(weights, cache, real.shape[0])
    r1 = ad.scale(ad.sum_all(ad.mul(g, g)), 1.0 / real.shape[0])
    return r1, logits


def _clip_gradients(params: list, max_norm: float) -> None:
    """Rescale gradients in place so their global L2 norm is at most
    max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= np.asarray(scale, dtype=p.grad.dtype)


def _moment_mismatch(fake: Tensor, real: np.ndarray) -> Tensor:
    """Squared distance between per-channel batch statistics (mean and
    standard deviation) of the fake batch and a real batch."""
    axes = (0, 2, 3)
    mu_f = ad.mean_axes(fake, axes)
    centered = ad.add(fake, ad.scale(mu_f, -1.0))
    sd_f = ad.sqrt(ad.mean_axes(ad.mul(centered, centered), axes), 1e-8)
    mu_r = real.mean(axis=axes, keepdims=True)
    sd_r = real.std(axis=axes, keepdims=True)
    d_mu = ad.add(mu_f, Tensor(-mu_r.astype(fake.dtype), dtype=fake.dtype))
    d_sd = ad.add(sd_f, Tensor(-sd_r.astype(fake.dtype), dtype=fake.dtype))
    return ad.add(ad.sum_all(ad.mul(d_mu, d_mu)),
                  ad.sum_all(ad.mul(d_sd, d_sd)))


# -- GAN training ------------------------------------------------------------


@dataclass
class TrainConfig:
    dataset: ProceduralDatasetConfig = field(default_factory=ProceduralDatasetConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    steps: int = 20000
    batch_size: int = 4
    learning_rate: float = 0.002
    beta1: float = 0.0
    beta2: float = 0.99
    r1_gamma: float = 10.0
    # The discriminator trains slower than the generator; with a
    # miniature generator and structured procedural reals, equal rates
    # let the discriminator run away early.
    d_lr_scale: float = 0.25
    # Instance noise: Gaussian perturbation added to both real and fake
    # discriminator inputs, annealed linearly to zero over the run.
    # Keeps the real/fake supports overlapping so the discriminator
    # cannot separate them perfectly early on.
    instance_noise: float = 0.15
    # Weight of the auxiliary moment-matching term in the generator
    # loss: per-channel batch mean/std of the fakes are pulled toward
    # the real batch's.  Anchors the output distribution so the
    # adversarial gradient cannot push the range-mapped channels into
    # saturation, which is the failure mode of tiny GANs at this scale.
    moment_weight: float = 5.0
    # Global-norm clip applied to the generator gradient each step; a
    # sudden discriminator improvement otherwise produces one huge Adam
    # step that saturates the output nonlinearities for good.
    g_clip_norm: float = 1.0
    checkpoint_every: int = 1000
    seed: int = 0
    out_dir: str = "train_out"


class GanTrainer:
    """Alternating generator/discriminator optimization with seeded,
    bit-reproducible state."""

    def __init__(self, cfg: TrainConfig):
        if cfg.generator.resolution != cfg.dataset.resolution:
            raise ValueError("generator and dataset resolutions must agree")
        self.cfg = cfg
        self.gen_weights = init_generator_weights(cfg.generator, seed=cfg.seed)
        self.plan = discriminator_layer_plan(cfg.generator.resolution)
        self.disc_weights = init_discriminator_weights(
            cfg.generator.resolution, seed=cfg.seed + 1)
        self.opt_g = ad.Adam(generator_parameters(self.gen_weights),
                             lr=cfg.learning_rate, beta1=cfg.beta1,
                             beta2=cfg.beta2)
        self.opt_d = ad.Adam(discriminator_parameters(self.disc_weights),
                             lr=cfg.learning_rate * cfg.d_lr_scale,
                             beta1=cfg.beta1, beta2=cfg.beta2)
        self.rng = np.random.default_rng(cfg.seed + 2)
        self.step_count = 0
        self.dataset = generate_procedural_dataset(cfg.dataset)

    def _real_batch(self) -> np.ndarray:
        batch = []
        for _ in range(self.cfg.batch_size):
            idx = int(self.rng.integers(0, len(self.dataset)))
            sample = self.dataset[idx]
            other = None
            if self.rng.uniform() < self.cfg.dataset.blend_probability:
                other = self.dataset[int(self.rng.integers(0, len(self.dataset)))]
            seed = int(self.rng.integers(0, 2 ** 31))
            aug = augment(sample, seed=seed, blend_with=other,
                          crop_min_fraction=self.cfg.dataset.crop_min_fraction)
            batch.append(tensor_from_maps(aug)[0])
        return np.stack(batch)

    def _fake_batch(self, record: bool):
        cfg = self.cfg.generator
        outs = []
        for _ in range(self.cfg.batch_size):
            z = self.rng.standard_normal(cfg.latent_dim)
            noise = random_noise(cfg, self.rng)
            w = mapping_forward(self.gen_weights, cfg, z)
            w_plus = ad.broadcast_batch(
                ad.reshape(w, (1, cfg.latent_dim, 1, 1)), cfg.style_slots)
            outs.append(synthesize(self.gen_weights, cfg, w_plus, noise))
        stacked = ad.concat_batch(outs)
        return stacked if record else Tensor(stacked.data.copy())

    def _noise_sigma(self) -> float:
        frac = min(1.0, self.step_count / max(1, self.cfg.steps))
        return self.cfg.instance_noise * (1.0 - frac)

    def train_step(self) -> dict:
        """One alternating update; returns scalar logs."""
        cfg = self.cfg
        real_clean = self._real_batch().astype(ad.DEFAULT_DTYPE)
        sigma = self._noise_sigma()
        real = real_clean
        if sigma > 0:
            real = real_clean + sigma * self.rng.standard_normal(
                real_clean.shape).astype(ad.DEFAULT_DTYPE)

        # Generator update: softplus(-D(fake)) plus moment matching.
        self.opt_g.zero_grad()
        fake_clean = self._fake_batch(record=True)
        fake = fake_clean
        if sigma > 0:
            jitter = Tensor(sigma * self.rng.standard_normal(
                fake.shape).astype(fake.dtype), dtype=fake.dtype)
            fake = ad.add(fake_clean, jitter)
        logits, _ = disc_forward(self.disc_weights, self.plan, fake)
        loss_g = ad.mean_all(ad.softplus(ad.scale(logits, -1.0)))
        if cfg.moment_weight > 0:
            loss_g = ad.add(loss_g, ad.scale(
                _moment_mismatch(fake_clean, real_clean), cfg.moment_weight))
        g_value = loss_g.item()
        loss_g.backward()
        # Only generator parameters step here; discriminator grads from
        # this graph are discarded.
        self.opt_d.zero_grad()
        if cfg.g_clip_norm > 0:
            _clip_gradients(self.opt_g.params, cfg.g_clip_norm)
        self.opt_g.step()

        # Discriminator update: softplus(D(fake)) + softplus(-D(real))
        # + gamma/2 * R1.
        self.opt_d.zero_grad()
        self.opt_g.zero_grad()
        fake_const = self._fake_batch(record=False)
        if sigma > 0:
            fake_const = Tensor(
                fake_const.data + sigma * self.rng.standard_normal(
                    fake_const.shape).astype(fake_const.dtype))
        fake_logits, _ = disc_forward(self.disc_weights, self.plan, fake_const)
        r1, real_logits = r1_penalty(self.disc_weights, self.plan, real)
        loss_d = ad.add(
            ad.add(ad.mean_all(ad.softplus(fake_logits)),
                   ad.mean_all(ad.softplus(ad.scale(real_logits, -1.0)))),
            ad.scale(r1, cfg.r1_gamma / 2.0))
        d_value = loss_d.item()
        r1_value = r1.item()
        if not (np.isfinite(g_value) and np.isfinite(d_value)):
            raise RuntimeError(
                f"non-finite loss at step {self.step_count}: "
                f"loss_g={g_value}, loss_d={d_value}, r1={r1_value}")
        loss_d.backward()
        self.opt_d.step()

        self.step_count += 1
        return {"step": self.step_count, "loss_g": g_value,
                "loss_d": d_value, "r1": r1_value}

    # -- checkpointing -------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        save_generator(path / "generator.fmt", self.gen_weights,
                       self.cfg.generator)
        ad.save_tensors(path / "discriminator.fmt",
                        {k: v.data for k, v in self.disc_weights.items()})
        ad.save_tensors(path / "opt_g.fmt", self.opt_g.state_arrays())
        ad.save_tensors(path / "opt_d.fmt", self.opt_d.state_arrays())
        state = {"step": self.step_count,
                 "rng_state": self.rng.bit_generator.state}
        (path / "state.json").write_text(json.dumps(state))

    def load_checkpoint(self, path) -> None:
        path = Path(path)
        gen_weights, _ = load_generator(path / "generator.fmt")
        for k, v in gen_weights.items():
            self.gen_weights[k].data[...] = v.data
        for k, v in ad.load_tensors(path / "discriminator.fmt").items():
            self.disc_weights[k].data[...] = v.astype(ad.DEFAULT_DTYPE)
        self.opt_g.load_state_arrays(ad.load_tensors(path / "opt_g.fmt"))
        self.opt_d.load_state_arrays(ad.load_tensors(path / "opt_d.fmt"))
        state = json.loads((path / "state.json").read_text())
        self.step_count = state["step"]
        self.rng.bit_generator.state = state["rng_state"]


def train(cfg: TrainConfig, log_every: int = 50,
          progress: bool = False) -> dict:
    """Full training loop; writes checkpoints and a metrics file and
    returns the trained generator weights."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = GanTrainer(cfg)
    metrics_path = out / "metrics.csv"
    if not metrics_path.exists():
        metrics_path.write_text("step,loss_g,loss_d,r1\n")
    with open(metrics_path, "a") as metrics:
        for _ in range(cfg.steps):
            logs = trainer.train_step()
            if logs["step"] % log_every == 0 or logs["step"] == 1:
                metrics.write(f"{logs['step']},{logs['loss_g']:.6g},"
                              f"{logs['loss_d']:.6g},{logs['r1']:.6g}\n")
                metrics.flush()
                if progress:
                    print(f"step {logs['step']}: g={logs['loss_g']:.4f} "
                          f"d={logs['loss_d']:.4f} r1={logs['r1']:.4f}",
                          flush=True)
            if logs["step"] % cfg.checkpoint_every == 0:
                trainer.save_checkpoint(out / "checkpoint")
    trainer.save_checkpoint(out / "checkpoint")
    return trainer.gen_weights
