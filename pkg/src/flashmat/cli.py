"""Command-line interface.

Subcommands cover the full pipeline: procedural dataset generation,
prior training, sampling, synthetic capture rendering, inverse-rendering
fits (latent or per-pixel), map embedding, latent morphing and
evaluation.  Every fit writes a run manifest recording its
hyperparameters and final loss next to its outputs.

Exit codes: 0 on success, 1 on a runtime failure, 2 on bad usage.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import capture, evaluate, training
from .generator import (GeneratorConfig, default_prior_path, load_generator,
                        sample_material, save_generator)
from .inversion import (FitConfig, LossConfig, embed_maps, fit_direct,
                        fit_latent, load_latent_state, save_latent_state,
                        write_run_manifest)
from .render import grid_offsets_3x3, make_collocated_view, render


def _load_prior(path):
    path = Path(path) if path else default_prior_path()
    if not path.exists():
        raise FileNotFoundError(
            f"prior checkpoint not found: {path} "
            "(train one with `flashmat train-prior` or pass --prior)")
    return load_generator(path)


def _constant_init_maps(resolution: int):
    from .brdf import SvbrdfMaps
    return SvbrdfMaps.constant(resolution, resolution)


# -- subcommand implementations ----------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = training.ProceduralDatasetConfig(
        count=args.count, resolution=args.resolution, seed=args.seed)
    out = Path(args.out)
    samples = training.generate_procedural_dataset(cfg)
    for i, maps in enumerate(samples):
        capture.save_maps(out / f"material{i:04d}", maps)
    (out / "dataset.json").write_text(json.dumps({
        "count": cfg.count, "resolution": cfg.resolution, "seed": cfg.seed,
    }, indent=2))
    print(f"wrote {len(samples)} materials to {out}")
    return 0


def cmd_train_prior(args) -> int:
    gcfg = GeneratorConfig(latent_dim=args.latent_dim, num_blocks=args.blocks)
    cfg = training.TrainConfig(
        dataset=training.ProceduralDatasetConfig(
            count=args.dataset_size, resolution=gcfg.resolution,
            seed=args.seed),
        generator=gcfg, steps=args.steps, batch_size=args.batch_size,
        r1_gamma=args.r1_gamma, learning_rate=args.lr,
        checkpoint_every=args.checkpoint_every, seed=args.seed,
        out_dir=args.out)
    trainer = training.GanTrainer(cfg)
    if args.resume:
        trainer.load_checkpoint(Path(args.out) / "checkpoint")
        print(f"resumed from step {trainer.step_count}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    if not metrics_path.exists():
        metrics_path.write_text("step,loss_g,loss_d,r1\n")
    with open(metrics_path, "a") as metrics:
        while trainer.step_count < cfg.steps:
            logs = trainer.train_step()
            if logs["step"] % args.log_every == 0 or logs["step"] == 1:
                metrics.write(f"{logs['step']},{logs['loss_g']:.6g},"
                              f"{logs['loss_d']:.6g},{logs['r1']:.6g}\n")
                metrics.flush()
                print(f"step {logs['step']}: g={logs['loss_g']:.4f} "
                      f"d={logs['loss_d']:.4f} r1={logs['r1']:.4f}",
                      flush=True)
            if logs["step"] % cfg.checkpoint_every == 0:
                trainer.save_checkpoint(out / "checkpoint")
    trainer.save_checkpoint(out / "checkpoint")
    save_generator(out / "generator.fmt", trainer.gen_weights, gcfg)
    print(f"trained prior written to {out / 'generator.fmt'}")
    return 0


def cmd_sample(args) -> int:
    weights, config = _load_prior(args.prior)
    maps, state = sample_material(weights, config, args.seed)
    out = Path(args.out)
    capture.save_maps(out, maps)
    save_latent_state(out / "latent.fmt", state)
    print(f"sampled material (seed {args.seed}) written to {out}")
    return 0


def cmd_render(args) -> int:
    maps = capture.load_maps(args.maps)
    out = Path(args.out)
    if args.grid:
        offsets = grid_offsets_3x3(args.extent)
    else:
        offsets = [(args.offset[0], args.offset[1])]
    views = []
    for off in offsets:
        view = make_collocated_view(args.distance, args.intensity,
                                    maps.height, offset_xy=off)
        view.image = render(maps, view)
        views.append(view)
    manifest = capture.save_capture_views(out, views)
    print(f"rendered {len(views)} view(s); manifest at {manifest}")
    return 0


def cmd_fit(args) -> int:
    views = capture.load_capture_views(args.capture)
    if args.views is not None:
        if not 1 <= args.views <= len(views):
            raise ValueError(
                f"--views must be in 1..{len(views)} for this capture")
        views = views[:args.views]
    loss_cfg = LossConfig()
    fit_cfg = FitConfig(strategy=args.strategy, iterations=args.iters,
                        init=args.init, init_path=args.init_path,
                        latent_space=args.space, post_refine=args.refine,
                        seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.direct:
        resolution = views[0].shape[0]
        result = fit_direct(views, _constant_init_maps(resolution), fit_cfg,
                            loss_cfg)
    else:
        weights, config = _load_prior(args.prior)
        if views[0].shape[0] != config.resolution:
            raise ValueError(
                f"capture resolution {views[0].shape[0]} does not match "
                f"prior resolution {config.resolution}")
        result = fit_latent(views, weights, config, fit_cfg, loss_cfg)
        save_latent_state(out / "latent.fmt", result.latents)
    capture.save_maps(out, result.maps)
    result.write_trace(out / "trace.csv")
    write_run_manifest(out / "run.json", fit_cfg, loss_cfg, result,
                       extra={"views": len(views), "direct": args.direct})
    print(f"fit finished: final loss {result.final_loss:.6g}; "
          f"outputs in {out}")
    return 0


def cmd_embed(args) -> int:
    maps = capture.load_maps(args.maps)
    weights, config = _load_prior(args.prior)
    if maps.height != config.resolution:
        raise ValueError(
            f"map resolution {maps.height} does not match prior "
            f"resolution {config.resolution}")
    fit_cfg = FitConfig(iterations=args.iters, latent_space=args.space,
                        seed=args.seed)
    result = embed_maps(maps, weights, config, fit_cfg)
    save_latent_state(args.out, result.latents)
    print(f"embedded {args.maps} -> {args.out} "
          f"(final loss {result.final_loss:.6g})")
    return 0


def cmd_morph(args) -> int:
    weights, config = _load_prior(args.prior)
    state_a = load_latent_state(args.latent_a)
    state_b = load_latent_state(args.latent_b)
    frames = evaluate.morph(weights, config, state_a, state_b, args.frames)
    out = Path(args.out)
    for i, maps in enumerate(frames):
        capture.save_maps(out / f"frame{i:03d}", maps)
    print(f"wrote {len(frames)} morph frames to {out}")
    return 0


def cmd_eval(args) -> int:
    maps = capture.load_maps(args.maps)
    fit_views = capture.load_capture_views(args.capture) if args.capture else []
    novel_views = capture.load_capture_views(args.novel) if args.novel else []
    reference = capture.load_maps(args.reference) if args.reference else None
    report = evaluate.eval_fit(maps, fit_views, novel_views, reference)
    for line in report.lines():
        print(line)
    if args.out:
        report.save(args.out)
    return 0


# -- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flashmat",
        description="SVBRDF capture from flash photographs via a "
                    "generative material prior")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a procedural material dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=256)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-prior", help="train the generative prior")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--latent-dim", type=int, default=128)
    p.add_argument("--blocks", type=int, default=5)
    p.add_argument("--dataset-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=0.002)
    p.add_argument("--r1-gamma", type=float, default=10.0)
    p.add_argument("--checkpoint-every", type=int, default=200)
    p.add_argument("--log-every", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train_prior)

    p = sub.add_parser("sample", help="decode a random material from the prior")
    p.add_argument("--out", required=True)
    p.add_argument("--prior", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("render", help="render maps under flash lighting")
    p.add_argument("--maps", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--distance", type=float, default=1.0)
    p.add_argument("--intensity", type=float, default=3.0)
    p.add_argument("--offset", type=float, nargs=2, default=(0.0, 0.0))
    p.add_argument("--grid", action="store_true",
                   help="render the full 3x3 highlight grid")
    p.add_argument("--extent", type=float, default=0.35)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("fit", help="recover maps from a capture manifest")
    p.add_argument("--capture", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prior", default=None)
    p.add_argument("--strategy", choices=("s1", "s2", "s3"), default="s3")
    p.add_argument("--init", choices=("mean_w", "low_rough", "dual", "file"),
                   default="dual")
    p.add_argument("--init-path", default=None)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--views", type=int, default=None,
                   help="use only the first K views of the capture")
    p.add_argument("--space", choices=("w", "w_plus", "w_plus_noise"),
                   default="w_plus_noise")
    p.add_argument("--direct", action="store_true",
                   help="per-pixel fit without the latent prior")
    p.add_argument("--refine", action="store_true",
                   help="per-pixel refinement after the latent fit")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("embed", help="project existing maps into the prior")
    p.add_argument("--maps", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prior", default=None)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--space", choices=("w", "w_plus", "w_plus_noise"),
                   default="w_plus_noise")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("morph", help="interpolate between two fitted latents")
    p.add_argument("--latent-a", required=True)
    p.add_argument("--latent-b", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prior", default=None)
    p.add_argument("--frames", type=int, default=8)
    p.set_defaults(func=cmd_morph)

    p = sub.add_parser("eval", help="score recovered maps")
    p.add_argument("--maps", required=True)
    p.add_argument("--capture", default=None,
                   help="manifest of the views used for fitting")
    p.add_argument("--novel", default=None,
                   help="manifest of held-out views")
    p.add_argument("--reference", default=None,
                   help="ground-truth map bundle")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
