"""Command-line entry point: ``rawldm <subcommand>``."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import diffusion as D
from . import isp
from .errors import RawLDMError

IMAGE_SUFFIXES = (".png", ".ppm")


def _float_list(text: str):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise click.BadParameter(f"expected comma-separated numbers, got {text!r}") from exc


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except RawLDMError as exc:
            click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
            sys.exit(1)


@click.group(cls=_Group)
@click.option("-v", "--verbose", is_flag=True, help="Log training progress.")
def main(verbose):
    """Low-light raw enhancement with a latent diffusion model."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")


@main.command("isp")
@click.argument("raw", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Output PNG or PPM.")
@click.option("--srgb-reference", is_flag=True,
              help="Render without amplification (the reference pipeline) instead of the brightened input.")
def isp_cmd(raw, out, srgb_reference):
    """Render a raw file (PGM + .meta.json sidecar) to sRGB."""
    from .enhance import amplified_baseline
    from .rawio import load_raw, write_image
    frame = load_raw(raw)
    img = isp.raw_to_srgb_reference(frame) if srgb_reference else amplified_baseline(frame)
    write_image(out, img)
    click.echo(out)


@main.command()
@click.option("--images", type=click.Path(exists=True, file_okay=False),
              help="Directory of clean sRGB PNG/PPM images. Omit to generate procedural scenes.")
@click.option("--scenes", type=int, default=200, show_default=True, help="Procedural scene count.")
@click.option("--size", type=int, default=64, show_default=True, help="Procedural scene size in pixels.")
@click.option("--ratios", default="100", show_default=True, help="Comma-separated exposure ratios.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--cfa", default="RGGB", show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
def synth(images, scenes, size, ratios, seed, cfa, out):
    """Synthesise (noisy, clean) raw pairs and write a manifest."""
    from .noisesynth import SensorNoiseParams, make_dataset, write_dataset
    from .rawio import read_image
    from .scenes import scene_batch
    if images:
        files = sorted(p for p in Path(images).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise click.UsageError(f"no PNG/PPM images in {images}")
        clean = [read_image(p) for p in files]
    else:
        clean = scene_batch(scenes, size, seed)
    pairs = make_dataset(clean, _float_list(ratios), SensorNoiseParams(seed=seed), cfa_pattern=cfa)
    click.echo(write_dataset(pairs, out))


@main.command("train-vae")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
def train_vae(config_path):
    """Stage 1: fit the residual VAE. Paths come from the JSON config."""
    from .trainer import PairDataset, TrainConfig, train_stage1
    cfg = TrainConfig.load(config_path)
    if cfg.stage != 1:
        raise click.UsageError("train-vae needs a stage-1 config")
    if not cfg.manifest or not cfg.out_checkpoint:
        raise click.UsageError("config must set manifest and out_checkpoint")
    res = train_stage1(cfg, PairDataset.from_manifest(cfg.manifest))
    click.echo(json.dumps({"checkpoint": cfg.out_checkpoint, "final_epoch_loss": res.log.epoch_means()[-1]
                           if res.log.rows else None}))


@main.command("train-diffusion")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--vae", "vae_path", type=click.Path(exists=True, dir_okay=False),
              help="Stage-1 checkpoint (overrides vae_checkpoint in the config).")
def train_diffusion(config_path, vae_path):
    """Stage 2: train the U-Net and context processor against the frozen VAE."""
    from .trainer import PairDataset, TrainConfig, train_stage2
    cfg = TrainConfig.load(config_path)
    if cfg.stage != 2:
        raise click.UsageError("train-diffusion needs a stage-2 config")
    vae_path = vae_path or cfg.vae_checkpoint
    if not cfg.manifest or not cfg.out_checkpoint or not vae_path:
        raise click.UsageError("config must set manifest and out_checkpoint, and a VAE checkpoint is required")
    res = train_stage2(cfg, PairDataset.from_manifest(cfg.manifest), vae_path)
    means = res.log.epoch_means("L_LDM")
    click.echo(json.dumps({"checkpoint": cfg.out_checkpoint, "final_epoch_ldm": means[-1] if means else None,
                           "condition_dropout": [res.dropout_count, res.samples_seen]}))


@main.command()
@click.argument("raw", type=click.Path(exists=True, dir_okay=False))
@click.option("--vae", "vae_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--unet", "unet_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--guidance", type=click.FloatRange(min=0), default=2.0, show_default=True,
              help="Classifier-free guidance weight (2.0 for SID/LRD-like data, 2.5 for ELD-like).")
@click.option("--steps", type=click.IntRange(min=1), default=50, show_default=True, help="DDIM steps.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--null-seed", type=int, default=0, show_default=True,
              help="Seed of the Gaussian latent used for the unconditional branch.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def enhance(raw, vae_path, unet_path, guidance, steps, seed, null_seed, out):
    """Enhance one raw capture into an sRGB image."""
    from .enhance import enhance_image
    click.echo(enhance_image(raw, vae_path, unet_path, out, guidance, steps, seed, null_seed))


@main.command("eval")
@click.option("--pairs", "manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--vae", "vae_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--unet", "unet_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--guidance", type=click.FloatRange(min=0), default=2.0, show_default=True)
@click.option("--steps", type=click.IntRange(min=1), default=50, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def eval_cmd(manifest, out, vae_path, unet_path, guidance, steps, seed):
    """Score enhanced outputs (or, without checkpoints, the amplified input) against references."""
    from .enhance import Enhancer, amplified_baseline, evaluate
    from .noisesynth import read_manifest
    if bool(vae_path) != bool(unet_path):
        raise click.UsageError("pass both --vae and --unet, or neither")
    pairs = read_manifest(manifest)
    names = [e["noisy"] for e in json.loads(Path(manifest).read_text())]
    if vae_path:
        enh = Enhancer.from_checkpoints(vae_path, unet_path)
        g = D.GuidanceConfig(guidance)
        predict = lambda f: enh.enhance_frame(f, g, steps, seed)
    else:
        predict = amplified_baseline
    rep = evaluate(pairs, predict, names)
    rep.save(out)
    click.echo(json.dumps({"mean_psnr": rep.mean_psnr, "mean_ssim": rep.mean_ssim, "images": len(rep.psnr)}))


@main.command("schedule-dump")
@click.option("--T", "steps", type=click.IntRange(min=1), default=1000, show_default=True)
@click.option("--beta-start", type=float, default=1e-4, show_default=True)
@click.option("--beta-end", type=float, default=0.02, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def schedule_dump(steps, beta_start, beta_end, out):
    """Write the linear noise schedule as CSV (t, beta, alpha, alpha_bar, sigma)."""
    click.echo(D.dump_schedule(D.make_linear_schedule(steps, beta_start, beta_end), out))


if __name__ == "__main__":
    main()
