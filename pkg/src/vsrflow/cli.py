"""Command line entry point: ``vsrflow train|degrade|generate|eval|selftest``.

Failures print one JSON line ``{"error": <category>, "message": ...}`` to
stderr and exit nonzero; success exits 0.
"""
from __future__ import annotations

import json
import logging
import os
import sys

import click
import numpy as np

from . import codec
from .errors import ConfigError, VsrError
from .numerics import umvt

EXIT_USAGE = 2
EXIT_FAILURE = 3
EXIT_IO = 4

TASK_NAMES = {"t2v": "t2v", "multi-id": "multi_id", "edit": "edit"}


def _task(name):
    return TASK_NAMES[name]


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--resume", type=click.Path(exists=True, file_okay=False), default=None,
              help="Checkpoint directory to continue from.")
def train(config_path, resume):
    """Run staged training from a JSON config."""
    from .trainer import TrainConfig, run_training

    cfg = TrainConfig.load(config_path)
    if not cfg.checkpoint_dir:
        raise ConfigError("config needs checkpoint_dir")
    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    log_path = os.path.join(cfg.checkpoint_dir, "loss_log.jsonl")
    if not resume and os.path.exists(log_path):
        os.remove(log_path)
    state, records = run_training(cfg, resume_from=resume, log_path=log_path)
    click.echo(json.dumps({"checkpoint": os.path.join(cfg.checkpoint_dir, "final"),
                           "loss_log": log_path, "steps": state.step,
                           "final_loss": records[-1]["loss"] if records else None}, sort_keys=True))


@cli.command()
@click.option("--task", type=click.Choice(sorted(TASK_NAMES)), required=True)
@click.option("--count", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--preset", type=click.Choice(["light", "heavy", "default"]), default="default", show_default=True)
@click.option("--base-ckpt", type=click.Path(exists=True, file_okay=False), default=None,
              help="Text-only base model for SDEdit; default is the analytic spectral prior.")
@click.option("--frames", type=int, default=7, show_default=True)
@click.option("--size", type=int, default=16, show_default=True, help="HR frame side in pixels.")
@click.option("--texture", type=float, default=0.1, show_default=True)
def degrade(task, count, seed, out, preset, base_ckpt, frames, size, texture):
    """Build a degraded training corpus."""
    from .degrade import build_corpus, preset as make_preset, save_corpus
    from .model import VelocityModel

    recipe = make_preset(preset, seed=seed)
    base = VelocityModel.load(base_ckpt) if base_ckpt else None
    samples = build_corpus(_task(task), count, seed, frames=frames, size=size, recipe=recipe,
                           base_model=base, texture=texture)
    meta = {"task": _task(task), "seed": seed, "preset": preset, "frames": frames, "size": size,
            "texture": texture, "scale": recipe.downscale_factor,
            "base": "checkpoint" if base_ckpt else "spectral_prior"}
    path = save_corpus(samples, out, meta)
    click.echo(json.dumps({"manifest": path, "count": len(samples)}, sort_keys=True))


def _read_video(path):
    video, _ = codec.load_video(path)
    return video


def _read_image(path):
    img = umvt.load(path)
    return img[0] if img.ndim == 4 and img.shape[0] == 1 else img


@cli.command()
@click.option("--task", type=click.Choice(sorted(TASK_NAMES)), default="t2v", show_default=True)
@click.option("--prompt", required=True)
@click.option("--ckpt", type=click.Path(exists=True, file_okay=False), required=True,
              help="Super-resolution model checkpoint.")
@click.option("--lr", "lr_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="LR video (simulation mode); otherwise sampled by --base-ckpt.")
@click.option("--base-ckpt", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--frames", type=int, default=7, show_default=True, help="Base-model frames when sampling LR.")
@click.option("--size", type=int, default=8, show_default=True, help="Base-model LR side when sampling LR.")
@click.option("--id-image", "id_images", multiple=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--ref-video", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--scale", type=int, default=2, show_default=True)
@click.option("--steps", type=int, default=50, show_default=True)
@click.option("--shift", type=float, default=1.0, show_default=True)
@click.option("--s-txt", type=float, default=3.0, show_default=True)
@click.option("--s-ref", type=float, default=1.0, show_default=True)
@click.option("--n-ref", type=int, default=15, show_default=True)
@click.option("--noise-aug", type=int, default=300, show_default=True,
              help="Noise-augmentation step applied to the LR latent.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def generate(task, prompt, ckpt, lr_path, base_ckpt, frames, size, id_images, ref_video, scale,
             steps, shift, s_txt, s_ref, n_ref, noise_aug, seed, out):
    """Cascaded generation of an HR video."""
    from .harness import GenerateRequest, cascaded_generate
    from .model import VelocityModel
    from .sampler import SamplerConfig

    if task == "multi-id" and not id_images:
        raise ConfigError("multi-id generation needs at least one --id-image")
    if task == "edit" and ref_video is None:
        raise ConfigError("edit generation needs --ref-video")
    req = GenerateRequest(
        prompt=prompt, sr_model=VelocityModel.load(ckpt), scale=scale, task=_task(task),
        lr_video=_read_video(lr_path) if lr_path else None,
        base_model=VelocityModel.load(base_ckpt) if base_ckpt else None,
        base_shape=(frames, size, size),
        id_images=[_read_image(p) for p in id_images],
        ref_video=_read_video(ref_video) if ref_video else None,
        sampler=SamplerConfig(steps=steps, shift=shift, s_txt=s_txt, s_ref=s_ref, n_ref=n_ref, seed=seed),
        noise_aug_step=noise_aug)
    video = cascaded_generate(req)
    codec.save_video(out, video)
    click.echo(json.dumps({"out": out, "dims": list(video.shape)}, sort_keys=True))


@cli.command("eval")
@click.option("--pred", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--target", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--mask", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Nonzero elements are scored for masked_psnr_db.")
def eval_cmd(pred, target, mask):
    """Print PSNR/SSIM metrics as JSON."""
    from .harness import evaluate

    m = umvt.load(mask) != 0 if mask else None
    rec = evaluate(_read_video(pred), _read_video(target), m)
    click.echo(rec.to_json())


@cli.command()
def selftest():
    """Fast internal consistency checks."""
    from .selfcheck import run_checks

    results = run_checks()
    for name, ok, detail in results:
        click.echo(json.dumps({"check": name, "ok": ok, "detail": detail}, sort_keys=True))
    failed = [r[0] for r in results if not r[1]]
    if failed:
        raise VsrError(f"self-test failed: {', '.join(failed)}")


def _fail(category, message, code):
    sys.stderr.write(json.dumps({"error": category, "message": message}, sort_keys=True) + "\n")
    return code


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="vsrflow", standalone_mode=False)
    except click.exceptions.Abort:
        return _fail("aborted", "interrupted", EXIT_FAILURE)
    except click.ClickException as exc:
        return _fail("usage", exc.format_message(), EXIT_USAGE)
    except VsrError as exc:
        return _fail(exc.category, str(exc), EXIT_FAILURE)
    except OSError as exc:
        return _fail("io", str(exc), EXIT_IO)
    return 0


if __name__ == "__main__":
    sys.exit(main())
