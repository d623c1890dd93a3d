# app.py
"""au2av command line: prepare | train-stage1 | train-stage2 | generate | evaluate."""
import functools
import json
import logging
import sys
from pathlib import Path

import click
from dotenv import load_dotenv

from config import CONFIG_ENV_VAR, config_hash, dump_config, load_config
from datasets import prepare_dataset
from errors import ProviderError
from generation import generate as run_generation
from media import load_landmarks, load_video
from metrics import EvalProviders, aggregate_reports, evaluate_many, pair_clip_directories
from providers import resolve_provider
from stage1_trainer import train
from stage2_trainer import STAGE2_DIR, load_landmark_fn, train_stage2

load_dotenv()

logger = logging.getLogger("au2av")


def _fail(e: Exception):
    message = " ".join(str(e).split())
    click.echo(f"AU2AV-ERROR {type(e).__name__}: {message}", err=True)
    sys.exit(1)


def reports_errors(fn):
    """One machine-parsable stderr line and exit 1 on any failure; usage errors stay with click."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except Exception as e:
            logger.debug("command failed", exc_info=True)
            _fail(e)

    return wrapper


def _load(ctx, seed=None):
    cfg = load_config(ctx.obj["config"])
    if seed is not None:
        cfg.seed = seed
    return cfg


@click.group()
@click.option("--config", "config_path", envvar=CONFIG_ENV_VAR, required=True,
              type=click.Path(dir_okay=False), help=f"TOML config (falls back to ${CONFIG_ENV_VAR}).")
@click.option("--verbose", "-v", is_flag=True, help="Debug logging.")
@click.pass_context
def cli(ctx, config_path, verbose):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    ctx.ensure_object(dict)
    ctx.obj["config"] = config_path


# --- 📁 dataset ---
@cli.command()
@click.argument("raw_dir", type=click.Path(file_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.pass_context
@reports_errors
def prepare(ctx, raw_dir, out_dir):
    """Normalize raw clips into frame directories + WAV + manifest."""
    cfg = _load(ctx)
    pose = resolve_provider("pose", cfg.providers.pose)
    index = prepare_dataset(raw_dir, out_dir, pose, cfg.media.sample_rate, cfg.media.fps)
    click.echo(f"✅ prepared {len(index)} clip(s) in {out_dir}")


# --- 🧠 training ---
@cli.command("train-stage1")
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Run directory.")
@click.option("--resume", is_flag=True, help="Continue from the latest checkpoint.")
@click.pass_context
@reports_errors
def train_stage1(ctx, seed, out_dir, resume):
    """Curriculum training of the talking-head generator."""
    cfg = _load(ctx, seed)
    run_dir = Path(out_dir or cfg.paths.run_dir)
    dump_config(cfg, run_dir / "config.toml")
    written = train(cfg, run_dir, resume=resume)
    click.echo(f"✅ stage 1: {len(written)} checkpoint(s) under {run_dir / 'checkpoints'}")


@cli.command("train-stage2")
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Run directory.")
@click.option("--resume", is_flag=True, help="Continue from the latest checkpoint.")
@click.pass_context
@reports_errors
def train_stage2_cmd(ctx, seed, out_dir, resume):
    """Unpaired human -> animated translation training."""
    cfg = _load(ctx, seed)
    run_dir = Path(out_dir or cfg.paths.run_dir)
    dump_config(cfg, run_dir / STAGE2_DIR / "config.toml")
    written = train_stage2(cfg, run_dir, resume=resume)
    click.echo(f"✅ stage 2: {len(written)} checkpoint(s) under {run_dir / STAGE2_DIR / 'checkpoints'}")


# --- 🎞️ generation ---
@cli.command()
@click.argument("audio", type=click.Path(dir_okay=False))
@click.argument("image", type=click.Path(dir_okay=False))
@click.option("--stage1", "stage1_ckpt", type=click.Path(file_okay=False), default=None,
              help="Stage-1 checkpoint directory (default: paths.stage1_checkpoint).")
@click.option("--stage2", "stage2_ckpt", type=click.Path(file_okay=False), default=None,
              help="Stage-2 checkpoint directory.")
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="output")
@click.option("--keep-intermediate", is_flag=True, help="Also write the talking-head frames.")
@click.option("--human-only", is_flag=True, help="Stop after the talking head.")
@click.option("--skip-adapt", is_flag=True, help="Use the raw generator, no one-shot adaptation.")
@click.option("--adapt-epochs", type=click.IntRange(min=0), default=None)
@click.pass_context
@reports_errors
def generate(ctx, audio, image, stage1_ckpt, stage2_ckpt, seed, out_dir, keep_intermediate, human_only,
             skip_adapt, adapt_epochs):
    """Audio + one face image -> animated talking clip."""
    cfg = _load(ctx, seed)
    result = run_generation(
        cfg,
        audio,
        image,
        stage1_ckpt or cfg.paths.stage1_checkpoint,
        stage2_ckpt,
        out_dir=out_dir,
        adapt_epochs=adapt_epochs,
        skip_adapt=skip_adapt,
        human_only=human_only,
        keep_intermediate=keep_intermediate,
    )
    click.echo(f"✅ {len(result.human)} frame(s) written to {result.out_dir}")


# --- 📊 evaluation ---
def _eval_providers(cfg):
    p = cfg.providers
    shared = {
        "embedding": resolve_provider("embedding", p.embedding, seed=cfg.seed),
        "acd_embedding": resolve_provider("acd_embedding", p.acd_embedding),
    }
    head = None
    if p.landmark == "landmark_head":
        head = load_landmark_fn(cfg.paths.stage1_checkpoint, cfg.stage1.network.landmark_channels)
        if head is None:
            raise ProviderError("the landmark_head provider needs paths.stage1_checkpoint with a landmark head")
    names = p.model_dump()

    def for_pair(generated, reference):
        landmark = None
        if p.landmark == "sidecar":
            marks = load_landmarks(generated.source_dir) if generated.source_dir else None
            landmark = resolve_provider("landmark", "sidecar", landmarks=marks) if marks is not None else None
        elif p.landmark != "none":
            landmark = resolve_provider("landmark", p.landmark, head=head)
        lip = resolve_provider("lip_reader", p.lip_reader, transcript=reference.transcript)
        return EvalProviders(landmark=landmark, lip_reader=lip, names=names, **shared)

    return for_pair


@cli.command()
@click.argument("generated_dir", type=click.Path(file_okay=False))
@click.argument("reference_dir", type=click.Path(file_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default="metrics.json")
@click.option("--workers", type=click.IntRange(min=1), default=4)
@click.pass_context
@reports_errors
def evaluate(ctx, generated_dir, reference_dir, out_path, workers):
    """Score generated clips against references; writes a JSON report."""
    cfg = _load(ctx)
    pairs = [
        (load_video(g, cfg.media.fps), load_video(r, cfg.media.fps))
        for g, r in pair_clip_directories(generated_dir, reference_dir)
    ]
    reports = evaluate_many(pairs, _eval_providers(cfg), config_hash(cfg), workers)
    out_path = Path(out_path)
    if len(reports) == 1:
        reports[0].write(out_path)
        click.echo(reports[0].to_frame().to_string(index=False))
    else:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        payload = {"clips": [r.to_dict() for r in reports]}
        out_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        click.echo(aggregate_reports(reports).to_string())
    click.echo(f"✅ report written to {out_path}")


def main():
    cli(obj={})


if __name__ == "__main__":
    main()
