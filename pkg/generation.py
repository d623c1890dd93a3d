# generation.py
"""End-to-end inference: audio + one face image -> talking head -> animated clip."""
from __future__ import annotations

import logging
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from tqdm import tqdm

from checkpoints import load_networks
from config import PipelineConfig, network_hash
from datasets import to_frames, to_tensor, write_clip
from errors import CheckpointError, ValidationError
from media import TalkingClip, frame_audio_windows, load_audio, load_image, resize_image
from providers import resolve_provider
from stage1_networks import Stage1Generator
from stage1_trainer import one_shot_adapt, seed_everything
from stage2_networks import build_stage2_networks, translate

logger = logging.getLogger(__name__)

HUMAN_DIR = "human"
ANIMATED_DIR = "animated"


@dataclass
class GenerationResult:
    human: TalkingClip
    animated: Optional[TalkingClip]
    out_dir: Path
    adaptation_losses: list


def load_stage1_generator(checkpoint_dir, cfg: PipelineConfig) -> Stage1Generator:
    if not checkpoint_dir:
        raise CheckpointError("a stage-1 checkpoint is required for generation")
    generator = Stage1Generator(cfg.stage1.network)
    load_networks(checkpoint_dir, {"generator": generator}, expected_hash=network_hash(cfg.stage1.network))
    generator.eval()
    return generator


def load_stage2_networks(checkpoint_dir, cfg: PipelineConfig):
    networks = build_stage2_networks(cfg.stage2.network)
    load_networks(
        checkpoint_dir,
        {"gen_s2t": networks.gen_s2t},
        expected_hash=network_hash(cfg.stage2.network),
    )
    networks.gen_s2t.eval()
    return networks


@torch.no_grad()
def talking_head_frames(generator: Stage1Generator, identity: torch.Tensor, mfcc: np.ndarray) -> np.ndarray:
    """One frame per MFCC window, [N, R, R, 3] in [0, 1]."""
    frames = []
    for window in tqdm(mfcc, desc="talking head", leave=False):
        frames.append(to_frames(generator(identity, torch.from_numpy(window)[None]))[0])
    return np.stack(frames)


@torch.no_grad()
def animate_frames(frames: np.ndarray, networks, resolution: int) -> np.ndarray:
    """Per-frame source -> target translation."""
    out = []
    for frame in tqdm(frames, desc="animating", leave=False):
        x = to_tensor(resize_image(frame, resolution))[None]
        out.append(to_frames(translate(x, networks, "s2t").image)[0])
    return np.stack(out)


def generate(
    cfg: PipelineConfig,
    audio_path,
    image_path,
    stage1_checkpoint,
    stage2_checkpoint=None,
    out_dir="output",
    adapt_epochs: Optional[int] = None,
    skip_adapt: bool = False,
    human_only: bool = False,
    keep_intermediate: bool = False,
) -> GenerationResult:
    """Write the animated clip (or the talking head alone with ``human_only``) under ``out_dir``.

    The frame count is ``round(duration * fps)``: 1 s of audio at 25 fps
    gives 25 frames.
    """
    if not human_only and not stage2_checkpoint:
        raise ValidationError("a stage-2 checkpoint is required unless --human-only is set")
    seed_everything(cfg.seed)
    out_dir = Path(out_dir)
    s1 = cfg.stage1

    audio = load_audio(audio_path, cfg.media.sample_rate)
    mfcc = frame_audio_windows(audio, cfg.media.fps, cfg.media.window_ms).as_array()
    image = resize_image(load_image(image_path), s1.network.resolution)
    identity = to_tensor(image)[None]

    generator = load_stage1_generator(stage1_checkpoint, cfg)
    losses = []
    if not skip_adapt:
        epochs = s1.adapt_epochs if adapt_epochs is None else adapt_epochs
        feature_provider = resolve_provider("perceptual", cfg.providers.perceptual, seed=cfg.seed)
        result = one_shot_adapt(
            generator,
            identity,
            feature_provider,
            epochs=epochs,
            learning_rate=s1.adapt_learning_rate,
            betas=(s1.optimizer.beta1, s1.optimizer.beta2),
        )
        generator, losses = result.generator, result.losses
        generator.eval()

    human = TalkingClip(
        frames=talking_head_frames(generator, identity, mfcc),
        fps=cfg.media.fps,
        audio=audio,
        name=Path(audio_path).stem,
    )
    logger.info("generated %d talking-head frames", len(human))

    if human_only:
        write_clip(human, out_dir)
        return GenerationResult(human, None, out_dir, losses)

    networks = load_stage2_networks(stage2_checkpoint, cfg)
    animated = TalkingClip(
        frames=animate_frames(human.frames, networks, cfg.stage2.network.resolution),
        fps=cfg.media.fps,
        audio=audio,
        name=human.name,
    )
    write_clip(animated, out_dir / ANIMATED_DIR)
    human_dir = out_dir / HUMAN_DIR
    if keep_intermediate:
        write_clip(human, human_dir)
    elif human_dir.exists():
        shutil.rmtree(human_dir)
    logger.info("wrote %d animated frames to %s", len(animated), out_dir / ANIMATED_DIR)
    return GenerationResult(human, animated, out_dir, losses)
