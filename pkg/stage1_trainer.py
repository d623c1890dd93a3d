# stage1_trainer.py
"""Curriculum training for stage 1 and inference-time one-shot adaptation."""
from __future__ import annotations

import copy
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from checkpoints import LossLog, latest_checkpoint, load_extra, load_networks, write_checkpoint
from config import PipelineConfig, config_hash, network_hash
from datasets import Stage1Batch, Stage1Dataset
from errors import NonFiniteLossError, TrainingDivergenceError, ValidationError
from media import compute_mfcc
from providers import resolve_provider
from stage1_losses import (
    PHASE_LOSSES,
    LossBundle,
    adversarial_loss,
    blink_loss,
    contrastive_loss,
    feature_matching_loss,
    lower_half,
    perceptual_loss,
    reconstruction_loss_lower,
    stage1_objective,
    temporal_adversarial_loss,
    temporal_generator_loss,
    window_positions,
)
from stage1_networks import SYNC_FRAMES, Stage1Generator, Stage1Networks, build_stage1_networks

logger = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 10.0


# ----------------------------------------------------------- curriculum ---

def stabilization_check(history, epsilon: float, patience: int, relative: bool = False) -> bool:
    """True when the trailing ``patience`` values of every series have settled.

    The least-squares slope over the trailing window must stay below
    ``epsilon`` (or ``epsilon * |window mean|`` when ``relative``).
    ``history`` is one series or a name -> series mapping. Too-short series
    never count as stable.
    """
    if isinstance(history, Mapping):
        return bool(history) and all(
            stabilization_check(h, epsilon, patience, relative) for h in history.values()
        )
    values = np.asarray(history, dtype=np.float64)
    if patience < 2 or len(values) < patience:
        return False
    window = values[-patience:]
    slope = abs(np.polyfit(np.arange(patience), window, 1)[0])
    threshold = epsilon * max(abs(window.mean()), 1e-12) if relative else epsilon
    return bool(slope < threshold)


@dataclass
class CurriculumState:
    phase: int = 1
    epoch: int = 0
    loss_history: Dict[str, List[float]] = field(default_factory=dict)
    max_phase: int = 3

    @property
    def active_losses(self) -> frozenset:
        return PHASE_LOSSES[self.phase]

    def record(self, epoch_means: Mapping[str, float]) -> None:
        for name in self.active_losses:
            if name in epoch_means:
                self.loss_history.setdefault(name, []).append(float(epoch_means[name]))

    def active_history(self) -> Dict[str, List[float]]:
        return {name: self.loss_history.get(name, []) for name in self.active_losses}

    def update(self, epoch_means, epsilon, patience, relative=True, force=False) -> bool:
        """Record one epoch; advance a phase if forced or every active loss is stable."""
        self.record(epoch_means)
        self.epoch += 1
        if self.phase >= self.max_phase:
            return False
        if force or stabilization_check(self.active_history(), epsilon, patience, relative):
            self.phase += 1
            logger.info("curriculum: entering phase %d after epoch %d", self.phase, self.epoch)
            return True
        return False

    def to_header(self) -> Dict[str, str]:
        return {
            "phase": str(self.phase),
            "curriculum_epoch": str(self.epoch),
            "max_phase": str(self.max_phase),
            "loss_history": json.dumps(self.loss_history, sort_keys=True, separators=(",", ":")),
        }

    @classmethod
    def from_header(cls, header: Mapping[str, str]) -> "CurriculumState":
        return cls(
            phase=int(header["phase"]),
            epoch=int(header.get("curriculum_epoch", header.get("epoch", 0))),
            loss_history=json.loads(header.get("loss_history", "{}")),
            max_phase=int(header.get("max_phase", 3)),
        )


def lr_schedule(epoch: int, settings) -> float:
    """Constant for ``constant_epochs``, then linear decay to 0 over ``decay_epochs``."""
    if epoch < 0:
        raise ValidationError(f"epoch must be >= 0, got {epoch}")
    if epoch < settings.constant_epochs:
        return settings.learning_rate
    if settings.decay_epochs == 0:
        return 0.0
    done = (epoch - settings.constant_epochs) / settings.decay_epochs
    return settings.learning_rate * max(0.0, 1.0 - done)


def make_optimizer(params, settings, lr: Optional[float] = None) -> torch.optim.Adam:
    return torch.optim.Adam(
        params, lr=settings.learning_rate if lr is None else lr, betas=(settings.beta1, settings.beta2)
    )


def build_optimizers(networks: Stage1Networks, settings) -> Dict[str, torch.optim.Optimizer]:
    return {name: make_optimizer(net.parameters(), settings) for name, net in networks.as_dict().items()}


def set_learning_rate(optimizers: Mapping[str, torch.optim.Optimizer], lr: float) -> None:
    for opt in optimizers.values():
        for group in opt.param_groups:
            group["lr"] = lr


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


# ---------------------------------------------------------------- steps ---

def _sync_frames(lower: torch.Tensor) -> torch.Tensor:
    """The five frames centred in a [B, W, 3, h, w] window."""
    w = lower.shape[1]
    if w < SYNC_FRAMES:
        raise ValidationError(f"sync loss needs windows of >= {SYNC_FRAMES} frames, got {w}")
    start = w // 2 - SYNC_FRAMES // 2
    return lower[:, start : start + SYNC_FRAMES]


def _finite_or_raise(name: str, value: torch.Tensor) -> None:
    v = float(value)
    if not np.isfinite(v):
        raise NonFiniteLossError(name, v)


def _detach_features(features):
    return [[f.detach() for f in scale] for scale in features]


def train_step(
    batch: Stage1Batch,
    networks: Stage1Networks,
    optimizers: Mapping[str, torch.optim.Optimizer],
    weights,
    curriculum: CurriculumState,
    feature_provider,
    sync_adversarial: bool = False,
) -> LossBundle:
    """One discriminator update, one generator update on the phase-active
    losses, then a landmark-head update when the batch carries landmarks."""
    phase = curriculum.phase
    active = PHASE_LOSSES[phase]
    if "BL" in active and batch.landmarks is None:
        raise ValidationError(f"phase {phase} needs eye landmarks in every batch")

    nets = networks
    b, w = batch.frames.shape[:2]
    L = w - 1
    res = batch.frames.shape[-1]
    identity = batch.identity
    real_window = batch.frames
    real = real_window.flatten(0, 1)
    id_flat = identity[:, None].expand(b, w, *identity.shape[1:]).flatten(0, 1)

    fake_window = torch.stack([nets.generator(identity, batch.mfcc[:, i]) for i in range(w)], dim=1)
    fake = fake_window.flatten(0, 1)
    bundle = LossBundle(phase=phase)

    # discriminators
    d_real = nets.frame_d(real, id_flat)
    d_fake = nets.frame_d(fake.detach(), id_flat)
    loss_d = adversarial_loss(d_real.score_maps, d_fake.score_maps, side="discriminator")
    bundle["D_frame"] = loss_d.detach()
    d_names = ["frame_d"]
    if "TAL" in active:
        t_real = nets.temporal_d(real_window)
        t_fake = nets.temporal_d(fake_window.detach())
        tal_d = temporal_adversarial_loss(
            window_positions(t_real.score_maps, L), window_positions(t_fake.score_maps, L), L
        )
        bundle["D_TAL"] = tal_d.detach()
        loss_d = loss_d - tal_d
        d_names.append("temporal_d")
    if "CL" in active and sync_adversarial:
        real_lower = _sync_frames(lower_half(real_window))
        fake_lower = _sync_frames(lower_half(fake_window.detach()))
        sync_loss = contrastive_loss(
            [
                nets.sync_d(real_lower, batch.sync_mfcc),
                nets.sync_d(real_lower, batch.offsync_mfcc),
                nets.sync_d(fake_lower, batch.sync_mfcc),
            ],
            [1, 0, 0],
            weights.margin,
        )
        bundle["D_sync"] = sync_loss.detach()
        loss_d = loss_d + sync_loss
        d_names.append("sync_d")
    _finite_or_raise("D", loss_d)
    for name in d_names:
        optimizers[name].zero_grad(set_to_none=True)
    loss_d.backward()
    for name in d_names:
        optimizers[name].step()

    # generator
    d_fake = nets.frame_d(fake, id_flat)
    with torch.no_grad():
        d_real = nets.frame_d(real, id_flat)
    bundle["GAN"] = adversarial_loss(None, d_fake.score_maps, side="generator")
    bundle["FM"] = feature_matching_loss(_detach_features(d_real.features), d_fake.features)
    bundle["PL"] = perceptual_loss(fake, real, feature_provider)
    if "RL" in active:
        bundle["RL"] = reconstruction_loss_lower(real, fake)
    if "TAL" in active:
        t_fake = nets.temporal_d(fake_window)
        bundle["TAL"] = temporal_generator_loss(window_positions(t_fake.score_maps, L))
    if "CL" in active:
        pair = nets.sync_d(_sync_frames(lower_half(fake_window)), batch.sync_mfcc)
        bundle["CL"] = contrastive_loss([pair], [1], weights.margin)
    if "BL" in active:
        predicted = nets.landmark_head(fake) * res
        bundle["BL"] = blink_loss(batch.landmarks.flatten(0, 1), predicted)

    bundle.check_finite(active)
    objective = stage1_objective(bundle, weights, phase)
    optimizers["generator"].zero_grad(set_to_none=True)
    objective.backward()
    optimizers["generator"].step()

    # landmark head, on real frames only
    if batch.landmarks is not None:
        target = batch.landmarks.flatten(0, 1) / res
        loss_lmk = F.mse_loss(nets.landmark_head(real), target)
        _finite_or_raise("LMK", loss_lmk)
        optimizers["landmark_head"].zero_grad(set_to_none=True)
        loss_lmk.backward()
        optimizers["landmark_head"].step()
        bundle["LMK"] = loss_lmk.detach()

    bundle.values = {k: v.detach() for k, v in bundle.values.items()}
    return bundle


def pretrain_sync(sync_d, dataset: Stage1Dataset, steps: int, settings, margin: float) -> List[float]:
    """Contrastive pretraining on real genuine / off-sync pairs, then freeze."""
    losses: List[float] = []
    if steps > 0:
        opt = make_optimizer(sync_d.parameters(), settings)
        epoch = 0
        while len(losses) < steps:
            for batch in dataset.batches(epoch, stream=1):
                lower = _sync_frames(lower_half(batch.frames))
                loss = contrastive_loss(
                    [sync_d(lower, batch.sync_mfcc), sync_d(lower, batch.offsync_mfcc)], [1, 0], margin
                )
                _finite_or_raise("sync_pretrain", loss)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                losses.append(float(loss))
                if len(losses) >= steps:
                    break
            epoch += 1
        logger.info("sync discriminator pretrained for %d steps, final loss %.4f", steps, losses[-1])
    sync_d.requires_grad_(False)
    return losses


# ------------------------------------------------------------ adaptation ---

@dataclass
class AdaptationResult:
    generator: Stage1Generator
    losses: List[float]

    @property
    def passes(self) -> int:
        return max(len(self.losses) - 1, 0)


def silent_mfcc(sample_rate: int = 16000, window_ms: float = 200.0) -> np.ndarray:
    return compute_mfcc(np.zeros(int(round(window_ms * sample_rate / 1000)), dtype=np.float32), sample_rate)


def one_shot_adapt(
    generator: Stage1Generator,
    unseen_image: torch.Tensor,
    feature_provider,
    epochs: int = 5,
    mfcc: Optional[Union[torch.Tensor, np.ndarray]] = None,
    learning_rate: float = 1e-4,
    betas=(0.0, 0.9),
) -> AdaptationResult:
    """Fine-tune a copy of ``generator`` on one identity image.

    Each epoch is one Adam step on the perceptual loss between the frames
    generated for ``mfcc`` windows ([K, T, 13], silence by default) and the
    image itself. ``losses`` holds the loss before each pass and after the
    last one. The source generator is never modified.
    """
    adapted = copy.deepcopy(generator)
    if epochs <= 0:
        return AdaptationResult(adapted, [])
    dtype = next(adapted.parameters()).dtype
    if mfcc is None:
        mfcc = silent_mfcc()[None]
    windows = torch.as_tensor(np.asarray(mfcc) if not isinstance(mfcc, torch.Tensor) else mfcc).to(dtype)
    if windows.dim() == 2:
        windows = windows[None]
    image = unseen_image.to(dtype)
    if image.dim() == 3:
        image = image[None]

    adapted.requires_grad_(True)
    opt = torch.optim.Adam(adapted.parameters(), lr=learning_rate, betas=betas)

    def loss_fn():
        return sum(
            perceptual_loss(adapted(image, windows[k : k + 1]), image, feature_provider) for k in range(len(windows))
        ) / len(windows)

    losses: List[float] = []
    for _ in range(epochs):
        loss = loss_fn()
        _finite_or_raise("adapt_PL", loss)
        losses.append(float(loss))
        if losses[-1] > DIVERGENCE_FACTOR * max(losses[0], 1e-12):
            raise TrainingDivergenceError(
                f"one-shot adaptation diverged: perceptual loss {losses[0]:.4g} -> {losses[-1]:.4g}"
            )
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    with torch.no_grad():
        final = float(loss_fn())
    if not np.isfinite(final) or final > DIVERGENCE_FACTOR * max(losses[0], 1e-12):
        raise TrainingDivergenceError(f"one-shot adaptation diverged: perceptual loss {losses[0]:.4g} -> {final:.4g}")
    losses.append(final)
    logger.info("one-shot adaptation: %d passes, perceptual loss %.4f -> %.4f", epochs, losses[0], final)
    return AdaptationResult(adapted, losses)


# ------------------------------------------------------------- training ---

def _epoch_means(bundles: Sequence[LossBundle]) -> Dict[str, float]:
    names = sorted({n for b in bundles for n in b.values})
    return {n: float(np.mean([float(b[n]) for b in bundles if n in b])) for n in names}


def train(cfg: PipelineConfig, run_dir, resume: bool = False) -> List[Path]:
    """Run the stage-1 curriculum and write one checkpoint per epoch."""
    s1 = cfg.stage1
    run_dir = Path(run_dir)
    ckpt_root = run_dir / "checkpoints"
    seed_everything(cfg.seed)

    dataset = Stage1Dataset(cfg.paths.data_dir, cfg)
    networks = build_stage1_networks(s1.network)
    optimizers = build_optimizers(networks, s1.optimizer)
    feature_provider = resolve_provider("perceptual", cfg.providers.perceptual, seed=cfg.seed)
    log = LossLog(run_dir / "loss_log.csv")
    net_hash = network_hash(s1.network)

    max_phase = 3
    if s1.network.temporal_window + 1 < SYNC_FRAMES:
        logger.warning("temporal window shorter than %d frames; curriculum limited to phase 1", SYNC_FRAMES)
        max_phase = 1
    elif not dataset.has_landmarks:
        logger.warning("dataset has no eye landmarks; curriculum limited to phase 2")
        max_phase = 2
    curriculum = CurriculumState(max_phase=max_phase)

    start_epoch = 0
    latest = latest_checkpoint(ckpt_root) if resume else None
    if latest is not None:
        header = load_networks(latest, networks.as_dict(), expected_hash=net_hash)
        extra = load_extra(latest) or {}
        for name, state in extra.get("optimizers", {}).items():
            optimizers[name].load_state_dict(state)
        if "torch_rng" in extra:
            torch.set_rng_state(extra["torch_rng"])
            np.random.set_state(extra["numpy_rng"])
        curriculum = CurriculumState.from_header(header)
        start_epoch = int(header["epoch"])
        log.truncate_after(start_epoch)
        networks.sync_d.requires_grad_(s1.sync_adversarial)
        logger.info("resuming stage 1 from %s (epoch %d, phase %d)", latest, start_epoch, curriculum.phase)
    elif max_phase >= 2:
        pretrain_sync(networks.sync_d, dataset, s1.sync_pretrain_steps, s1.optimizer, s1.weights.margin)
        networks.sync_d.requires_grad_(s1.sync_adversarial)

    written = []
    step = start_epoch * dataset.num_batches()
    for epoch in range(start_epoch, s1.epochs):
        set_learning_rate(optimizers, lr_schedule(epoch, s1.optimizer))
        phase = curriculum.phase
        bundles = []
        for batch in tqdm(dataset.batches(epoch), total=dataset.num_batches(), desc=f"stage1 epoch {epoch + 1}", leave=False):
            bundles.append(
                train_step(batch, networks, optimizers, s1.weights, curriculum, feature_provider, s1.sync_adversarial)
            )
            step += 1
        means = _epoch_means(bundles)
        log.append(epoch + 1, phase, means)
        logger.info(
            "stage1 epoch %d phase %d: %s",
            epoch + 1, phase, ", ".join(f"{k}={v:.4f}" for k, v in means.items()),
        )
        curriculum.update(
            means,
            s1.stabilization_epsilon,
            s1.stabilization_patience,
            relative=True,
            force=(epoch + 1) in s1.advance_at_epochs,
        )
        header = {
            "config_hash": config_hash(cfg),
            "network_hash": net_hash,
            "step": step,
            **curriculum.to_header(),
        }
        extra = {
            "optimizers": {name: opt.state_dict() for name, opt in optimizers.items()},
            "torch_rng": torch.get_rng_state(),
            "numpy_rng": np.random.get_state(),
        }
        written.append(write_checkpoint(ckpt_root, epoch + 1, networks.as_dict(), header, extra))
    return written
