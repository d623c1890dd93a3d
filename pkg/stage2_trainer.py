# stage2_trainer.py
"""Stage-2 losses and the unpaired training loop.

Windows are [B, t+1, 3, H, W] tensors in [-1, 1]; ``x`` is the source
(human) domain, ``y`` the target (animated) domain.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from checkpoints import LossLog, latest_checkpoint, load_extra, load_networks, write_checkpoint
from config import PipelineConfig, config_hash, network_hash
from datasets import count_stage2_pairs, stage2_window_pairs
from errors import NonFiniteLossError, ValidationError
from media import make_unpaired_streams
from stage1_losses import LossBundle, blink_loss, lower_half
from stage1_networks import LandmarkHead
from stage1_trainer import lr_schedule, make_optimizer, seed_everything, set_learning_rate
from stage2_networks import RhoClipper, Stage2Networks, build_stage2_networks

logger = logging.getLogger(__name__)

STAGE2_DIR = "stage2"
CAM_LOGIT_CLAMP = 50.0


def _image(out):
    """Generators return (image, cam_logit, heatmap); plain callables return the image."""
    return out[0] if isinstance(out, tuple) else out


def _windows(x: torch.Tensor) -> torch.Tensor:
    return x[None] if x.dim() == 4 else x


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


# ---------------------------------------------------------------- losses ---

def lsgan_loss(scores_real, scores_fake, side: str = "discriminator") -> torch.Tensor:
    """Least-squares GAN loss summed over heads.

    discriminator: E[(D(y) - 1)^2] + E[D(G(x))^2]
    generator:     E[(D(G(x)) - 1)^2]
    """
    fakes = _as_list(scores_fake)
    if side == "discriminator":
        reals = _as_list(scores_real)
        if len(reals) != len(fakes):
            raise ValidationError(f"{len(reals)} real heads vs {len(fakes)} fake heads")
        return sum(((r - 1) ** 2).mean() + (f**2).mean() for r, f in zip(reals, fakes))
    if side == "generator":
        return sum(((f - 1) ** 2).mean() for f in fakes)
    raise ValidationError(f"side must be 'generator' or 'discriminator', got {side!r}")


def recycle_loss(x, G_y, G_x, P_y) -> torch.Tensor:
    """sum over windows of mean ||x_{s+t} - G_x(P_y(G_y(x_s), ..., G_y(x_{s+t-1})))||^2.

    ``x`` holds at least t+1 consecutive source frames, t = P_y.past_frames.
    """
    x = _windows(x)
    t = P_y.past_frames
    b, n = x.shape[:2]
    if n < t + 1:
        raise ValidationError(f"recycle loss needs {t + 1} frames, got {n}")
    translated = _image(G_y(x.flatten(0, 1))).view(b, n, *x.shape[2:])
    total = 0
    for s in range(n - t):
        predicted = P_y(translated[:, s : s + t])
        back = _image(G_x(predicted))
        total = total + ((x[:, s + t] - back) ** 2).mean()
    return total


def identity_loss(x, G, translated=None) -> torch.Tensor:
    """E||x - G(x)||_1; ``translated`` is an already computed G(x)."""
    out = G(x) if translated is None else translated
    return (x - _image(out)).abs().mean()


def cam_loss(cam_logits_domain_a, cam_logits_domain_b, side: str = "generator") -> torch.Tensor:
    """BCE pushing domain-a logits to 1 and domain-b logits to 0, summed over heads.

    generator side: a = the generator's auxiliary logits on its own input
    domain, b = on the other domain. discriminator side: a = real, b = fake.
    """
    if side not in ("generator", "discriminator"):
        raise ValidationError(f"side must be 'generator' or 'discriminator', got {side!r}")
    a, b = _as_list(cam_logits_domain_a), _as_list(cam_logits_domain_b)
    if len(a) != len(b):
        raise ValidationError(f"{len(a)} vs {len(b)} CAM heads")
    # saturated logits stay finite
    a = [torch.clamp(la, -CAM_LOGIT_CLAMP, CAM_LOGIT_CLAMP) for la in a]
    b = [torch.clamp(lb, -CAM_LOGIT_CLAMP, CAM_LOGIT_CLAMP) for lb in b]
    return sum(
        F.binary_cross_entropy_with_logits(la, torch.ones_like(la))
        + F.binary_cross_entropy_with_logits(lb, torch.zeros_like(lb))
        for la, lb in zip(a, b)
    )


def lip_sync_loss(x, G_s2t, G_t2s, cycled=None) -> torch.Tensor:
    """Cycle L1 over rows [H/2, H) only; ``cycled`` is an already computed G_t2s(G_s2t(x))."""
    if cycled is None:
        cycled = _image(G_t2s(_image(G_s2t(x))))
    return (lower_half(x) - lower_half(cycled)).abs().mean()


def stage2_blink_loss(x, cycled_x, landmark_fn: Callable[[torch.Tensor], torch.Tensor]) -> torch.Tensor:
    """|EAR(x) - EAR(cycle(x))| with landmarks from ``landmark_fn`` ([B, 2, 6, 2])."""
    return blink_loss(landmark_fn(x), landmark_fn(cycled_x))


def predictor_loss(clip, P, t: Optional[int] = None) -> torch.Tensor:
    """Sum over every window of mean ||x_{s+t} - P(x_{s:s+t})||^2."""
    clip = _windows(clip)
    t = P.past_frames if t is None else t
    n = clip.shape[1]
    if n < t + 1:
        raise ValidationError(f"clip of {n} frames is too short for a predictor with t={t}")
    return sum(((clip[:, s + t] - P(clip[:, s : s + t])) ** 2).mean() for s in range(n - t))


def term_weights(weights) -> Dict[str, float]:
    return {
        "G_GAN": weights.lambda_adv,
        "G_CAM": weights.lambda_cam,
        "recycle": weights.lambda_recycle,
        "identity": weights.lambda_identity,
        "lip": weights.lambda_lip,
        "BL": weights.lambda_BL,
    }


def stage2_objective(bundle: LossBundle, weights) -> torch.Tensor:
    lam = term_weights(weights)
    bundle.weights = {k: lam[k] for k in lam if k in bundle}
    return sum(lam[k] * bundle[k] for k in lam if k in bundle)


# ------------------------------------------------------------------ step ---

def _check(name, value):
    v = float(value)
    if not np.isfinite(v):
        raise NonFiniteLossError(name, v)


def build_stage2_optimizers(networks: Stage2Networks, settings):
    return {name: make_optimizer(net.parameters(), settings) for name, net in networks.as_dict().items()}


def stage2_train_step(
    batch_a: torch.Tensor,
    batch_b: torch.Tensor,
    networks: Stage2Networks,
    optimizers: Mapping[str, torch.optim.Optimizer],
    weights,
    identity_literal: bool = False,
    landmark_fn: Optional[Callable] = None,
    rho_clipper: Optional[RhoClipper] = None,
) -> LossBundle:
    """Discriminators, then predictors, then generators; rho clipped last."""
    nets = networks
    x, y = _windows(batch_a), _windows(batch_b)
    t = nets.predictor_s.past_frames
    if x.shape[1] < t + 1 or y.shape[1] < t + 1:
        raise ValidationError(f"stage-2 windows need {t + 1} frames, got {x.shape[1]} and {y.shape[1]}")
    x_f, y_f = x.flatten(0, 1), y.flatten(0, 1)
    bundle = LossBundle()

    fake_t, cam_s2t_x, _ = nets.gen_s2t(x_f)
    fake_s, cam_t2s_y, _ = nets.gen_t2s(y_f)

    # discriminators
    dt_real, dt_fake = nets.disc_t(y_f), nets.disc_t(fake_t.detach())
    ds_real, ds_fake = nets.disc_s(x_f), nets.disc_s(fake_s.detach())
    d_gan = lsgan_loss(dt_real.score_maps, dt_fake.score_maps) + lsgan_loss(ds_real.score_maps, ds_fake.score_maps)
    d_cam = cam_loss(dt_real.cam_logits, dt_fake.cam_logits, "discriminator") + cam_loss(
        ds_real.cam_logits, ds_fake.cam_logits, "discriminator"
    )
    loss_d = d_gan + weights.lambda_cam * d_cam
    bundle["D_GAN"], bundle["D_CAM"] = d_gan.detach(), d_cam.detach()
    _check("D", loss_d)
    for name in ("disc_t", "disc_s"):
        optimizers[name].zero_grad(set_to_none=True)
    loss_d.backward()
    for name in ("disc_t", "disc_s"):
        optimizers[name].step()

    # predictors, on real frames only
    p_s = predictor_loss(x, nets.predictor_s, t)
    p_t = predictor_loss(y, nets.predictor_t, t)
    _check("P_s", p_s)
    _check("P_t", p_t)
    for name in ("predictor_s", "predictor_t"):
        optimizers[name].zero_grad(set_to_none=True)
    (p_s + p_t).backward()
    for name in ("predictor_s", "predictor_t"):
        optimizers[name].step()
    bundle["P_s"], bundle["P_t"] = p_s.detach(), p_t.detach()

    # generators
    dt_fake, ds_fake = nets.disc_t(fake_t), nets.disc_s(fake_s)
    bundle["G_GAN"] = (
        lsgan_loss(None, dt_fake.score_maps, "generator")
        + lsgan_loss(None, ds_fake.score_maps, "generator")
        + lsgan_loss(None, dt_fake.cam_logits, "generator")
        + lsgan_loss(None, ds_fake.cam_logits, "generator")
    )
    same_t, cam_s2t_y, _ = nets.gen_s2t(y_f)
    same_s, cam_t2s_x, _ = nets.gen_t2s(x_f)
    bundle["G_CAM"] = cam_loss(cam_s2t_x, cam_s2t_y, "generator") + cam_loss(cam_t2s_y, cam_t2s_x, "generator")
    if identity_literal:
        bundle["identity"] = identity_loss(x_f, nets.gen_s2t, fake_t) + identity_loss(y_f, nets.gen_t2s, fake_s)
    else:
        bundle["identity"] = identity_loss(y_f, nets.gen_s2t, same_t) + identity_loss(x_f, nets.gen_t2s, same_s)
    bundle["recycle"] = recycle_loss(x, nets.gen_s2t, nets.gen_t2s, nets.predictor_t) + recycle_loss(
        y, nets.gen_t2s, nets.gen_s2t, nets.predictor_s
    )
    cycled_x = _image(nets.gen_t2s(fake_t))
    bundle["lip"] = lip_sync_loss(x_f, nets.gen_s2t, nets.gen_t2s, cycled_x)
    if landmark_fn is not None:
        bundle["BL"] = stage2_blink_loss(x_f, cycled_x, landmark_fn)

    bundle.check_finite()
    objective = stage2_objective(bundle, weights)
    for name in ("gen_s2t", "gen_t2s"):
        optimizers[name].zero_grad(set_to_none=True)
    objective.backward()
    for name in ("gen_s2t", "gen_t2s"):
        optimizers[name].step()
    clipper = rho_clipper or RhoClipper()
    clipper(nets.gen_s2t)
    clipper(nets.gen_t2s)

    bundle.values = {k: v.detach() for k, v in bundle.values.items()}
    return bundle


# -------------------------------------------------------------- training ---

def load_landmark_fn(stage1_checkpoint, channels: int) -> Optional[Callable]:
    """Frozen stage-1 landmark head, or None when no checkpoint carries one."""
    if not stage1_checkpoint:
        return None
    path = Path(stage1_checkpoint)
    if not (path / "landmark_head.bin").is_file():
        logger.warning("no landmark_head.bin in %s; stage-2 blink loss disabled", path)
        return None
    head = LandmarkHead(channels)
    load_networks(path, {"landmark_head": head})
    head.requires_grad_(False)
    head.eval()
    return head


def train_stage2(cfg: PipelineConfig, run_dir, resume: bool = False) -> List[Path]:
    s2 = cfg.stage2
    run_dir = Path(run_dir) / STAGE2_DIR
    ckpt_root = run_dir / "checkpoints"
    seed_everything(cfg.seed)

    t = s2.network.past_frames
    streams = make_unpaired_streams(cfg.paths.source_dir, cfg.paths.target_dir, t)
    networks = build_stage2_networks(s2.network)
    optimizers = build_stage2_optimizers(networks, s2.optimizer)
    landmark_fn = load_landmark_fn(cfg.paths.stage1_checkpoint, cfg.stage1.network.landmark_channels)
    if landmark_fn is None:
        logger.warning("stage-2 blink loss skipped: no landmark head available")
    log = LossLog(run_dir / "loss_log.csv")
    net_hash = network_hash(s2.network)
    clipper = RhoClipper()

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
        start_epoch = int(header["epoch"])
        log.truncate_after(start_epoch)
        logger.info("resuming stage 2 from %s (epoch %d)", latest, start_epoch)

    n_pairs = count_stage2_pairs(streams, t)
    written = []
    step = start_epoch * n_pairs
    for epoch in range(start_epoch, s2.epochs):
        set_learning_rate(optimizers, lr_schedule(epoch, s2.optimizer))
        bundles = []
        pairs = stage2_window_pairs(streams, t, epoch, cfg.seed, s2.network.resolution)
        for window_a, window_b in tqdm(pairs, total=n_pairs, desc=f"stage2 epoch {epoch + 1}", leave=False):
            bundles.append(
                stage2_train_step(
                    window_a, window_b, networks, optimizers, s2.weights, s2.identity_literal, landmark_fn, clipper
                )
            )
            step += 1
        names = sorted({n for b in bundles for n in b.values})
        means = {n: float(np.mean([float(b[n]) for b in bundles if n in b])) for n in names}
        log.append(epoch + 1, 0, means)
        logger.info("stage2 epoch %d: %s", epoch + 1, ", ".join(f"{k}={v:.4f}" for k, v in means.items()))
        header = {"config_hash": config_hash(cfg), "network_hash": net_hash, "step": step}
        extra = {
            "optimizers": {name: opt.state_dict() for name, opt in optimizers.items()},
            "torch_rng": torch.get_rng_state(),
            "numpy_rng": np.random.get_state(),
        }
        written.append(write_checkpoint(ckpt_root, epoch + 1, networks.as_dict(), header, extra))
    return written
