# stage1_losses.py
"""Stage-1 losses. Each one is a pure function of network outputs and is
differentiable wherever its inputs are."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np
import torch

from errors import NonFiniteLossError, ProviderError, ValidationError

LOG_EPS = 1e-12

PHASE_LOSSES: Dict[int, frozenset] = {
    1: frozenset({"GAN", "FM", "PL"}),
    2: frozenset({"GAN", "FM", "PL", "RL", "CL", "TAL"}),
    3: frozenset({"GAN", "FM", "PL", "RL", "CL", "TAL", "BL"}),
}


@dataclass
class EyeLandmarkSet:
    """Six eye points p1..p6 in pixels; p1 and p4 are the eye corners."""

    points: Union[np.ndarray, torch.Tensor]

    def __post_init__(self):
        if not isinstance(self.points, torch.Tensor):
            self.points = np.asarray(self.points, dtype=np.float64)
        if tuple(self.points.shape[-2:]) != (6, 2):
            raise ValidationError(f"eye landmarks must be [6, 2], got {tuple(self.points.shape)}")

    def point(self, k: int):
        return self.points[..., k - 1, :]


@dataclass
class LossBundle:
    """Named scalar losses of one training step, with the weights and phase
    they were combined under."""

    values: Dict[str, torch.Tensor] = field(default_factory=dict)
    weights: Dict[str, float] = field(default_factory=dict)
    phase: Optional[int] = None

    def __getitem__(self, name):
        return self.values[name]

    def __setitem__(self, name, value):
        self.values[name] = value

    def __contains__(self, name):
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def scalars(self) -> Dict[str, float]:
        return {k: float(v) for k, v in self.values.items()}

    def check_finite(self, names: Optional[Iterable[str]] = None):
        for name in names if names is not None else self.values:
            value = float(self.values[name])
            if not math.isfinite(value):
                raise NonFiniteLossError(name, value)


def _as_list(x) -> list:
    return list(x) if isinstance(x, (list, tuple)) else [x]


def _log(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x.clamp(min=LOG_EPS))


# ---------------------------------------------------------- adversarial ---

def adversarial_loss(scores_real, scores_fake, side: str = "discriminator") -> torch.Tensor:
    """Sigmoid-score GAN loss summed over discriminator scales.

    discriminator: -E[log D(x)] - E[log(1 - D(G(z)))]
    generator:     -E[log D(G(z))]  (non-saturating; ``scores_real`` unused)
    """
    fakes = _as_list(scores_fake)
    if side == "discriminator":
        reals = _as_list(scores_real)
        if len(reals) != len(fakes):
            raise ValidationError(f"{len(reals)} real scales vs {len(fakes)} fake scales")
        return sum(-_log(r).mean() - _log(1 - f).mean() for r, f in zip(reals, fakes))
    if side == "generator":
        return sum(-_log(f).mean() for f in fakes)
    raise ValidationError(f"side must be 'generator' or 'discriminator', got {side!r}")


def _position_term(real, fake) -> torch.Tensor:
    return sum(_log(r).mean() + _log(1 - f).mean() for r, f in zip(_as_list(real), _as_list(fake)))


def temporal_adversarial_loss(window_scores_real, window_scores_fake, L: int) -> torch.Tensor:
    """Smooth-transition objective over a window of L+1 frames, maximization form.

    Sum over positions i = t-L..t of E[log D(x_i)] + E[log(1 - D(G(z_i)))].
    The discriminator maximizes it, so it is <= 0 and is 0 for a perfect D.
    Each position may carry one score tensor or a list of per-scale tensors.
    """
    if L < 0:
        raise ValidationError(f"window length L must be >= 0, got {L}")
    if len(window_scores_real) != L + 1 or len(window_scores_fake) != L + 1:
        raise ValidationError(
            f"expected {L + 1} window positions, got {len(window_scores_real)} real "
            f"and {len(window_scores_fake)} fake"
        )
    return sum(_position_term(r, f) for r, f in zip(window_scores_real, window_scores_fake))


def temporal_generator_loss(window_scores_fake) -> torch.Tensor:
    """Non-saturating generator counterpart: sum_i -E[log D(G(z_i))]."""
    return sum(adversarial_loss(None, f, side="generator") for f in window_scores_fake)


def window_positions(score_maps: Sequence[torch.Tensor], L: int) -> List[List[torch.Tensor]]:
    """Split per-scale temporal score maps [B, L+1, h, w] into L+1 positions,
    each a list of per-scale [B, 1, h, w] maps."""
    for s in score_maps:
        if s.shape[1] != L + 1:
            raise ValidationError(f"temporal score map has {s.shape[1]} channels, expected {L + 1}")
    return [[s[:, i : i + 1] for s in score_maps] for i in range(L + 1)]


# ----------------------------------------------------- feature matching ---

def _nested(features) -> List[List[torch.Tensor]]:
    features = _as_list(features)
    if features and isinstance(features[0], torch.Tensor):
        return [features]
    return [_as_list(f) for f in features]


def feature_matching_loss(features_real, features_fake) -> torch.Tensor:
    """Sum over scales k and layers i of (1/N_i) * ||D_k^i(x) - D_k^i(G(z))||_1."""
    real, fake = _nested(features_real), _nested(features_fake)
    if len(real) != len(fake):
        raise ValidationError(f"feature scales differ: {len(real)} vs {len(fake)}")
    total = None
    for k, (layers_r, layers_f) in enumerate(zip(real, fake)):
        if len(layers_r) != len(layers_f):
            raise ValidationError(f"scale {k}: {len(layers_r)} vs {len(layers_f)} layers")
        for i, (r, f) in enumerate(zip(layers_r, layers_f)):
            if r.shape != f.shape:
                raise ValidationError(
                    f"scale {k} layer {i}: shape {tuple(r.shape)} vs {tuple(f.shape)}"
                )
            term = (r - f).abs().mean()
            total = term if total is None else total + term
    if total is None:
        raise ValidationError("no features to match")
    return total


def perceptual_loss(image_a, image_b, feature_provider, weight: float = 1.0) -> torch.Tensor:
    """weight * sum_i (1/M_i) * ||F_i(a) - F_i(b)||_1 over provider layers."""
    try:
        feats_a = list(feature_provider(image_a))
        feats_b = list(feature_provider(image_b))
    except ProviderError:
        raise
    except Exception as e:
        raise ProviderError(f"feature provider failed: {e}") from e
    if len(feats_a) != len(feats_b) or not feats_a:
        raise ProviderError(f"feature provider returned {len(feats_a)} vs {len(feats_b)} layers")
    return weight * sum((a - b).abs().mean() for a, b in zip(feats_a, feats_b))


# -------------------------------------------------------- reconstruction ---

def lower_half(images: torch.Tensor) -> torch.Tensor:
    """Rows [H/2, H) of [..., H, W] tensors; odd H gets a replicated bottom row."""
    if images.shape[-2] % 2:
        images = torch.cat([images, images[..., -1:, :]], dim=-2)
    return images[..., images.shape[-2] // 2 :, :]


def reconstruction_loss_lower(real_frame: torch.Tensor, generated_frame: torch.Tensor) -> torch.Tensor:
    if real_frame.shape != generated_frame.shape:
        raise ValidationError(
            f"frame shapes differ: {tuple(real_frame.shape)} vs {tuple(generated_frame.shape)}"
        )
    return (lower_half(real_frame) - lower_half(generated_frame)).abs().mean()


# ---------------------------------------------------------- contrastive ---

def _pair_vectors(pair):
    if hasattr(pair, "v"):
        return pair.v, pair.a
    return pair[0], pair[1]


def contrastive_loss(pairs, labels, margin: float = 1.0) -> torch.Tensor:
    """(1/2N) * sum[y d^2 + (1 - y) max(margin - d, 0)^2], d = ||v - a||_2.

    Batched pairs ([B, D] embeddings) count B towards N.
    """
    if margin <= 0:
        raise ValidationError(f"margin must be positive, got {margin}")
    pairs = list(pairs)
    if not pairs:
        raise ValidationError("contrastive loss needs at least one pair")
    labels = list(labels)
    if len(labels) != len(pairs):
        raise ValidationError(f"{len(pairs)} pairs but {len(labels)} labels")

    total, count = None, 0
    for pair, y in zip(pairs, labels):
        v, a = _pair_vectors(pair)
        if v.shape != a.shape:
            raise ValidationError(f"embedding shapes differ: {tuple(v.shape)} vs {tuple(a.shape)}")
        sq = ((v - a) ** 2).sum(dim=-1)
        d = torch.sqrt(sq.clamp(min=1e-12))
        y = torch.as_tensor(y, dtype=sq.dtype)
        term = (y * sq + (1 - y) * (margin - d).clamp(min=0) ** 2).sum()
        total = term if total is None else total + term
        count += sq.numel()
    return total / (2 * count)


# ---------------------------------------------------------------- blink ---

def _norm(x):
    if isinstance(x, torch.Tensor):
        return torch.sqrt((x**2).sum(dim=-1).clamp(min=1e-24))
    return np.sqrt((np.asarray(x) ** 2).sum(axis=-1))


def eye_aspect_ratio(landmarks):
    """(||p2 - p6|| + ||p3 - p5||) / ||p1 - p4||, batched over leading dims.

    Accepts an EyeLandmarkSet or an array/tensor [..., 6, 2].
    """
    points = landmarks.points if isinstance(landmarks, EyeLandmarkSet) else landmarks
    if not isinstance(points, torch.Tensor):
        points = np.asarray(points, dtype=np.float64)
    if tuple(points.shape[-2:]) != (6, 2):
        raise ValidationError(f"eye landmarks must be [..., 6, 2], got {tuple(points.shape)}")
    p = [points[..., k, :] for k in range(6)]
    width = _norm(p[0] - p[3])
    min_width = float(width.min()) if isinstance(width, torch.Tensor) else float(np.min(width))
    if min_width <= 1e-9:
        raise ValidationError("degenerate eye landmarks: p1 and p4 coincide")
    return (_norm(p[1] - p[5]) + _norm(p[2] - p[4])) / width


def face_aspect_ratio(points):
    """EAR averaged over both eyes, points [..., 2, 6, 2]."""
    ear = eye_aspect_ratio(points)
    return ear.mean(dim=-1) if isinstance(ear, torch.Tensor) else np.mean(ear, axis=-1)


def _ear_of(x):
    if isinstance(x, EyeLandmarkSet):
        return eye_aspect_ratio(x)
    if isinstance(x, (tuple, list)) and len(x) == 2 and all(isinstance(e, EyeLandmarkSet) for e in x):
        return (eye_aspect_ratio(x[0]) + eye_aspect_ratio(x[1])) / 2
    if isinstance(x, (int, float)):
        return float(x)
    if x.ndim >= 3 and x.shape[-3] == 2:
        return face_aspect_ratio(x)
    return eye_aspect_ratio(x)


def blink_loss(landmarks_real, landmarks_generated):
    """|m_r - m_g|, averaged over any batch.

    Each side is an EyeLandmarkSet, a (left, right) pair of them, an array or
    tensor of both eyes [..., 2, 6, 2], or an EAR value.
    """
    m_r, m_g = _ear_of(landmarks_real), _ear_of(landmarks_generated)
    diff = m_r - m_g
    if isinstance(diff, torch.Tensor):
        return diff.abs().mean()
    return float(np.mean(np.abs(diff)))


# ------------------------------------------------------------ objective ---

def term_weights(weights) -> Dict[str, float]:
    """Per-loss weight of the stage-1 objective."""
    return {
        "GAN": 1.0,
        "TAL": 1.0,
        "FM": weights.lambda_FM,
        "PL": weights.lambda_PL,
        "CL": weights.lambda_CL,
        "BL": weights.lambda_BL,
        "RL": weights.lambda_RL,
    }


def stage1_objective(loss_bundle: LossBundle, weights, phase: int) -> torch.Tensor:
    """Weighted sum of the losses active in ``phase``; others contribute nothing."""
    if phase not in PHASE_LOSSES:
        raise ValidationError(f"phase must be 1, 2 or 3, got {phase}")
    active = PHASE_LOSSES[phase]
    missing = sorted(active - set(loss_bundle.values))
    if missing:
        raise ValidationError(f"phase {phase} needs losses {missing}, not in the bundle")
    lam = term_weights(weights)
    loss_bundle.weights = {name: lam[name] for name in active}
    loss_bundle.phase = phase
    return sum(lam[name] * loss_bundle[name] for name in sorted(active))
