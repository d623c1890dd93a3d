# providers.py
"""Small, swappable stand-ins for the pretrained models the pipeline leans on
(head pose, eye landmarks, perceptual features, identity embeddings, lip
reading). Everything is picked by name through ``resolve_provider``."""
from __future__ import annotations

import logging
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import ConfigError, ProviderError
from stage1_losses import EyeLandmarkSet

logger = logging.getLogger(__name__)


@runtime_checkable
class PoseProvider(Protocol):
    def estimate_pose(self, frame: np.ndarray) -> Tuple[float, float, float]:
        """(yaw, pitch, roll) in degrees for one [H, W, 3] frame."""


@runtime_checkable
class LandmarkProvider(Protocol):
    def eye_landmarks(
        self, frame: np.ndarray, index: Optional[int] = None
    ) -> Tuple[EyeLandmarkSet, EyeLandmarkSet]:
        """(left, right) eye landmarks in pixels."""


@runtime_checkable
class EmbeddingProvider(Protocol):
    dim: int

    def embed(self, image: np.ndarray) -> np.ndarray:
        """Fixed-length feature vector for one [H, W, 3] image in [0, 1]."""


@runtime_checkable
class LipReader(Protocol):
    def read(self, frames: np.ndarray) -> List[str]:
        """Word list transcribed from a [T, H, W, 3] frame stack."""


# FeatureProvider: any callable tensor [B, 3, H, W] -> list of feature tensors.
FeatureProvider = Callable[[torch.Tensor], List[torch.Tensor]]


# ----------------------------------------------------------------- pose ---

class SymmetryPoseProvider:
    """Brightness-symmetry heuristic: a frontal, upright face is roughly
    mirror-symmetric, so left/right and top/bottom imbalance stand in for
    yaw and pitch, diagonal imbalance for roll."""

    def __init__(self, max_angle: float = 90.0):
        self.max_angle = max_angle

    def estimate_pose(self, frame):
        frame = np.asarray(frame, dtype=np.float64)
        if frame.ndim != 3:
            raise ProviderError(f"expected an [H, W, C] frame, got shape {frame.shape}")
        gray = frame.mean(axis=2)
        h, w = gray.shape
        total = gray.sum() + 1e-8

        left, right = gray[:, : w // 2].sum(), gray[:, w - w // 2 :].sum()
        top, bottom = gray[: h // 2].sum(), gray[h - h // 2 :].sum()
        tl, br = gray[: h // 2, : w // 2].sum(), gray[h - h // 2 :, w - w // 2 :].sum()
        tr, bl = gray[: h // 2, w - w // 2 :].sum(), gray[h - h // 2 :, : w // 2].sum()

        yaw = self.max_angle * (left - right) / total
        pitch = self.max_angle * (top - bottom) / total
        roll = 0.5 * self.max_angle * ((tl + br) - (tr + bl)) / total
        return float(yaw), float(pitch), float(roll)


class FrontalPoseProvider:
    def estimate_pose(self, frame):
        return 0.0, 0.0, 0.0


# ------------------------------------------------------------ landmarks ---

class SidecarLandmarkProvider:
    """Landmarks shipped next to a clip as ``landmarks.npy`` ([T, 2, 6, 2])."""

    def __init__(self, landmarks: np.ndarray):
        self.landmarks = np.asarray(landmarks, dtype=np.float64)

    def eye_landmarks(self, frame, index=None):
        if index is None:
            raise ProviderError("sidecar landmarks are looked up by frame index")
        if not 0 <= index < len(self.landmarks):
            raise ProviderError(f"no sidecar landmarks for frame {index} (have {len(self.landmarks)})")
        left, right = self.landmarks[index]
        return EyeLandmarkSet(left), EyeLandmarkSet(right)


class HeadLandmarkProvider:
    """Eye landmarks regressed by the trained landmark head."""

    def __init__(self, head: nn.Module):
        self.head = head

    @torch.no_grad()
    def eye_landmarks(self, frame, index=None):
        h, w = frame.shape[:2]
        x = torch.as_tensor(np.asarray(frame), dtype=torch.float32).permute(2, 0, 1)[None] * 2 - 1
        param = next(self.head.parameters())
        points = self.head(x.to(param.dtype)).double()[0].numpy()
        points = points * np.array([w, h], dtype=np.float64)
        return EyeLandmarkSet(points[0]), EyeLandmarkSet(points[1])


# ------------------------------------------------------------- features ---

class RandomConvFeatures(nn.Module):
    """Frozen, seeded 3-layer conv net returning every layer's activation.

    Gradients still flow to the input, which is all the perceptual loss needs.
    """

    def __init__(self, channels: Sequence[int] = (8, 16, 32), seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        in_ch = 3
        for out_ch in channels:
            conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (9 * in_ch)) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            in_ch = out_ch
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ProviderError(f"feature provider expects [B, 3, H, W], got {tuple(x.shape)}")
        feats = []
        for conv in self.layers:
            x = F.leaky_relu(conv(x.to(conv.weight.dtype)), 0.2)
            feats.append(x)
        return feats


class PooledConvEmbedding:
    """Global-average-pooled RandomConvFeatures, concatenated over layers."""

    def __init__(self, channels: Sequence[int] = (8, 16, 32), seed: int = 0):
        self.net = RandomConvFeatures(channels, seed=seed).double()
        self.dim = int(sum(channels))

    @torch.no_grad()
    def embed(self, image):
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ProviderError(f"embedding expects an [H, W, 3] image, got {image.shape}")
        x = torch.from_numpy(image).permute(2, 0, 1)[None] * 2 - 1
        pooled = [f.mean(dim=(2, 3))[0] for f in self.net(x)]
        return torch.cat(pooled).numpy()


# ----------------------------------------------------------- lip reader ---

class EchoLipReader:
    """Returns a scripted transcript, whatever the frames show."""

    def __init__(self, transcript: Optional[Sequence[str]] = None):
        self.transcript = list(transcript or [])

    def read(self, frames):
        return list(self.transcript)


# ------------------------------------------------------------- registry ---

def _sidecar(landmarks=None, **_):
    if landmarks is None:
        raise ProviderError("the 'sidecar' landmark provider needs a landmarks array")
    return SidecarLandmarkProvider(landmarks)


def _landmark_head(head=None, **_):
    if head is None:
        raise ProviderError("the 'landmark_head' provider needs a trained landmark head")
    return HeadLandmarkProvider(head)


_REGISTRY: Dict[str, Dict[str, Callable]] = {
    "pose": {
        "symmetry": lambda **_: SymmetryPoseProvider(),
        "frontal": lambda **_: FrontalPoseProvider(),
    },
    "landmark": {"sidecar": _sidecar, "landmark_head": _landmark_head},
    "perceptual": {"random_conv": lambda seed=0, **_: RandomConvFeatures(seed=seed)},
    "embedding": {"random_conv": lambda seed=0, **_: PooledConvEmbedding(seed=seed)},
    "acd_embedding": {"random_conv": lambda seed=1, **_: PooledConvEmbedding(seed=seed)},
    "lip_reader": {"transcript_echo": lambda transcript=None, **_: EchoLipReader(transcript)},
}

REQUIRED_KINDS = frozenset({"pose", "perceptual", "embedding", "acd_embedding"})


def available_providers(kind: str) -> List[str]:
    if kind not in _REGISTRY:
        raise ConfigError(f"unknown provider kind '{kind}'")
    names = sorted(_REGISTRY[kind])
    return names if kind in REQUIRED_KINDS else ["none"] + names


def resolve_provider(kind: str, name: str, **context):
    """Instantiate provider ``name`` of ``kind``.

    ``"none"`` resolves to ``None`` for optional kinds; required kinds must name
    a registered provider. ``context`` carries run-time objects some providers
    need (sidecar landmarks, the landmark head, a transcript, a seed).
    """
    if kind not in _REGISTRY:
        raise ConfigError(f"unknown provider kind '{kind}'")
    if name == "none":
        if kind in REQUIRED_KINDS:
            raise ConfigError(f"provider '{kind}' is required and cannot be 'none'")
        return None
    factory = _REGISTRY[kind].get(name)
    if factory is None:
        raise ConfigError(
            f"unknown {kind} provider '{name}' (available: {', '.join(available_providers(kind))})"
        )
    logger.debug("resolved %s provider '%s'", kind, name)
    return factory(**context)
