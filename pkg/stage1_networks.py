# stage1_networks.py
"""Stage-1 networks: speech encoder, SPADE generator, the three
discriminators (frame, temporal, sync) and the eye-landmark head.

Images enter and leave these modules as [B, 3, H, W] tensors in [-1, 1].
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import CheckpointError, ValidationError

logger = logging.getLogger(__name__)

NORM_EPS = 1e-5
SYNC_FRAMES = 5
NUM_SCALES = 3


@dataclass
class SpeechEmbedding:
    vector: torch.Tensor  # [B, D]
    source_window_index: int = -1


@dataclass
class SpadeModulation:
    gamma: torch.Tensor
    beta: torch.Tensor


@dataclass
class DiscriminatorOutput:
    score_maps: List[torch.Tensor]
    features: List[List[torch.Tensor]]


@dataclass
class SyncPair:
    v: torch.Tensor
    a: torch.Tensor


def _lrelu(x):
    return F.leaky_relu(x, 0.2)


# ------------------------------------------------------------ speech ----

class SpeechEncoder(nn.Module):
    """Two 1-D convolutions and a bidirectional GRU over one MFCC window."""

    def __init__(self, n_mfcc: int = 13, hidden: int = 32, embedding_dim: int = 256):
        super().__init__()
        self.n_mfcc = n_mfcc
        self.embedding_dim = embedding_dim
        self.conv1 = nn.Conv1d(n_mfcc, hidden, kernel_size=3, padding=1)
        self.conv2 = nn.Conv1d(hidden, hidden, kernel_size=3, stride=2, padding=1)
        self.rnn = nn.GRU(hidden, hidden, batch_first=True, bidirectional=True)
        self.fc = nn.Linear(2 * hidden, embedding_dim)

    def forward(self, mfcc: torch.Tensor) -> torch.Tensor:
        if mfcc.dim() == 2:
            mfcc = mfcc[None]
        if mfcc.dim() != 3 or mfcc.shape[-1] != self.n_mfcc:
            raise ValidationError(
                f"speech encoder expects [B, T, {self.n_mfcc}] MFCCs, got {tuple(mfcc.shape)}"
            )
        x = _lrelu(self.conv1(mfcc.transpose(1, 2)))
        x = _lrelu(self.conv2(x))
        x, _ = self.rnn(x.transpose(1, 2))
        return self.fc(x.mean(dim=1))

    def load_pretrained(self, path) -> None:
        """Load external encoder weights; keys that do not fit are reported and skipped."""
        try:
            state = torch.load(Path(path), map_location="cpu")
        except Exception as e:
            raise CheckpointError(f"loading pretrained speech encoder failed: {e}") from e
        own = self.state_dict()
        usable = {k: v for k, v in state.items() if k in own and own[k].shape == v.shape}
        skipped = sorted(set(state) - set(usable))
        if skipped:
            logger.warning("pretrained encoder: skipped %d incompatible keys: %s", len(skipped), skipped)
        self.load_state_dict(usable, strict=False)


def encode_speech(window, encoder: SpeechEncoder) -> SpeechEmbedding:
    """Embed one MfccWindow (or a raw [T, 13] / [B, T, 13] array)."""
    coefficients = getattr(window, "coefficients", window)
    index = getattr(window, "center_frame_index", -1)
    param = next(encoder.parameters())
    x = torch.as_tensor(np.asarray(coefficients) if not isinstance(coefficients, torch.Tensor) else coefficients)
    return SpeechEmbedding(vector=encoder(x.to(param.dtype)), source_window_index=index)


# -------------------------------------------------------------- SPADE ----

def standardize(x: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Parameter-free per-channel standardization over batch and space."""
    mean = x.mean(dim=(0, 2, 3), keepdim=True)
    var = x.var(dim=(0, 2, 3), unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


class SPADE(nn.Module):
    def __init__(self, norm_nc: int, hidden: int = 32, label_nc: int = 3):
        super().__init__()
        self.mlp_shared = nn.Sequential(nn.Conv2d(label_nc, hidden, 3, padding=1), nn.ReLU())
        self.mlp_gamma = nn.Conv2d(hidden, norm_nc, 3, padding=1)
        self.mlp_beta = nn.Conv2d(hidden, norm_nc, 3, padding=1)

    def modulation(self, identity_image: torch.Tensor, size) -> SpadeModulation:
        segmap = F.interpolate(identity_image, size=tuple(size), mode="nearest")
        actv = self.mlp_shared(segmap)
        return SpadeModulation(gamma=self.mlp_gamma(actv), beta=self.mlp_beta(actv))

    def forward(self, x, identity_image):
        return spade_normalize(x, identity_image, self)


def spade_normalize(activation: torch.Tensor, identity_image: torch.Tensor, modulation_net: SPADE) -> torch.Tensor:
    """normalized(activation) * (1 + gamma(x)) + beta(x)."""
    if identity_image.dim() != 4:
        raise ValidationError(f"identity image must be [B, C, H, W], got {tuple(identity_image.shape)}")
    normalized = standardize(activation)
    mod = modulation_net.modulation(identity_image, activation.shape[2:])
    return normalized * (1 + mod.gamma) + mod.beta


class SpadeResBlock(nn.Module):
    def __init__(self, fin: int, fout: int, hidden: int):
        super().__init__()
        fmiddle = min(fin, fout)
        self.learned_shortcut = fin != fout
        self.conv_0 = nn.Conv2d(fin, fmiddle, 3, padding=1)
        self.conv_1 = nn.Conv2d(fmiddle, fout, 3, padding=1)
        self.norm_0 = SPADE(fin, hidden)
        self.norm_1 = SPADE(fmiddle, hidden)
        if self.learned_shortcut:
            self.conv_s = nn.Conv2d(fin, fout, 1, bias=False)
            self.norm_s = SPADE(fin, hidden)

    def forward(self, x, identity):
        x_s = self.conv_s(self.norm_s(x, identity)) if self.learned_shortcut else x
        dx = self.conv_0(_lrelu(self.norm_0(x, identity)))
        dx = self.conv_1(_lrelu(self.norm_1(dx, identity)))
        return x_s + dx


class SpadeGenerator(nn.Module):
    """Speech embedding seeds a 4x4 map; every block is SPADE-modulated by
    the identity image; nearest upsampling doubles the size per block."""

    def __init__(self, resolution: int = 64, embedding_dim: int = 256, base_channels: int = 16, hidden: int = 32):
        super().__init__()
        if resolution < 8 or resolution & (resolution - 1):
            raise ValidationError(f"resolution must be a power of two >= 8, got {resolution}")
        self.resolution = resolution
        self.embedding_dim = embedding_dim
        n_up = int(math.log2(resolution // 4))
        chans = [base_channels * min(4, 2 ** (n_up - i)) for i in range(n_up + 1)]
        self.seed_channels = chans[0]
        self.fc = nn.Linear(embedding_dim, chans[0] * 16)
        self.blocks = nn.ModuleList(SpadeResBlock(chans[i], chans[i + 1], hidden) for i in range(n_up))
        self.conv_img = nn.Conv2d(chans[-1], 3, 3, padding=1)

    def forward(self, identity_image: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
        if identity_image.dim() != 4 or tuple(identity_image.shape[1:]) != (3, self.resolution, self.resolution):
            raise ValidationError(
                f"identity image must be [B, 3, {self.resolution}, {self.resolution}], "
                f"got {tuple(identity_image.shape)}"
            )
        if embedding.shape[-1] != self.embedding_dim:
            raise ValidationError(
                f"speech embedding has dim {embedding.shape[-1]}, generator expects {self.embedding_dim}"
            )
        x = self.fc(embedding).view(embedding.shape[0], self.seed_channels, 4, 4)
        for block in self.blocks:
            x = block(x, identity_image)
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        return torch.tanh(self.conv_img(_lrelu(x)))


class Stage1Generator(nn.Module):
    """Speech encoder + SPADE decoder, trained together."""

    def __init__(self, settings):
        super().__init__()
        self.encoder = SpeechEncoder(settings.n_mfcc, settings.encoder_hidden, settings.embedding_dim)
        self.decoder = SpadeGenerator(
            settings.resolution, settings.embedding_dim, settings.base_channels, settings.spade_hidden
        )

    def forward(self, identity_image, mfcc):
        return self.decoder(identity_image, self.encoder(mfcc))


def generate_frame(identity_image, embedding: SpeechEmbedding, generator: Stage1Generator) -> torch.Tensor:
    decoder = generator.decoder if isinstance(generator, Stage1Generator) else generator
    return decoder(identity_image, embedding.vector)


# ------------------------------------------------------ discriminators ----

class PatchDiscriminator(nn.Module):
    def __init__(self, in_channels: int, channels: int = 16, n_layers: int = 3, out_channels: int = 1):
        super().__init__()
        convs = []
        ch_in, ch = in_channels, channels
        for _ in range(n_layers):
            convs.append(nn.Conv2d(ch_in, ch, kernel_size=3, stride=2, padding=1))
            ch_in, ch = ch, min(ch * 2, channels * 8)
        self.convs = nn.ModuleList(convs)
        self.final = nn.Conv2d(ch_in, out_channels, kernel_size=3, padding=1)

    def forward(self, x):
        feats = []
        for conv in self.convs:
            x = _lrelu(conv(x))
            feats.append(x)
        return torch.sigmoid(self.final(x)), feats


class MultiScaleDiscriminator(nn.Module):
    """Three identical patch discriminators on the input at x1, x1/2 and x1/4."""

    def __init__(self, in_channels: int, channels: int = 16, n_layers: int = 3, out_channels: int = 1):
        super().__init__()
        self.in_channels = in_channels
        self.scales = nn.ModuleList(
            PatchDiscriminator(in_channels, channels, n_layers, out_channels) for _ in range(NUM_SCALES)
        )

    @staticmethod
    def pyramid(x: torch.Tensor) -> List[torch.Tensor]:
        return [x, F.avg_pool2d(x, 2), F.avg_pool2d(x, 4)]

    def forward(self, x: torch.Tensor) -> DiscriminatorOutput:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValidationError(
                f"discriminator expects [B, {self.in_channels}, H, W], got {tuple(x.shape)}"
            )
        scores, features = [], []
        for disc, inp in zip(self.scales, self.pyramid(x)):
            score, feats = disc(inp)
            scores.append(score)
            features.append(feats)
        return DiscriminatorOutput(score_maps=scores, features=features)


class FrameDiscriminator(MultiScaleDiscriminator):
    """Judges a frame conditioned on the identity image (6 input channels)."""

    def __init__(self, resolution: int, channels: int = 16, n_layers: int = 3):
        super().__init__(6, channels, n_layers)
        self.resolution = resolution

    def forward(self, frame, identity_image):
        if tuple(frame.shape[-2:]) != (self.resolution, self.resolution):
            raise ValidationError(
                f"frame must be {self.resolution}x{self.resolution}, got {tuple(frame.shape[-2:])}"
            )
        return super().forward(torch.cat([frame, identity_image], dim=1))


def frame_discriminate(frame, identity_image, disc: FrameDiscriminator) -> DiscriminatorOutput:
    return disc(frame, identity_image)


class TemporalDiscriminator(MultiScaleDiscriminator):
    """Scores L+1 consecutive frames stacked on channels; one score channel per position."""

    def __init__(self, window_length: int, channels: int = 16, n_layers: int = 3):
        super().__init__(3 * window_length, channels, n_layers, out_channels=window_length)
        self.window_length = window_length

    def forward(self, frame_window):
        if frame_window.dim() == 5:
            if frame_window.shape[1] != self.window_length:
                raise ValidationError(
                    f"temporal window has {frame_window.shape[1]} frames, expected {self.window_length}"
                )
            frame_window = frame_window.flatten(1, 2)
        return super().forward(frame_window)


def temporal_discriminate(frame_window, disc: TemporalDiscriminator) -> DiscriminatorOutput:
    return disc(frame_window)


class SyncDiscriminator(nn.Module):
    """Embeds 5 lower-half frames and the 200 ms MFCC window into one space."""

    def __init__(self, resolution: int = 224, channels: int = 16, dim: int = 256, n_mfcc: int = 13):
        super().__init__()
        self.resolution = resolution
        self.n_mfcc = n_mfcc
        convs = []
        ch_in, ch = 3 * SYNC_FRAMES, channels
        for _ in range(4):
            convs += [nn.Conv2d(ch_in, ch, kernel_size=3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            ch_in, ch = ch, ch * 2
        self.video = nn.Sequential(*convs)
        self.video_fc = nn.Linear(ch_in, dim)
        self.audio = nn.Sequential(
            nn.Conv1d(n_mfcc, channels, kernel_size=3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv1d(channels, 2 * channels, kernel_size=3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
        )
        self.audio_fc = nn.Linear(2 * channels, dim)

    def forward(self, lower_halves, mfcc) -> SyncPair:
        if isinstance(lower_halves, (list, tuple)):
            lower_halves = torch.stack(list(lower_halves), dim=1)
        if lower_halves.dim() == 4:
            lower_halves = lower_halves[None]
        if lower_halves.dim() != 5 or lower_halves.shape[1] != SYNC_FRAMES:
            raise ValidationError(
                f"sync discriminator needs exactly {SYNC_FRAMES} frames, got shape {tuple(lower_halves.shape)}"
            )
        if mfcc.dim() == 2:
            mfcc = mfcc[None]
        if mfcc.dim() != 3 or mfcc.shape[-1] != self.n_mfcc:
            raise ValidationError(f"sync audio must be [B, T, {self.n_mfcc}], got {tuple(mfcc.shape)}")
        b = lower_halves.shape[0]
        frames = F.interpolate(
            lower_halves.flatten(0, 1), size=(self.resolution, self.resolution), mode="bilinear", align_corners=False
        )
        v = self.video(frames.reshape(b, -1, self.resolution, self.resolution))
        v = self.video_fc(F.adaptive_avg_pool2d(v, 1).flatten(1))
        a = self.audio(mfcc.transpose(1, 2)).mean(dim=2)
        return SyncPair(v=v, a=self.audio_fc(a))


def sync_embed(frames_lower_half, audio_mfcc, disc: SyncDiscriminator) -> SyncPair:
    return disc(frames_lower_half, audio_mfcc)


# ----------------------------------------------------------- landmarks ----

def _eye_template(cx: float, cy: float, w: float = 0.12, h: float = 0.04) -> List[List[float]]:
    return [
        [cx - w / 2, cy], [cx - w / 6, cy - h / 2], [cx + w / 6, cy - h / 2],
        [cx + w / 2, cy], [cx + w / 6, cy + h / 2], [cx - w / 6, cy + h / 2],
    ]


class LandmarkHead(nn.Module):
    """Regresses both eyes' six points, normalized to [0, 1] image coordinates.

    Output = mean-face template + bounded offset, so p1 and p4 never meet.
    """

    max_offset = 0.05

    def __init__(self, channels: int = 8):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, channels, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(channels, 2 * channels, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
        )
        self.fc = nn.Linear(2 * channels * 16, 24)
        template = torch.tensor([_eye_template(0.35, 0.4), _eye_template(0.65, 0.4)])
        self.register_buffer("template", template)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f = F.adaptive_avg_pool2d(self.features(x), 4).flatten(1)
        offset = self.max_offset * torch.tanh(self.fc(f)).view(-1, 2, 6, 2)
        return self.template.to(offset.dtype) + offset


# ---------------------------------------------------------------- bundle ----

@dataclass
class Stage1Networks:
    generator: Stage1Generator
    frame_d: FrameDiscriminator
    temporal_d: TemporalDiscriminator
    sync_d: SyncDiscriminator
    landmark_head: LandmarkHead

    def as_dict(self) -> Dict[str, nn.Module]:
        return {
            "generator": self.generator,
            "frame_d": self.frame_d,
            "temporal_d": self.temporal_d,
            "sync_d": self.sync_d,
            "landmark_head": self.landmark_head,
        }

    def to(self, dtype):
        for net in self.as_dict().values():
            net.to(dtype)
        return self


def build_stage1_networks(settings) -> Stage1Networks:
    return Stage1Networks(
        generator=Stage1Generator(settings),
        frame_d=FrameDiscriminator(settings.resolution, settings.disc_channels, settings.disc_layers),
        temporal_d=TemporalDiscriminator(settings.temporal_window + 1, settings.disc_channels, settings.disc_layers),
        sync_d=SyncDiscriminator(settings.sync_resolution, settings.sync_channels, settings.sync_dim, settings.n_mfcc),
        landmark_head=LandmarkHead(settings.landmark_channels),
    )
