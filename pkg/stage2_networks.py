# stage2_networks.py
"""Stage-2 translation networks: CAM + AdaLIN generators, local/global
discriminators with auxiliary CAM classifiers, and the UNet frame predictor.

Source domain ``s`` is the human talking head, target ``t`` the animated one.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import ValidationError

NORM_EPS = 1e-5


# ---------------------------------------------------------------- AdaLIN ---

@dataclass
class AdaLinParams:
    rho: torch.Tensor  # [C] in [0, 1]
    gamma: torch.Tensor  # [C] or [B, C]
    beta: torch.Tensor  # [C] or [B, C]


def _per_channel(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 1:
        return x.view(1, -1, 1, 1)
    if x.dim() == 2:
        return x[:, :, None, None]
    return x


def instance_norm(f: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    mean = f.mean(dim=(2, 3), keepdim=True)
    var = f.var(dim=(2, 3), unbiased=False, keepdim=True)
    return (f - mean) / torch.sqrt(var + eps)


def layer_norm(f: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    mean = f.mean(dim=(1, 2, 3), keepdim=True)
    var = f.var(dim=(1, 2, 3), unbiased=False, keepdim=True)
    return (f - mean) / torch.sqrt(var + eps)


def adalin(features: torch.Tensor, params: AdaLinParams, eps: float = NORM_EPS) -> torch.Tensor:
    """gamma * (rho * IN(f) + (1 - rho) * LN(f)) + beta."""
    if features.dim() != 4:
        raise ValidationError(f"AdaLIN expects [B, C, H, W], got {tuple(features.shape)}")
    rho = _per_channel(params.rho)
    mixed = rho * instance_norm(features, eps) + (1 - rho) * layer_norm(features, eps)
    return mixed * _per_channel(params.gamma) + _per_channel(params.beta)


class AdaLIN(nn.Module):
    """Learned rho; gamma and beta are supplied per call."""

    def __init__(self, channels: int, rho_init: float = 0.9):
        super().__init__()
        self.rho = nn.Parameter(torch.full((channels,), rho_init))

    def forward(self, x, gamma, beta):
        return adalin(x, AdaLinParams(self.rho, gamma, beta))


class RhoClipper:
    """Clamps every AdaLIN rho into [lo, hi]; apply after each optimizer step."""

    def __init__(self, lo: float = 0.0, hi: float = 1.0):
        self.lo, self.hi = lo, hi

    def __call__(self, module: nn.Module) -> None:
        with torch.no_grad():
            for m in module.modules():
                if isinstance(m, AdaLIN):
                    m.rho.clamp_(self.lo, self.hi)


# ------------------------------------------------------------------- CAM ---

@dataclass
class CamOutput:
    attended_features: torch.Tensor  # [B, C, H, W]
    attention_map: torch.Tensor  # [B, 1, H, W] in [0, 1]
    cam_logit: torch.Tensor  # [B, 1]


class CamAttention(nn.Module):
    """Class-activation attention from GAP and GMP auxiliary classifiers.

    The classifier weights rescale the channels; the two weighted copies are
    fused by a 1x1 conv. The attention map is the channel sum of the absolute
    weighted features, divided by its per-sample maximum.
    """

    def __init__(self, channels: int, leaky: bool = False):
        super().__init__()
        self.gap_fc = nn.Linear(channels, 1, bias=True)
        self.gmp_fc = nn.Linear(channels, 1, bias=False)
        self.conv1x1 = nn.Conv2d(2 * channels, channels, kernel_size=1, bias=True)
        self.act = nn.LeakyReLU(0.2) if leaky else nn.ReLU()

    def forward(self, x: torch.Tensor) -> CamOutput:
        if x.dim() != 4 or x.numel() == 0:
            raise ValidationError(f"CAM expects non-empty [B, C, H, W], got {tuple(x.shape)}")
        gap_logit = self.gap_fc(F.adaptive_avg_pool2d(x, 1).flatten(1))
        gmp_logit = self.gmp_fc(F.adaptive_max_pool2d(x, 1).flatten(1))
        gap = x * self.gap_fc.weight.view(1, -1, 1, 1)
        gmp = x * self.gmp_fc.weight.view(1, -1, 1, 1)
        weighted = torch.cat([gap, gmp], dim=1)

        heat = weighted.abs().sum(dim=1, keepdim=True)
        peak = heat.flatten(1).max(dim=1).values.view(-1, 1, 1, 1)
        attention = torch.where(peak > 0, heat / peak.clamp(min=1e-12), torch.zeros_like(heat))
        return CamOutput(
            attended_features=self.act(self.conv1x1(weighted)),
            attention_map=attention,
            cam_logit=gap_logit + gmp_logit,
        )


def cam_attention(features: torch.Tensor, classifier: CamAttention) -> CamOutput:
    return classifier(features)


# ------------------------------------------------------------- generator ---

class ResnetAdaLINBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.pad1 = nn.ReflectionPad2d(1)
        self.conv1 = nn.Conv2d(dim, dim, 3, bias=False)
        self.norm1 = AdaLIN(dim)
        self.pad2 = nn.ReflectionPad2d(1)
        self.conv2 = nn.Conv2d(dim, dim, 3, bias=False)
        self.norm2 = AdaLIN(dim)

    def forward(self, x, gamma, beta):
        out = F.relu(self.norm1(self.conv1(self.pad1(x)), gamma, beta))
        out = self.norm2(self.conv2(self.pad2(out)), gamma, beta)
        return out + x


class UpAdaLINBlock(nn.Module):
    def __init__(self, dim_in: int, dim_out: int):
        super().__init__()
        self.pad = nn.ReflectionPad2d(1)
        self.conv = nn.Conv2d(dim_in, dim_out, 3, bias=False)
        self.norm = AdaLIN(dim_out)

    def forward(self, x, gamma, beta):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return F.relu(self.norm(self.conv(self.pad(x)), gamma, beta))


@dataclass
class TranslationOutput:
    image: torch.Tensor
    cam_logit: torch.Tensor
    heatmap: torch.Tensor


class Stage2Generator(nn.Module):
    """Encoder (2 stride-2 downsamplings) -> CAM -> AdaLIN residual decoder.

    gamma/beta for every AdaLIN layer come from FC heads on the pooled
    CAM-attended code.
    """

    n_down = 2

    def __init__(self, resolution: int = 64, base_channels: int = 8, n_res_blocks: int = 4):
        super().__init__()
        if resolution % 4 or resolution < 8:
            raise ValidationError(f"stage-2 resolution must be a multiple of 4 and >= 8, got {resolution}")
        self.resolution = resolution
        ngf = base_channels
        down = [nn.ReflectionPad2d(3), nn.Conv2d(3, ngf, 7, bias=False), nn.InstanceNorm2d(ngf), nn.ReLU()]
        for i in range(self.n_down):
            mult = 2**i
            down += [
                nn.ReflectionPad2d(1),
                nn.Conv2d(ngf * mult, ngf * mult * 2, 3, stride=2, bias=False),
                nn.InstanceNorm2d(ngf * mult * 2),
                nn.ReLU(),
            ]
        self.encoder = nn.Sequential(*down)
        dim = ngf * 2**self.n_down
        self.cam = CamAttention(dim)
        self.fc = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, dim), nn.ReLU())
        self.gamma = nn.Linear(dim, dim, bias=False)
        self.beta = nn.Linear(dim, dim, bias=False)
        self.res_blocks = nn.ModuleList(ResnetAdaLINBlock(dim) for _ in range(n_res_blocks))

        self.up_blocks = nn.ModuleList()
        self.up_gamma = nn.ModuleList()
        self.up_beta = nn.ModuleList()
        for i in range(self.n_down):
            c_in = dim // 2**i
            self.up_blocks.append(UpAdaLINBlock(c_in, c_in // 2))
            self.up_gamma.append(nn.Linear(dim, c_in // 2, bias=False))
            self.up_beta.append(nn.Linear(dim, c_in // 2, bias=False))
        self.to_image = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(ngf, 3, 7, bias=False), nn.Tanh())

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        if x.dim() != 4 or tuple(x.shape[1:]) != (3, self.resolution, self.resolution):
            raise ValidationError(
                f"frame must be [B, 3, {self.resolution}, {self.resolution}], got {tuple(x.shape)}"
            )
        cam = self.cam(self.encoder(x))
        h = cam.attended_features
        code = self.fc(F.adaptive_avg_pool2d(h, 1).flatten(1))
        gamma, beta = self.gamma(code), self.beta(code)
        for block in self.res_blocks:
            h = block(h, gamma, beta)
        for block, g, b in zip(self.up_blocks, self.up_gamma, self.up_beta):
            h = block(h, g(code), b(code))
        return self.to_image(h), cam.cam_logit, cam.attention_map


# --------------------------------------------------------- discriminator ---

class _DiscHead(nn.Module):
    """Strided convs, one stride-1 conv, CAM, then a 1-channel score conv."""

    def __init__(self, channels: int, n_layers: int, downscale: int = 1):
        super().__init__()
        self.downscale = downscale
        layers, ch_in, ch = [], 3, channels
        for _ in range(n_layers):
            layers += [nn.Conv2d(ch_in, ch, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            ch_in, ch = ch, ch * 2
        layers += [nn.Conv2d(ch_in, ch_in, 3, padding=1), nn.LeakyReLU(0.2)]
        self.body = nn.Sequential(*layers)
        self.cam = CamAttention(ch_in, leaky=True)
        self.score = nn.Conv2d(ch_in, 1, 3, padding=1)
        self._layout = [(2, 2)] * (downscale > 1) + [(4, 2)] * n_layers + [(3, 1), (1, 1), (3, 1)]

    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for kernel, stride in self._layout:
            rf += (kernel - 1) * jump
            jump *= stride
        return rf

    def forward(self, x):
        if self.downscale > 1:
            x = F.avg_pool2d(x, self.downscale)
        cam = self.cam(self.body(x))
        return self.score(cam.attended_features), cam.cam_logit, cam.attention_map


@dataclass
class Stage2DiscOutput:
    local_scores: torch.Tensor
    global_scores: torch.Tensor
    local_cam_logit: torch.Tensor
    global_cam_logit: torch.Tensor
    local_heatmap: torch.Tensor
    global_heatmap: torch.Tensor

    @property
    def score_maps(self) -> List[torch.Tensor]:
        return [self.local_scores, self.global_scores]

    @property
    def cam_logits(self) -> List[torch.Tensor]:
        return [self.local_cam_logit, self.global_cam_logit]


class Stage2Discriminator(nn.Module):
    """Local head on 1/2-scale patches (shallow) and global head on full frames
    (deep); raw least-squares scores, each head with its own CAM logit."""

    def __init__(self, channels: int = 8, local_layers: int = 2, global_layers: int = 4):
        super().__init__()
        self.local_head = _DiscHead(channels, local_layers, downscale=2)
        self.global_head = _DiscHead(channels, global_layers)

    def receptive_fields(self) -> Tuple[int, int]:
        return self.local_head.receptive_field(), self.global_head.receptive_field()

    def forward(self, x: torch.Tensor) -> Stage2DiscOutput:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValidationError(f"discriminator expects [B, 3, H, W], got {tuple(x.shape)}")
        ls, lc, lh = self.local_head(x)
        gs, gc, gh = self.global_head(x)
        return Stage2DiscOutput(ls, gs, lc, gc, lh, gh)


def discriminate(frame, disc: Stage2Discriminator) -> Stage2DiscOutput:
    return disc(frame)


# ------------------------------------------------------------- predictor ---

@dataclass
class PredictorConfig:
    """``frame_shape`` is (3, H, W); None accepts any size divisible by 4."""

    past_frames: int
    frame_shape: Optional[Tuple[int, int, int]] = None

    def __post_init__(self):
        if self.past_frames < 1:
            raise ValidationError(f"predictor needs t >= 1 past frames, got {self.past_frames}")
        if self.frame_shape is not None:
            c, h, w = self.frame_shape
            if c != 3 or h <= 0 or w <= 0 or h % 4 or w % 4:
                raise ValidationError(f"frame_shape must be (3, H, W) with H, W divisible by 4, got {self.frame_shape}")


class TemporalPredictor(nn.Module):
    """Depth-2 UNet on t channel-stacked frames; predicts a residual that is
    added to the last observed frame. Encoder level k is concatenated into
    decoder level k."""

    def __init__(self, past_frames: int = 2, channels: int = 8, resolution: Optional[int] = None):
        super().__init__()
        self.config = PredictorConfig(past_frames, None if resolution is None else (3, resolution, resolution))
        c = channels
        self.enc0 = nn.Sequential(nn.Conv2d(3 * past_frames, c, 3, padding=1), nn.LeakyReLU(0.2))
        self.enc1 = nn.Sequential(nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.LeakyReLU(0.2))
        self.enc2 = nn.Sequential(nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1), nn.LeakyReLU(0.2))
        self.dec1 = nn.Sequential(nn.Conv2d(4 * c + 2 * c, 2 * c, 3, padding=1), nn.LeakyReLU(0.2))
        self.dec0 = nn.Sequential(nn.Conv2d(2 * c + c, c, 3, padding=1), nn.LeakyReLU(0.2))
        self.out = nn.Conv2d(c, 3, 3, padding=1)
        with torch.no_grad():
            self.out.weight.mul_(0.1)
            self.out.bias.zero_()

    @property
    def past_frames(self) -> int:
        return self.config.past_frames

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        t = self.past_frames
        if frames.dim() == 5:
            if frames.shape[1] != t:
                raise ValidationError(f"predictor needs exactly {t} frames, got {frames.shape[1]}")
            frames = frames.flatten(1, 2)
        if frames.dim() != 4 or frames.shape[1] != 3 * t:
            raise ValidationError(f"predictor needs [B, {3 * t}, H, W] input, got {tuple(frames.shape)}")
        if frames.shape[-1] % 4 or frames.shape[-2] % 4:
            raise ValidationError(f"frame size must be divisible by 4, got {tuple(frames.shape[-2:])}")
        shape = self.config.frame_shape
        if shape is not None and tuple(frames.shape[-2:]) != shape[1:]:
            raise ValidationError(f"predictor built for {shape[1]}x{shape[2]} frames, got {tuple(frames.shape[-2:])}")
        e0 = self.enc0(frames)
        e1 = self.enc1(e0)
        e2 = self.enc2(e1)
        d1 = self.dec1(torch.cat([F.interpolate(e2, scale_factor=2, mode="nearest"), e1], dim=1))
        d0 = self.dec0(torch.cat([F.interpolate(d1, scale_factor=2, mode="nearest"), e0], dim=1))
        return frames[:, -3:] + self.out(d0)


def predict_next(frames: torch.Tensor, predictor: TemporalPredictor) -> torch.Tensor:
    return predictor(frames)


# ---------------------------------------------------------------- bundle ---

@dataclass
class Stage2Networks:
    gen_s2t: Stage2Generator
    gen_t2s: Stage2Generator
    disc_t: Stage2Discriminator
    disc_s: Stage2Discriminator
    predictor_s: TemporalPredictor
    predictor_t: TemporalPredictor

    def as_dict(self) -> Dict[str, nn.Module]:
        return {
            "gen_s2t": self.gen_s2t,
            "gen_t2s": self.gen_t2s,
            "disc_t": self.disc_t,
            "disc_s": self.disc_s,
            "predictor_s": self.predictor_s,
            "predictor_t": self.predictor_t,
        }

    def generator(self, direction: str) -> Stage2Generator:
        if direction in ("s2t", "s->t"):
            return self.gen_s2t
        if direction in ("t2s", "t->s"):
            return self.gen_t2s
        raise ValidationError(f"direction must be 's2t' or 't2s', got {direction!r}")


def build_stage2_networks(settings) -> Stage2Networks:
    def gen():
        return Stage2Generator(settings.resolution, settings.base_channels, settings.n_res_blocks)

    def disc():
        return Stage2Discriminator(settings.disc_channels, settings.local_layers, settings.global_layers)

    def pred():
        return TemporalPredictor(settings.past_frames, settings.predictor_channels, settings.resolution)

    return Stage2Networks(gen(), gen(), disc(), disc(), pred(), pred())


def translate(frame: torch.Tensor, networks: Stage2Networks, direction: str = "s2t") -> TranslationOutput:
    image, cam_logit, heatmap = networks.generator(direction)(frame)
    return TranslationOutput(image, cam_logit, heatmap)
