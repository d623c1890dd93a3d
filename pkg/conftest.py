# conftest.py
"""Synthetic media fixtures: tiny PNG clips, PCM-16 WAVs, landmark sidecars."""
from pathlib import Path

import numpy as np
import pytest
import soundfile as sf
import torch
from PIL import Image
from torch.func import functional_call

from config import load_config

ROOT = Path(__file__).parent


def face_frame(size=32, t=0, seed=0):
    """A smooth symmetric blob with a moving 'mouth' band, [H, W, 3] in [0, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    face = np.exp(-(((xx - 0.5) / 0.3) ** 2 + ((yy - 0.5) / 0.38) ** 2))
    mouth = np.exp(-(((yy - 0.75) / (0.03 + 0.02 * np.sin(t))) ** 2)) * (np.abs(xx - 0.5) < 0.15)
    base = 0.2 + 0.6 * face - 0.3 * mouth
    rgb = np.stack([base, base * 0.8 + 0.1, base * 0.6 + 0.2], axis=-1)
    rgb += rng.uniform(-0.02, 0.02, size=rgb.shape)
    return np.clip(rgb, 0, 1).astype(np.float32)


def eye_points(cx, cy, w=6.0, h=2.0):
    return [
        [cx - w / 2, cy], [cx - w / 6, cy - h / 2], [cx + w / 6, cy - h / 2],
        [cx + w / 2, cy], [cx + w / 6, cy + h / 2], [cx - w / 6, cy + h / 2],
    ]


def tone(seconds, sample_rate=16000, freq=220.0):
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    return (0.3 * np.sin(2 * np.pi * freq * t)).astype(np.float32)


def write_raw_clip(directory, n_frames=8, size=32, fps=25.0, sample_rate=16000, seed=0,
                   landmarks=False, frame_pattern="img_{:03d}.png", audio_name="speech.wav"):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(n_frames):
        frame = face_frame(size, t=i, seed=seed + i)
        Image.fromarray((frame * 255).round().astype(np.uint8)).save(directory / frame_pattern.format(i))
    if audio_name:
        sf.write(str(directory / audio_name), tone(n_frames / fps, sample_rate), sample_rate, subtype="PCM_16")
    if landmarks:
        s = size / 32
        eyes = np.array([eye_points(11 * s, 12 * s, 6 * s, 2 * s), eye_points(21 * s, 12 * s, 6 * s, 2 * s)])
        np.save(directory / "landmarks.npy", np.repeat(eyes[None], n_frames, axis=0).astype(np.float32))
    return directory


@pytest.fixture
def toy_config(tmp_path):
    cfg = load_config(ROOT / "configs" / "toy.toml")
    cfg.paths.data_dir = str(tmp_path / "prepared")
    cfg.paths.source_dir = str(tmp_path / "human")
    cfg.paths.target_dir = str(tmp_path / "anime")
    cfg.paths.run_dir = str(tmp_path / "runs")
    return cfg


@pytest.fixture
def prepared_dataset(tmp_path, toy_config):
    """Two prepared clips of 8 frames with landmark sidecars."""
    from datasets import prepare_dataset
    from providers import FrontalPoseProvider

    for k in range(2):
        write_raw_clip(tmp_path / "raw" / f"spk{k}", n_frames=8, seed=10 * k, landmarks=True)
    prepare_dataset(tmp_path / "raw", toy_config.paths.data_dir, FrontalPoseProvider())
    return Path(toy_config.paths.data_dir)


# five seeds on every run, the remaining fifteen with the slow suite
GRADCHECK_SEEDS = [*range(5), *(pytest.param(s, marks=pytest.mark.slow) for s in range(5, 20))]


def params_gradcheck(module, readout, *inputs):
    """Finite-difference check of d readout(module(*inputs)) / d parameters, float64."""
    module = module.double()
    names = [name for name, _ in module.named_parameters()]
    params = tuple(p.detach().clone().requires_grad_() for p in module.parameters())
    inputs = tuple(x.double() if x.is_floating_point() else x for x in inputs)

    def fn(*ps):
        return readout(functional_call(module, dict(zip(names, ps)), inputs))

    return torch.autograd.gradcheck(fn, params, eps=1e-6, atol=1e-6, rtol=1e-3)
