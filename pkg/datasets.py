# datasets.py
"""Prepared-dataset layout and the batch iterators both trainers consume."""
from __future__ import annotations

import logging
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch

from errors import Au2AvError, ValidationError
from media import (
    AUDIO_NAME,
    IDENTITY_NAME,
    LANDMARKS_NAME,
    MANIFEST_NAME,
    ClipStream,
    TalkingClip,
    aligned_frame_index,
    find_audio,
    frame_audio_windows,
    load_audio,
    load_frame_directory,
    load_image,
    load_landmarks,
    list_raw_clips,
    resize_image,
    save_image,
    write_audio,
    write_manifest,
)

logger = logging.getLogger(__name__)

INDEX_NAME = "dataset.csv"


def to_tensor(frames: np.ndarray) -> torch.Tensor:
    """[..., H, W, 3] in [0, 1] -> [..., 3, H, W] in [-1, 1]."""
    t = torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32))
    return t.movedim(-1, -3) * 2 - 1


def to_frames(tensor: torch.Tensor) -> np.ndarray:
    """Inverse of to_tensor, clipped to [0, 1]."""
    return ((tensor.detach().float().movedim(-3, -1).cpu().numpy() + 1) / 2).clip(0.0, 1.0)


def write_clip(clip: TalkingClip, out_dir, extra: Optional[Dict[str, object]] = None) -> Path:
    """frame_000001.png..., audio.wav (PCM-16) and manifest.txt under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(clip.frames, 1):
        save_image(frame, out_dir / f"frame_{i:06d}.png")
    entries: Dict[str, object] = {"fps": clip.fps, "frame_count": len(clip.frames)}
    if clip.audio is not None:
        write_audio(clip.audio, out_dir / AUDIO_NAME)
        entries["audio_path"] = AUDIO_NAME
    if clip.transcript:
        entries["transcript"] = " ".join(clip.transcript)
    entries.update(extra or {})
    return write_manifest(out_dir / MANIFEST_NAME, entries)


def prepare_dataset(raw_dir, out_dir, pose_provider, sample_rate: int = 16000, fps: float = 25.0) -> pd.DataFrame:
    """Normalize raw clip directories into the canonical layout.

    Each raw clip is a directory of PNG frames (any names) with one WAV file.
    Failing clips are logged and skipped; raises if none survive.
    """
    out_dir = Path(out_dir)
    raw = list_raw_clips(raw_dir)
    if not raw:
        raise ValidationError(f"no clip directories under {raw_dir}")

    rows = []
    for clip_dir in raw:
        try:
            clip = load_frame_directory(clip_dir, fps)
            if clip.audio is None:
                wav = find_audio(clip_dir)
                if wav is None:
                    raise ValidationError(f"{clip_dir} has no WAV file")
                clip.audio = load_audio(wav, sample_rate)
            index = aligned_frame_index(clip, pose_provider)
            target = out_dir / clip_dir.name
            write_clip(clip, target, extra={"identity_index": index})
            save_image(clip.frames[index], target / IDENTITY_NAME)
            if (clip_dir / LANDMARKS_NAME).is_file():
                shutil.copyfile(clip_dir / LANDMARKS_NAME, target / LANDMARKS_NAME)
        except (Au2AvError, OSError) as e:
            logger.warning("skipping clip %s: %s", clip_dir.name, e)
            continue
        rows.append(
            {
                "clip": clip_dir.name,
                "frames": len(clip),
                "fps": clip.fps,
                "duration": round(clip.audio.duration, 4),
                "identity_index": index,
            }
        )
        logger.info("prepared %s (%d frames)", clip_dir.name, len(clip))

    if not rows:
        raise ValidationError(f"all {len(raw)} clips under {raw_dir} failed to prepare")
    index_df = pd.DataFrame(rows)
    index_df.to_csv(out_dir / INDEX_NAME, index=False)
    return index_df


# ------------------------------------------------------------ stage 1 ---

@dataclass
class Stage1Batch:
    identity: torch.Tensor  # [B, 3, R, R]
    frames: torch.Tensor  # [B, L+1, 3, R, R]
    mfcc: torch.Tensor  # [B, L+1, T, 13], one window per frame
    offsync_mfcc: torch.Tensor  # [B, T, 13], window from elsewhere
    landmarks: Optional[torch.Tensor] = None  # [B, L+1, 2, 6, 2], pixels at R
    clip_names: Tuple[str, ...] = ()

    @property
    def sync_mfcc(self) -> torch.Tensor:
        """The window centred on the middle frame spans the whole 5-frame window."""
        return self.mfcc[:, self.mfcc.shape[1] // 2]

    def to(self, dtype) -> "Stage1Batch":
        return Stage1Batch(
            identity=self.identity.to(dtype),
            frames=self.frames.to(dtype),
            mfcc=self.mfcc.to(dtype),
            offsync_mfcc=self.offsync_mfcc.to(dtype),
            landmarks=None if self.landmarks is None else self.landmarks.to(dtype),
            clip_names=self.clip_names,
        )


@dataclass
class _PreparedClip:
    name: str
    frames: np.ndarray
    identity: np.ndarray
    mfcc: np.ndarray
    landmarks: Optional[np.ndarray]


class Stage1Dataset:
    """Contiguous (L+1)-frame windows over every prepared clip."""

    def __init__(self, prepared_dir, cfg):
        self.root = Path(prepared_dir)
        net = cfg.stage1.network
        self.resolution = net.resolution
        self.window_length = net.temporal_window + 1
        self.batch_size = cfg.stage1.batch_size
        self.seed = cfg.seed
        self.clips: List[_PreparedClip] = []

        clip_dirs = sorted(p for p in self.root.iterdir() if p.is_dir()) if self.root.is_dir() else []
        for d in clip_dirs:
            clip = load_frame_directory(d, cfg.media.fps)
            if len(clip) < self.window_length:
                logger.warning("clip %s has %d frames, needs %d; skipped", d.name, len(clip), self.window_length)
                continue
            if clip.audio is None:
                logger.warning("clip %s has no audio; skipped", d.name)
                continue
            self.clips.append(self._prepare(d, clip, cfg))
        if not self.clips:
            raise ValidationError(f"no usable stage-1 clips under {self.root}")

        self.samples = [
            (ci, start)
            for ci, clip in enumerate(self.clips)
            for start in range(len(clip.frames) - self.window_length + 1)
        ]

    def _prepare(self, directory: Path, clip: TalkingClip, cfg) -> _PreparedClip:
        r = self.resolution
        h, w = clip.frames.shape[1:3]
        frames = np.stack([resize_image(f, r) for f in clip.frames])
        identity_path = directory / IDENTITY_NAME
        identity = load_image(identity_path) if identity_path.is_file() else clip.frames[0]
        windows = frame_audio_windows(clip.audio, clip.fps, cfg.media.window_ms, n_frames=len(clip))
        landmarks = load_landmarks(directory)
        if landmarks is not None:
            if len(landmarks) != len(clip):
                raise ValidationError(f"{directory}: {len(landmarks)} landmark rows for {len(clip)} frames")
            landmarks = landmarks * np.array([r / w, r / h], dtype=np.float32)
        return _PreparedClip(directory.name, frames, resize_image(identity, r), windows.as_array(), landmarks)

    @property
    def has_landmarks(self) -> bool:
        return all(c.landmarks is not None for c in self.clips)

    def __len__(self):
        return len(self.samples)

    def num_batches(self) -> int:
        return -(-len(self.samples) // self.batch_size)

    def _offsync(self, rng: np.random.Generator, ci: int, center: int) -> np.ndarray:
        clip = self.clips[ci]
        n = len(clip.frames)
        far = [j for j in range(n) if abs(j - center) >= self.window_length]
        if far:
            return clip.mfcc[far[rng.integers(len(far))]]
        others = [k for k in range(len(self.clips)) if k != ci]
        if others:
            other = self.clips[others[rng.integers(len(others))]]
            return other.mfcc[rng.integers(len(other.mfcc))]
        return clip.mfcc[center][::-1].copy()

    def batches(self, epoch: int, stream: int = 0) -> Iterator[Stage1Batch]:
        """Seeded permutation per epoch, so a resumed run sees the same order.
        ``stream`` separates independent consumers (training, sync pretraining)."""
        rng = np.random.default_rng([self.seed, epoch, stream])
        order = rng.permutation(len(self.samples))
        for b in range(0, len(order), self.batch_size):
            picks = [self.samples[i] for i in order[b : b + self.batch_size]]
            identity, frames, mfcc, offsync, marks, names = [], [], [], [], [], []
            for ci, start in picks:
                clip = self.clips[ci]
                stop = start + self.window_length
                identity.append(clip.identity)
                frames.append(clip.frames[start:stop])
                mfcc.append(clip.mfcc[start:stop])
                offsync.append(self._offsync(rng, ci, start + self.window_length // 2))
                marks.append(None if clip.landmarks is None else clip.landmarks[start:stop])
                names.append(clip.name)
            landmarks = None
            if all(m is not None for m in marks):
                landmarks = torch.from_numpy(np.stack(marks))
            yield Stage1Batch(
                identity=to_tensor(np.stack(identity)),
                frames=to_tensor(np.stack(frames)),
                mfcc=torch.from_numpy(np.stack(mfcc)),
                offsync_mfcc=torch.from_numpy(np.stack(offsync)),
                landmarks=landmarks,
                clip_names=tuple(names),
            )


# ------------------------------------------------------------ stage 2 ---

def _window_index(stream: ClipStream, length: int) -> List[Tuple[int, int]]:
    return [
        (ci, start)
        for ci, clip in enumerate(stream.clips)
        if ci not in stream.flagged
        for start in range(len(clip) - length + 1)
    ]


def stage2_window_pairs(
    streams: Tuple[ClipStream, ClipStream], past_frames: int, epoch: int, seed: int, resolution: int
) -> Iterator[Tuple[torch.Tensor, torch.Tensor]]:
    """Unpaired (source, target) windows of t+1 frames, [t+1, 3, R, R] in [-1, 1].

    The shorter domain is cycled so every window of the longer one is seen
    once per epoch.
    """
    length = past_frames + 1
    source, target = streams
    index_a, index_b = _window_index(source, length), _window_index(target, length)
    if not index_a or not index_b:
        raise ValidationError(f"both domains need a clip with at least {length} frames")
    rng = np.random.default_rng([seed, epoch])
    perm_a, perm_b = rng.permutation(len(index_a)), rng.permutation(len(index_b))

    def window(stream, ci, start):
        frames = stream.clips[ci].frames[start : start + length]
        return to_tensor(np.stack([resize_image(f, resolution) for f in frames]))

    for i in range(max(len(index_a), len(index_b))):
        yield (
            window(source, *index_a[perm_a[i % len(index_a)]]),
            window(target, *index_b[perm_b[i % len(index_b)]]),
        )


def count_stage2_pairs(streams: Tuple[ClipStream, ClipStream], past_frames: int) -> int:
    return max(len(_window_index(s, past_frames + 1)) for s in streams)
