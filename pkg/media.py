# media.py
"""Audio/video ingest: MFCC windows aligned to video frames, frame
directories, face crops and the ordered unpaired streams used by stage 2."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import librosa
import numpy as np
import soundfile as sf
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field
from pydantic import ValidationError as PydanticValidationError

from errors import MediaReadError, ProviderError, ValidationError

logger = logging.getLogger(__name__)

N_MFCC = 13
FRAME_GLOB = "frame_*.png"
MANIFEST_NAME = "manifest.txt"
AUDIO_NAME = "audio.wav"
LANDMARKS_NAME = "landmarks.npy"
IDENTITY_NAME = "identity.png"

# 25 ms analysis frames with a 10 ms hop inside each 200 ms window.
MFCC_N_FFT = 512
MFCC_WIN_MS = 25.0
MFCC_HOP_MS = 10.0
MFCC_N_MELS = 40


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.sample_rate <= 0:
            raise ValidationError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 1:
            raise ValidationError(f"audio must be mono, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValidationError("audio contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MfccWindow:
    coefficients: np.ndarray  # [time_steps, 13]
    center_frame_index: int

    def __post_init__(self):
        if self.coefficients.ndim != 2 or self.coefficients.shape[1] != N_MFCC:
            raise ValidationError(
                f"MFCC window must be [time_steps, {N_MFCC}], got {self.coefficients.shape}"
            )


@dataclass
class AudioWindowSequence:
    windows: List[MfccWindow]
    stride_samples: int
    window_samples: int
    segments: np.ndarray  # raw padded samples, [n_windows, window_samples]

    def __len__(self):
        return len(self.windows)

    def as_array(self) -> np.ndarray:
        """All coefficients stacked as [n_windows, time_steps, 13]."""
        return np.stack([w.coefficients for w in self.windows]).astype(np.float32)


@dataclass
class TalkingClip:
    frames: np.ndarray  # [T, H, W, 3] float32 in [0, 1]
    fps: float
    audio: Optional[AudioClip] = None
    transcript: Optional[List[str]] = None
    name: str = ""
    source_dir: Optional[Path] = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValidationError(f"frames must be [T, H, W, 3], got {self.frames.shape}")
        if len(self.frames) == 0:
            raise ValidationError("a clip needs at least one frame")
        if self.fps <= 0:
            raise ValidationError(f"fps must be positive, got {self.fps}")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise ValidationError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.frames)

    @property
    def duration(self) -> float:
        return len(self.frames) / self.fps

    def usable_for_temporal(self, past_frames: int) -> bool:
        """Temporal losses need ``past_frames`` inputs plus one target."""
        return len(self.frames) >= past_frames + 1


@dataclass
class FaceRegion:
    image: np.ndarray
    is_lower_half: bool = True


# ---------------------------------------------------------------- audio ---

def load_audio(path, target_rate: int = 16000) -> AudioClip:
    """Read a PCM file as mono and resample it to ``target_rate``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"audio file not found: {path}")
    if path.stat().st_size == 0:
        raise ValidationError(f"audio file {path} is empty (0 bytes)")
    try:
        samples, rate = sf.read(str(path), dtype="float32", always_2d=True)
    except Exception as e:
        raise MediaReadError(f"cannot decode audio file {path}: {e}") from e
    samples = samples.mean(axis=1)
    if samples.size == 0:
        raise ValidationError(f"audio file {path} contains no samples")
    if rate != target_rate:
        samples = librosa.resample(samples, orig_sr=rate, target_sr=target_rate)
    return AudioClip(samples=samples, sample_rate=target_rate)


def write_audio(clip: AudioClip, path) -> Path:
    path = Path(path)
    sf.write(str(path), clip.samples, clip.sample_rate, subtype="PCM_16")
    return path


def frame_audio_windows(
    clip: AudioClip, fps: float, window_ms: float = 200.0, n_frames: Optional[int] = None
) -> AudioWindowSequence:
    """Cut one zero-padded window per video frame, centred on the frame time.

    Window ``i`` is centred on sample ``i * stride`` of the unpadded signal,
    ``stride = round(sample_rate / fps)``. ``n_frames`` defaults to
    ``round(duration * fps)``.
    """
    if fps <= 0:
        raise ValidationError(f"fps must be positive, got {fps}")
    sr = clip.sample_rate
    stride = int(round(sr / fps))
    window = int(round(window_ms * sr / 1000.0))
    if len(clip.samples) < window:
        raise ValidationError(
            f"clip of {len(clip.samples)} samples is shorter than one {window}-sample window"
        )
    if n_frames is None:
        n_frames = int(round(clip.duration * fps))
    half = window // 2
    padded = np.pad(clip.samples, (half, window - half))
    last_end = (n_frames - 1) * stride + window
    if last_end > len(padded):
        padded = np.pad(padded, (0, last_end - len(padded)))

    segments = np.stack([padded[i * stride : i * stride + window] for i in range(n_frames)])
    windows = [
        MfccWindow(coefficients=compute_mfcc(seg, sr), center_frame_index=i)
        for i, seg in enumerate(segments)
    ]
    return AudioWindowSequence(
        windows=windows, stride_samples=stride, window_samples=window, segments=segments
    )


def compute_mfcc(window_samples: np.ndarray, sample_rate: int) -> np.ndarray:
    """13 MFCCs per 10 ms step of one window, shaped [time_steps, 13]."""
    y = np.asarray(window_samples, dtype=np.float32)
    if y.size == 0:
        raise ValidationError("cannot compute MFCC of an empty window")
    mfcc = librosa.feature.mfcc(
        y=y,
        sr=sample_rate,
        n_mfcc=N_MFCC,
        n_fft=MFCC_N_FFT,
        win_length=int(sample_rate * MFCC_WIN_MS / 1000),
        hop_length=int(sample_rate * MFCC_HOP_MS / 1000),
        n_mels=MFCC_N_MELS,
    )
    return np.ascontiguousarray(mfcc.T, dtype=np.float32)


# ---------------------------------------------------------------- video ---

def read_manifest(path) -> Dict[str, str]:
    entries = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValidationError(f"malformed manifest line in {path}: {line!r}")
            entries[key.strip()] = value.strip()
    return entries


class ClipManifest(BaseModel):
    """Typed view of manifest.txt; unknown keys are carried through."""

    model_config = ConfigDict(extra="allow")

    fps: float = Field(25.0, gt=0, allow_inf_nan=False)
    frame_count: Optional[int] = Field(None, ge=0)
    audio_path: Optional[str] = None
    transcript: Optional[str] = None
    identity_index: Optional[int] = Field(None, ge=0)


def parse_manifest(path, fps: float = 25.0) -> ClipManifest:
    entries = read_manifest(path)
    try:
        return ClipManifest(**{"fps": fps, **entries})
    except PydanticValidationError as e:
        raise ValidationError(f"invalid manifest {path}: {e}") from e


def write_manifest(path, entries: Dict[str, object]) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        for key, value in entries.items():
            f.write(f"{key}={value}\n")
    return path


def load_image(path) -> np.ndarray:
    """RGB image as float32 [H, W, 3] in [0, 1]."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise
    except Exception as e:
        raise MediaReadError(f"cannot decode image {path}: {e}") from e


def save_image(frame: np.ndarray, path) -> Path:
    data = np.clip(np.round(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path, "PNG")
    return Path(path)


def resize_image(frame: np.ndarray, size: int) -> np.ndarray:
    if frame.shape[0] == size and frame.shape[1] == size:
        return frame
    img = Image.fromarray(np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8))
    img = img.resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def load_video(path, fps: float = 25.0) -> TalkingClip:
    """
    Loads a clip from a frame directory or its manifest file.
    """
    path = Path(path)
    if path.is_dir():
        return load_frame_directory(path, fps)
    ext = path.suffix.lower()
    if ext == ".txt":
        return load_frame_directory(path.parent, fps)
    raise ValidationError(
        f"Unsupported clip format: {path} (only frame directories and manifest.txt are supported)"
    )


def load_frame_directory(directory: Path, fps: float = 25.0) -> TalkingClip:
    directory = Path(directory)
    manifest = ClipManifest(fps=fps)
    if (directory / MANIFEST_NAME).is_file():
        manifest = parse_manifest(directory / MANIFEST_NAME, fps)
    fps = manifest.fps

    paths = sorted(directory.glob(FRAME_GLOB)) or sorted(directory.glob("*.png"))
    if not paths:
        raise ValidationError(f"no PNG frames in {directory}")
    frames = [load_image(p) for p in paths]
    shapes = {f.shape for f in frames}
    if len(shapes) > 1:
        raise ValidationError(f"mixed frame sizes in {directory}: {sorted(shapes)}")
    if manifest.frame_count is not None and manifest.frame_count != len(frames):
        raise ValidationError(f"{directory}: manifest lists {manifest.frame_count} frames, found {len(frames)}")

    audio = None
    audio_path = manifest.audio_path
    if audio_path:
        audio = load_audio(directory / audio_path)
    elif (directory / AUDIO_NAME).is_file():
        audio = load_audio(directory / AUDIO_NAME)

    transcript = manifest.transcript
    return TalkingClip(
        frames=np.stack(frames),
        fps=fps,
        audio=audio,
        transcript=transcript.split() if transcript else None,
        name=directory.name,
        source_dir=directory,
    )


def load_landmarks(directory) -> Optional[np.ndarray]:
    """Sidecar eye landmarks, [T, 2 eyes, 6 points, (x, y)] in pixels."""
    path = Path(directory) / LANDMARKS_NAME
    if not path.is_file():
        return None
    marks = np.load(path).astype(np.float32)
    if marks.ndim != 4 or marks.shape[1:] != (2, 6, 2):
        raise ValidationError(f"{path} must be [T, 2, 6, 2], got {marks.shape}")
    return marks


# ---------------------------------------------------------------- faces ---

def pad_to_even_height(frame: np.ndarray) -> np.ndarray:
    if frame.shape[0] % 2:
        return np.concatenate([frame, frame[-1:]], axis=0)
    return frame


def crop_lower_half(frame: np.ndarray) -> FaceRegion:
    """Rows [H/2, H) of the frame; odd heights get one replicated bottom row."""
    if frame.ndim != 3:
        raise ValidationError(f"expected an [H, W, C] frame, got {frame.shape}")
    frame = pad_to_even_height(frame)
    return FaceRegion(image=frame[frame.shape[0] // 2 :], is_lower_half=True)


def crop_upper_half(frame: np.ndarray) -> FaceRegion:
    frame = pad_to_even_height(frame)
    return FaceRegion(image=frame[: frame.shape[0] // 2], is_lower_half=False)


def aligned_frame_index(clip: TalkingClip, pose_provider) -> int:
    best_index, best_score = -1, np.inf
    failures = []
    for i, frame in enumerate(clip.frames):
        try:
            yaw, pitch, roll = pose_provider.estimate_pose(frame)
        except Exception as e:
            logger.warning("pose estimation failed on frame %d of %s: %s", i, clip.name, e)
            failures.append(i)
            continue
        score = abs(yaw) + abs(pitch) + abs(roll)
        if score < best_score:
            best_index, best_score = i, score
    if best_index < 0:
        raise ProviderError(f"pose provider failed on all {len(clip.frames)} frames of {clip.name}")
    return best_index


def select_aligned_identity_frame(clip: TalkingClip, pose_provider) -> np.ndarray:
    """The frame with the smallest |yaw| + |pitch| + |roll|; earliest wins ties."""
    return clip.frames[aligned_frame_index(clip, pose_provider)]


# -------------------------------------------------------------- streams ---

@dataclass
class ClipStream:
    """Ordered clips of one domain. Iterate once; a stream is single-consumer."""

    clips: List[TalkingClip]
    past_frames: int = 2
    flagged: List[int] = field(default_factory=list)

    def __post_init__(self):
        self.flagged = [
            i for i, clip in enumerate(self.clips) if not clip.usable_for_temporal(self.past_frames)
        ]
        for i in self.flagged:
            logger.warning(
                "clip %s has %d frame(s); unusable for temporal losses (needs %d)",
                self.clips[i].name, len(self.clips[i]), self.past_frames + 1,
            )
        self._consumed = False

    def __len__(self):
        return len(self.clips)

    def usable(self) -> List[TalkingClip]:
        return [c for i, c in enumerate(self.clips) if i not in self.flagged]

    def windows(self, length: int) -> Iterator[np.ndarray]:
        """Contiguous ``length``-frame windows, clip by clip, in temporal order."""
        if self._consumed:
            raise RuntimeError("ClipStream.windows() can only be consumed once")
        self._consumed = True
        for clip in self.clips:
            for start in range(0, len(clip) - length + 1):
                yield clip.frames[start : start + length]


def _clip_directories(root: Path) -> List[Path]:
    subdirs = sorted(p for p in root.iterdir() if p.is_dir())
    if subdirs:
        return subdirs
    return [root] if any(root.glob("*.png")) else []


def make_unpaired_streams(dir_a, dir_b, past_frames: int = 2) -> Tuple[ClipStream, ClipStream]:
    """Two ordered, unpaired clip streams (source domain, target domain)."""
    streams = []
    for directory in (Path(dir_a), Path(dir_b)):
        if not directory.is_dir():
            raise ValidationError(f"domain directory not found: {directory}")
        clip_dirs = _clip_directories(directory)
        if not clip_dirs:
            raise ValidationError(f"domain directory {directory} contains no clips")
        streams.append(ClipStream([load_frame_directory(d) for d in clip_dirs], past_frames))
    return streams[0], streams[1]


def list_raw_clips(raw_dir) -> List[Path]:
    raw_dir = Path(raw_dir)
    if not raw_dir.is_dir():
        return []
    return [p for p in sorted(raw_dir.iterdir()) if p.is_dir() and not p.name.startswith(".")]


def find_audio(directory: Path) -> Optional[Path]:
    wavs = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".wav")
    return wavs[0] if wavs else None


def frames_to_tensor_range(frames: np.ndarray) -> np.ndarray:
    """[0, 1] -> [-1, 1], the range used at network boundaries."""
    return frames * 2.0 - 1.0


def tensor_range_to_frames(frames: np.ndarray) -> np.ndarray:
    return np.clip((frames + 1.0) / 2.0, 0.0, 1.0)

