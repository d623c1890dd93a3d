# metrics.py
"""Evaluation suite: PSNR, SSIM, CPBD, KID, ACD, blinks per second, WER,
and the MetricReport that collects them."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage

from errors import ProviderError, ValidationError
from stage1_losses import eye_aspect_ratio

logger = logging.getLogger(__name__)

METRIC_ORDER = ["psnr", "ssim", "cpbd", "kid", "acd_cosine", "acd_euclidean", "blinks_per_sec", "wer"]

ACD_COSINE_THRESHOLD = 0.02
ACD_EUCLIDEAN_THRESHOLD = 0.20
BLINK_THRESHOLD = 0.2
BLINK_CONSECUTIVE_MIN = 2

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # radius 5, an 11x11 window
SSIM_WINDOW = 11

CPBD_EDGE_FRACTION = 0.1
CPBD_BETA = 3.6
CPBD_P_JNB = 0.63
CPBD_BLOCK = 64
CPBD_CONTRAST_SPLIT = 50.0


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[-1] == 3:
        return image @ np.array([0.299, 0.587, 0.114])
    if image.ndim == 3 and image.shape[-1] == 1:
        return image[..., 0]
    if image.ndim == 2:
        return image
    raise ValidationError(f"cannot convert shape {image.shape} to grayscale")


# ------------------------------------------------------------- fidelity ---

def psnr(a, b, max_value: float = 1.0) -> float:
    """10 log10(max^2 / MSE); identical inputs give +inf."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(max_value**2 / mse))


def ssim(a, b, max_value: float = 1.0) -> float:
    """Mean SSIM over the valid region of an 11x11 Gaussian window (sigma 1.5)."""
    a, b = np.asarray(a), np.asarray(b)
    _check_same_shape(a, b)
    x, y = to_gray(a), to_gray(b)
    if min(x.shape) < SSIM_WINDOW:
        raise ValidationError(f"images of {x.shape} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    c1, c2 = (0.01 * max_value) ** 2, (0.03 * max_value) ** 2

    def blur(img):
        return ndimage.gaussian_filter(img, sigma=SSIM_SIGMA, truncate=SSIM_TRUNCATE)

    mu_x, mu_y = blur(x), blur(y)
    sxx = blur(x * x) - mu_x**2
    syy = blur(y * y) - mu_y**2
    sxy = blur(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    r = SSIM_WINDOW // 2
    return float((num / den)[r:-r, r:-r].mean())


# ------------------------------------------------------------ sharpness ---

def _edge_width(row: np.ndarray, c: int, rising: bool) -> int:
    """Marziliano width: walk to the local extrema on both sides of the edge."""
    n = len(row)
    right = c
    if rising:
        while right + 1 < n and row[right + 1] > row[right]:
            right += 1
        left = c
        while left - 1 >= 0 and row[left - 1] < row[left]:
            left -= 1
    else:
        while right + 1 < n and row[right + 1] < row[right]:
            right += 1
        left = c
        while left - 1 >= 0 and row[left - 1] > row[left]:
            left -= 1
    return max(right - left, 1)


def cpbd(image, max_value: float = 1.0) -> float:
    """Cumulative probability of blur detection; higher means sharper.

    Vertical edges from a horizontal Sobel gradient; just-noticeable-blur
    width 5 in low-contrast 64x64 blocks (contrast <= 50 on an 8-bit scale),
    3 otherwise. Edge-free images score 0.
    """
    gray = to_gray(image) * (255.0 / max_value)
    grad = ndimage.sobel(gray, axis=1)
    peak = np.abs(grad).max()
    if peak <= 1e-8:
        return 0.0
    edges = np.argwhere((np.abs(grad) > CPBD_EDGE_FRACTION * peak) & (np.abs(grad) > 1e-8))
    detected = 0
    for r, c in edges:
        br, bc = (r // CPBD_BLOCK) * CPBD_BLOCK, (c // CPBD_BLOCK) * CPBD_BLOCK
        block = gray[br : br + CPBD_BLOCK, bc : bc + CPBD_BLOCK]
        w_jnb = 5.0 if block.max() - block.min() <= CPBD_CONTRAST_SPLIT else 3.0
        width = _edge_width(gray[r], c, grad[r, c] > 0)
        p_blur = 1.0 - math.exp(-((width / w_jnb) ** CPBD_BETA))
        detected += p_blur <= CPBD_P_JNB
    return detected / len(edges)


# ------------------------------------------------------------------ KID ---

def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    n, m = len(x), len(y)
    kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    sxx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(sxx + syy - 2 * kxy.mean())


def kid(features_real, features_fake, n_subsets: int = 100, subset_size: int = 100, seed: int = 0) -> Tuple[float, float]:
    """Unbiased MMD^2 with kernel (x.y/d + 1)^3; (mean, std) over subsets.

    When both sets fit in one subset the estimate is exact and std is 0.
    """
    x = np.asarray(features_real, dtype=np.float64)
    y = np.asarray(features_fake, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValidationError(f"feature sets must be [n, d] with equal d, got {x.shape} and {y.shape}")
    if len(x) < 2 or len(y) < 2:
        raise ValidationError(f"KID needs at least 2 samples per set, got {len(x)} and {len(y)}")
    if len(x) <= subset_size and len(y) <= subset_size:
        return mmd2_unbiased(x, y), 0.0
    rng = np.random.default_rng(seed)
    nx, ny = min(len(x), subset_size), min(len(y), subset_size)
    estimates = [
        mmd2_unbiased(x[rng.choice(len(x), nx, replace=False)], y[rng.choice(len(y), ny, replace=False)])
        for _ in range(n_subsets)
    ]
    return float(np.mean(estimates)), float(np.std(estimates))


# ------------------------------------------------------------------ ACD ---

def acd(frames_generated, reference_image, provider) -> Tuple[float, float]:
    """Mean (cosine distance, euclidean distance) from each frame's embedding to the reference's."""
    failed = []
    embeddings = []
    for i, frame in enumerate(frames_generated):
        try:
            embeddings.append(np.asarray(provider.embed(frame), dtype=np.float64))
        except Exception as e:
            logger.warning("embedding failed on frame %d: %s", i, e)
            failed.append(i)
    if failed:
        raise ProviderError(f"embedding provider failed on frames {failed}")
    if not embeddings:
        raise ValidationError("ACD needs at least one generated frame")
    try:
        ref = np.asarray(provider.embed(reference_image), dtype=np.float64)
    except Exception as e:
        raise ProviderError(f"embedding provider failed on the reference image: {e}") from e
    e = np.stack(embeddings)
    norms = np.linalg.norm(e, axis=1) * np.linalg.norm(ref)
    cosine = 1.0 - (e @ ref) / np.maximum(norms, 1e-12)
    euclidean = np.linalg.norm(e - ref, axis=1)
    return float(cosine.mean()), float(euclidean.mean())


def acd_passes(cosine: float, euclidean: float) -> Tuple[bool, bool]:
    return cosine <= ACD_COSINE_THRESHOLD, euclidean <= ACD_EUCLIDEAN_THRESHOLD


# ---------------------------------------------------------------- blinks ---

def count_blinks(ear_series, threshold: float = BLINK_THRESHOLD, consecutive_min: int = BLINK_CONSECUTIVE_MIN) -> int:
    """Runs of >= consecutive_min frames with EAR < threshold that then recover."""
    blinks, run = 0, 0
    for value in np.asarray(ear_series, dtype=np.float64):
        if value < threshold:
            run += 1
            continue
        if run >= consecutive_min:
            blinks += 1
        run = 0
    return blinks


def blinks_per_sec(ear_series, fps: float, threshold: float = BLINK_THRESHOLD, consecutive_min: int = BLINK_CONSECUTIVE_MIN) -> float:
    ear_series = np.asarray(ear_series, dtype=np.float64)
    if fps <= 0:
        raise ValidationError(f"fps must be positive, got {fps}")
    if len(ear_series) < 3:
        return 0.0
    return count_blinks(ear_series, threshold, consecutive_min) / (len(ear_series) / fps)


def ear_series(frames, landmark_provider) -> np.ndarray:
    """Per-frame EAR averaged over both eyes."""
    values = []
    for i, frame in enumerate(frames):
        left, right = landmark_provider.eye_landmarks(frame, i)
        values.append((float(eye_aspect_ratio(left)) + float(eye_aspect_ratio(right))) / 2)
    return np.asarray(values)


# ------------------------------------------------------------------- WER ---

def edit_distance(reference: Sequence[str], hypothesis: Sequence[str]) -> int:
    prev = list(range(len(hypothesis) + 1))
    for i, r in enumerate(reference, 1):
        cur = [i] + [0] * len(hypothesis)
        for j, h in enumerate(hypothesis, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(reference_words: Sequence[str], hypothesis_words: Sequence[str]) -> float:
    """(S + D + I) / len(reference); can exceed 1."""
    if not reference_words:
        raise ValidationError("WER needs a non-empty reference")
    return edit_distance(list(reference_words), list(hypothesis_words)) / len(reference_words)


# ---------------------------------------------------------------- report ---

@dataclass
class MetricValue:
    value: Optional[float] = None
    std: Optional[float] = None
    skipped: bool = False
    note: str = ""

    @classmethod
    def skip(cls, reason: str) -> "MetricValue":
        return cls(skipped=True, note=reason)


def _encode(v):
    if v is None or math.isfinite(v):
        return v
    return "inf" if v > 0 else "-inf"


def _decode(v):
    return float(v) if isinstance(v, str) else v


@dataclass
class MetricReport:
    metrics: Dict[str, MetricValue] = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)
    providers: Dict[str, str] = field(default_factory=dict)
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "inputs": dict(self.inputs),
            "providers": dict(self.providers),
            "metrics": {
                name: {**asdict(m), "value": _encode(m.value), "std": _encode(m.std)}
                for name, m in self.metrics.items()
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        metrics = {
            name: MetricValue(
                value=_decode(m["value"]), std=_decode(m["std"]), skipped=m["skipped"], note=m.get("note", "")
            )
            for name, m in data["metrics"].items()
        }
        return cls(metrics, data.get("inputs", {}), data.get("providers", {}), data.get("config_hash", ""))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls.from_dict(json.loads(text))

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path

    def to_frame(self) -> pd.DataFrame:
        names = [n for n in METRIC_ORDER if n in self.metrics] + sorted(set(self.metrics) - set(METRIC_ORDER))
        rows = [
            {"metric": n, "value": self.metrics[n].value, "std": self.metrics[n].std,
             "skipped": self.metrics[n].skipped, "note": self.metrics[n].note}
            for n in names
        ]
        return pd.DataFrame(rows, columns=["metric", "value", "std", "skipped", "note"])


@dataclass
class EvalProviders:
    embedding: Optional[object] = None
    acd_embedding: Optional[object] = None
    landmark: Optional[object] = None
    lip_reader: Optional[object] = None
    names: Dict[str, str] = field(default_factory=dict)


def _mean_std(values) -> MetricValue:
    values = np.asarray(values, dtype=np.float64)
    return MetricValue(value=float(values.mean()), std=float(values.std()))


def evaluate_clip(generated, reference, providers: EvalProviders, config_hash: str = "", reference_image=None) -> MetricReport:
    """Every metric the providers allow; the rest are marked skipped."""
    gen, ref = generated.frames, reference.frames
    if len(gen) != len(ref):
        raise ValidationError(f"frame counts differ: generated {len(gen)}, reference {len(ref)}")
    if gen.shape[1:] != ref.shape[1:]:
        raise ValidationError(f"frame sizes differ: generated {gen.shape[1:]}, reference {ref.shape[1:]}")
    report = MetricReport(
        inputs={"generated": generated.name, "reference": reference.name},
        providers=dict(providers.names),
        config_hash=config_hash,
    )
    m = report.metrics
    m["psnr"] = MetricValue(value=psnr(gen, ref))
    m["ssim"] = _mean_std([ssim(g, r) for g, r in zip(gen, ref)])
    m["cpbd"] = _mean_std([cpbd(g) for g in gen])

    if providers.embedding is None:
        m["kid"] = MetricValue.skip("no embedding provider")
    elif len(gen) < 2:
        m["kid"] = MetricValue.skip("KID needs at least 2 frames")
    else:
        real = np.stack([providers.embedding.embed(f) for f in ref])
        fake = np.stack([providers.embedding.embed(f) for f in gen])
        value, std = kid(real, fake)
        m["kid"] = MetricValue(value=100 * value, std=100 * std, note="x100")

    if providers.acd_embedding is None:
        m["acd_cosine"] = MetricValue.skip("no acd_embedding provider")
        m["acd_euclidean"] = MetricValue.skip("no acd_embedding provider")
    else:
        target = ref[0] if reference_image is None else reference_image
        cos, euc = acd(gen, target, providers.acd_embedding)
        cos_ok, euc_ok = acd_passes(cos, euc)
        m["acd_cosine"] = MetricValue(value=cos, note="pass" if cos_ok else "fail")
        m["acd_euclidean"] = MetricValue(value=euc, note="pass" if euc_ok else "fail")

    if providers.landmark is None:
        m["blinks_per_sec"] = MetricValue.skip("no landmark provider")
    else:
        m["blinks_per_sec"] = MetricValue(value=blinks_per_sec(ear_series(gen, providers.landmark), generated.fps))

    if providers.lip_reader is None:
        m["wer"] = MetricValue.skip("no lip_reader provider")
    elif not reference.transcript:
        m["wer"] = MetricValue.skip("reference has no transcript")
    else:
        m["wer"] = MetricValue(value=wer(reference.transcript, providers.lip_reader.read(gen)))
    return report


def evaluate_many(pairs, providers, config_hash: str = "", workers: int = 4) -> List[MetricReport]:
    """Evaluate (generated, reference) clip pairs on a thread pool; results keep input order.

    ``providers`` is an EvalProviders shared by every pair, or a callable
    ``(generated, reference) -> EvalProviders`` for per-clip providers.
    """
    pairs = list(pairs)

    def run(pair):
        gen, ref = pair
        chosen = providers(gen, ref) if callable(providers) else providers
        return evaluate_clip(gen, ref, chosen, config_hash)

    if workers <= 1 or len(pairs) <= 1:
        return [run(p) for p in pairs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, pairs))


def aggregate_reports(reports: Sequence[MetricReport]) -> pd.DataFrame:
    """One row per clip, one column per metric value."""
    rows = []
    for r in reports:
        row = {"clip": r.inputs.get("generated", "")}
        row.update({name: mv.value for name, mv in r.metrics.items()})
        rows.append(row)
    return pd.DataFrame(rows).set_index("clip")


def _clip_dirs(root: Path) -> Dict[str, Path]:
    if any(root.glob("*.png")):
        return {root.name: root}
    return {p.name: p for p in sorted(root.iterdir()) if p.is_dir()}


def pair_clip_directories(generated_dir, reference_dir) -> List[Tuple[Path, Path]]:
    """Match clips by directory name; a single clip directory pairs with a single clip directory."""
    generated_dir, reference_dir = Path(generated_dir), Path(reference_dir)
    for d in (generated_dir, reference_dir):
        if not d.is_dir():
            raise ValidationError(f"clip directory not found: {d}")
    gen, ref = _clip_dirs(generated_dir), _clip_dirs(reference_dir)
    if len(gen) == 1 and len(ref) == 1:
        return [(next(iter(gen.values())), next(iter(ref.values())))]
    missing, extra = sorted(set(ref) - set(gen)), sorted(set(gen) - set(ref))
    if missing or extra:
        raise ValidationError(f"clip sets differ: missing from generated {missing}, not in reference {extra}")
    if not gen:
        raise ValidationError(f"no clips under {generated_dir}")
    return [(gen[name], ref[name]) for name in sorted(gen)]
