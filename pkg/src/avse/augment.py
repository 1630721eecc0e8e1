"""Noise mixing, audio/video offset simulation and visual zero-out."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .audio import Waveform

FRAME_MS = 20


@dataclass(frozen=True)
class MixSpec:
    snr_db: float
    noise_id: str = ""
    loop: bool = True

    def __post_init__(self):
        if not math.isfinite(self.snr_db):
            raise ValueError(f"snr_db must be finite, got {self.snr_db}")


@dataclass(frozen=True)
class OffsetRange:
    k: int = 0

    def __post_init__(self):
        if self.k < 0 or int(self.k) != self.k:
            raise ValueError(f"offset range must be a non-negative integer, got {self.k}")

    @property
    def values(self) -> list[int]:
        return list(range(-self.k, self.k + 1))


@dataclass(frozen=True)
class LowQualityRange:
    lpr: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.lpr <= 100.0:
            raise ValueError(f"lpr must be within [0, 100], got {self.lpr}")


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x, dtype=np.float64))))


def fit_noise(noise: np.ndarray, length: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Loop (from a random circular start) or trim noise to ``length`` samples."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.size == 0:
        raise ValueError("noise source is empty")
    start = int(rng.integers(noise.size)) if rng is not None else 0
    idx = (start + np.arange(length)) % noise.size
    return noise[idx]


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float,
               rng: np.random.Generator | None = None) -> Waveform:
    """``clean + g * noise`` with ``g`` chosen so the mixture sits at ``snr_db``."""
    if clean.sample_rate != noise.sample_rate:
        raise ValueError(f"sample rates differ: {clean.sample_rate} vs {noise.sample_rate}")
    if not math.isfinite(snr_db):
        raise ValueError(f"snr_db must be finite, got {snr_db}")
    n = fit_noise(noise.samples, len(clean), rng)
    p_clean, p_noise = rms(clean.samples), rms(n)
    if p_noise == 0.0:
        raise ValueError("noise source is silent")
    if p_clean == 0.0:
        raise ValueError("clean signal is silent")
    gain = p_clean / (p_noise * 10.0 ** (snr_db / 20.0))
    return Waveform(clean.samples + gain * n, clean.sample_rate)


def sample_offset(offsets: OffsetRange | int, rng: np.random.Generator) -> int:
    k = offsets.k if isinstance(offsets, OffsetRange) else int(offsets)
    return int(rng.integers(-k, k + 1))


def offset_ms(offset: int) -> int:
    return FRAME_MS * offset


def apply_offset(audio_frames, video_frames, offset: int):
    """Shift the audio stream by ``offset`` frames against the video.

    Positive offsets pair audio frame ``n + offset`` with video frame ``n``.
    Both streams are cut to the overlap, so they come back equally long.
    """
    n = min(len(audio_frames), len(video_frames))
    if abs(offset) >= n:
        raise ValueError(f"offset {offset} is not shorter than the sequence ({n} frames)")
    audio_frames, video_frames = audio_frames[:n], video_frames[:n]
    if offset >= 0:
        return audio_frames[offset:], video_frames[:n - offset]
    return audio_frames[:n + offset], video_frames[-offset:]


def sample_lp(lpr: LowQualityRange | float, rng: np.random.Generator) -> float:
    """Low-quality percentage drawn uniformly from ``[0, lpr]``."""
    lpr = lpr.lpr if isinstance(lpr, LowQualityRange) else float(lpr)
    return float(rng.uniform(0.0, lpr)) if lpr > 0 else 0.0


def zeroed_run_length(n_frames: int, lp: float) -> int:
    # round half up
    return min(n_frames, int(math.floor(n_frames * lp / 100.0 + 0.5)))


def zero_out_span(n_frames: int, lp: float, rng: np.random.Generator) -> tuple[int, int]:
    """``(start, stop)`` of the contiguous run that zero-out would blank."""
    if not 0.0 <= lp <= 100.0:
        raise ValueError(f"lp must be within [0, 100], got {lp}")
    length = zeroed_run_length(n_frames, lp)
    start = int(rng.integers(0, n_frames - length + 1)) if length else 0
    return start, start + length


def zero_out(latents: np.ndarray, lp: float, rng: np.random.Generator) -> np.ndarray:
    """Replace one contiguous run of ``round(F * lp / 100)`` frames with zeros."""
    out = np.array(latents, copy=True)
    start, stop = zero_out_span(len(out), lp, rng)
    out[start:stop] = 0
    return out


def worker_rng(master_seed: int, worker: int) -> np.random.Generator:
    return np.random.default_rng([master_seed, worker])
