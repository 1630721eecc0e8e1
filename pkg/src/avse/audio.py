"""Waveform <-> normalised log1p magnitude features.

Frames are 512-sample Hann windows every 320 samples (20 ms at 16 kHz), so
the spectrogram runs at exactly 50 frames per second and frame ``n`` lines
up with video frame ``n``.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

SAMPLE_RATE = 16000
WINDOW_SIZE = 512
HOP = 320
N_BINS = WINDOW_SIZE // 2 + 1
CONTEXT = 2
STD_FLOOR = 1e-8


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class ComplexSpectrogram:
    frames: np.ndarray  # (F, window_size // 2 + 1) complex
    length: int
    sample_rate: int = SAMPLE_RATE
    window_size: int = WINDOW_SIZE
    hop: int = HOP
    center: bool = True
    window: str = "hann"

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_rate(self) -> Fraction:
        return Fraction(self.sample_rate, self.hop)

    def with_frames(self, frames: np.ndarray) -> "ComplexSpectrogram":
        return ComplexSpectrogram(frames, self.length, self.sample_rate, self.window_size,
                                  self.hop, self.center, self.window)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def _window(name: str, size: int) -> np.ndarray:
    if name == "hann":
        n = np.arange(size)
        return 0.5 - 0.5 * np.cos(2 * np.pi * n / size)
    if name in ("rect", "boxcar", "rectangular"):
        return np.ones(size)
    raise ValueError(f"unknown window {name!r}")


def n_frames_for(length: int, hop: int = HOP, window_size: int = WINDOW_SIZE) -> int:
    """Frame count produced by :func:`stft` with centre padding.

    Frame ``n`` is centred on sample ``n * hop``; frames are added until the
    last sample sits inside a window, so this is ``length // hop + 1`` unless
    the tail would fall past the final half window.
    """
    reach = length - window_size // 2
    return 1 + max(0, -(-reach // hop))


def stft(wave: Waveform, *, window: str = "hann", center: bool = True,
         window_size: int = WINDOW_SIZE, hop: int = HOP) -> ComplexSpectrogram:
    x = wave.samples
    if x.size == 0:
        raise ValueError("cannot analyse an empty waveform")
    if center:
        pad = window_size // 2
        mode = "reflect" if x.size > pad else "constant"
        xp = np.pad(x, pad, mode=mode)
        count = n_frames_for(x.size, hop, window_size)
    else:
        if x.size < window_size:
            raise ValueError(f"need at least {window_size} samples without centre padding, got {x.size}")
        xp = x
        count = 1 + -(-(x.size - window_size) // hop)
    # zero-extend so the final frame is complete
    xp = np.pad(xp, (0, max(0, (count - 1) * hop + window_size - xp.size)))
    idx = np.arange(window_size)[None, :] + hop * np.arange(count)[:, None]
    frames = np.fft.rfft(xp[idx] * _window(window, window_size), axis=1)
    return ComplexSpectrogram(frames, x.size, wave.sample_rate, window_size, hop, center, window)


def istft(spec: ComplexSpectrogram) -> Waveform:
    """Weighted overlap-add inverse (divides by the summed squared window)."""
    w = _window(spec.window, spec.window_size)
    count = spec.n_frames
    total = spec.window_size + spec.hop * (count - 1)
    frames = np.fft.irfft(spec.frames, n=spec.window_size, axis=1) * w
    out = np.zeros(total)
    norm = np.zeros(total)
    for i in range(count):
        sl = slice(i * spec.hop, i * spec.hop + spec.window_size)
        out[sl] += frames[i]
        norm[sl] += w ** 2
    start = spec.window_size // 2 if spec.center else 0
    stop = start + spec.length
    if stop > total:
        raise ValueError(f"spectrogram with {count} frames cannot cover {spec.length} samples")
    out, norm = out[start:stop], norm[start:stop]
    if np.any(norm < 1e-10):
        raise ValueError("window normalisation has zero energy inside the output span")
    return Waveform(out / norm, spec.sample_rate)


def log1p_feature(spec: ComplexSpectrogram) -> np.ndarray:
    return np.log1p(np.abs(spec.frames))


def inverse_log1p(feature: np.ndarray) -> np.ndarray:
    return np.maximum(np.expm1(feature), 0.0)


def normalize(feature: np.ndarray) -> tuple[np.ndarray, NormStats]:
    """Per-bin zero-mean / unit-std normalisation over one utterance."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.ndim != 2 or feature.shape[0] < 2:
        raise ValueError(f"normalisation needs at least 2 frames, got shape {feature.shape}")
    stats = NormStats(feature.mean(axis=0), np.maximum(feature.std(axis=0), STD_FLOOR))
    return apply_norm(feature, stats), stats


def apply_norm(feature: np.ndarray, stats: NormStats) -> np.ndarray:
    return (feature - stats.mean) / stats.std


def denormalize(feature: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(feature, dtype=np.float64) * stats.std + stats.mean


def frame_context(feature: np.ndarray, L: int = CONTEXT) -> np.ndarray:
    """Stack frames ``n-L .. n+L`` for every frame, replicating the edges.

    Input ``(F, D)``, output ``(F, D, 2L + 1)``.
    """
    feature = np.asarray(feature)
    n = feature.shape[0]
    if n < 1:
        raise ValueError("need at least one frame")
    idx = np.clip(np.arange(n)[:, None] + np.arange(-L, L + 1)[None, :], 0, n - 1)
    return np.ascontiguousarray(np.moveaxis(feature[idx], 1, -1))


def reconstruct(enhanced: np.ndarray, stats: NormStats, noisy: ComplexSpectrogram) -> Waveform:
    """Normalised log1p magnitudes + noisy phase -> waveform."""
    enhanced = np.asarray(enhanced)
    if enhanced.shape != noisy.frames.shape:
        raise ValueError(f"feature shape {enhanced.shape} does not match spectrogram {noisy.frames.shape}")
    magnitude = inverse_log1p(denormalize(enhanced, stats))
    phase = np.exp(1j * np.angle(noisy.frames))
    return istft(noisy.with_frames(magnitude * phase))


def analyse(wave: Waveform) -> tuple[np.ndarray, NormStats, ComplexSpectrogram]:
    """stft -> log1p -> normalise, the usual front end for one utterance."""
    spec = stft(wave)
    feature, stats = normalize(log1p_feature(spec))
    return feature, stats, spec


def read_wav(path, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Load a mono WAV, resampling (polyphase) to ``sample_rate`` when needed."""
    rate, data = wavfile.read(str(path))
    if data.ndim > 1:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    if rate != sample_rate:
        ratio = Fraction(sample_rate, rate)
        x = resample_poly(x, ratio.numerator, ratio.denominator)
    return Waveform(x, sample_rate)


def write_wav(path, wave: Waveform) -> None:
    pcm = np.clip(np.round(wave.samples * 32767.0), -32768, 32767).astype(np.int16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), wave.sample_rate, pcm)
