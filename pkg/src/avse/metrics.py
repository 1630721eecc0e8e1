"""Objective scores (STOI, SNR) and table-style aggregation."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly


@dataclass(frozen=True)
class StoiConfig:
    sample_rate: int = 10000
    frame: int = 256
    nfft: int = 512
    n_bands: int = 15
    min_freq: float = 150.0
    segment: int = 30
    beta_db: float = -15.0
    dyn_range_db: float = 40.0


STOI = StoiConfig()
_EPS = np.finfo(np.float64).eps


def third_octave_bands(cfg: StoiConfig = STOI) -> np.ndarray:
    """Binary ``(n_bands, nfft/2 + 1)`` matrix grouping FFT bins into 1/3-octave bands."""
    freqs = np.arange(cfg.nfft // 2 + 1) * cfg.sample_rate / cfg.nfft
    k = np.arange(cfg.n_bands)
    lo = cfg.min_freq * 2.0 ** ((2 * k - 1) / 6.0)
    hi = cfg.min_freq * 2.0 ** ((2 * k + 1) / 6.0)
    bands = np.zeros((cfg.n_bands, freqs.size))
    for i in range(cfg.n_bands):
        a = int(np.argmin(np.abs(freqs - lo[i])))
        b = int(np.argmin(np.abs(freqs - hi[i])))
        bands[i, a:b] = 1.0
    return bands


def _frames(x: np.ndarray, size: int, hop: int) -> np.ndarray:
    count = 1 + (len(x) - size) // hop if len(x) >= size else 0
    idx = np.arange(size)[None, :] + hop * np.arange(count)[:, None]
    return x[idx]


def _window(size: int) -> np.ndarray:
    # Hann without its zero end points
    return np.hanning(size + 2)[1:-1]


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    count, size = frames.shape
    out = np.zeros((count - 1) * hop + size)
    for i, f in enumerate(frames):
        out[i * hop:i * hop + size] += f
    return out


def remove_silent_frames(x: np.ndarray, y: np.ndarray, cfg: StoiConfig = STOI):
    """Drop frames whose clean-signal energy is more than ``dyn_range_db`` below the loudest."""
    hop = cfg.frame // 2
    w = _window(cfg.frame)
    xf, yf = _frames(x, cfg.frame, hop) * w, _frames(y, cfg.frame, hop) * w
    if len(xf) == 0:
        raise ValueError("signal shorter than one STOI frame")
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = energy > energy.max() - cfg.dyn_range_db
    return _overlap_add(xf[keep], hop), _overlap_add(yf[keep], hop)


def _band_envelopes(x: np.ndarray, cfg: StoiConfig) -> np.ndarray:
    spec = np.fft.rfft(_frames(x, cfg.frame, cfg.frame // 2) * _window(cfg.frame), n=cfg.nfft, axis=1)
    return np.sqrt(third_octave_bands(cfg) @ (np.abs(spec) ** 2).T)


def stoi(clean, processed, sample_rate: int = 16000, cfg: StoiConfig = STOI) -> float:
    """Short-time objective intelligibility of ``processed`` against ``clean``."""
    x = np.asarray(getattr(clean, "samples", clean), dtype=np.float64)
    y = np.asarray(getattr(processed, "samples", processed), dtype=np.float64)
    n = min(len(x), len(y))
    x, y = x[:n], y[:n]
    if sample_rate != cfg.sample_rate:
        ratio = Fraction(cfg.sample_rate, sample_rate)
        x = resample_poly(x, ratio.numerator, ratio.denominator)
        y = resample_poly(y, ratio.numerator, ratio.denominator)
    x, y = remove_silent_frames(x, y, cfg)
    X, Y = _band_envelopes(x, cfg), _band_envelopes(y, cfg)
    if X.shape[1] < cfg.segment:
        raise ValueError(f"need at least {cfg.segment} active frames ({cfg.segment * cfg.frame // 2 / cfg.sample_rate * 1000:.0f} ms), "
                         f"got {X.shape[1]}")
    idx = np.arange(cfg.segment)[None, :] + np.arange(X.shape[1] - cfg.segment + 1)[:, None]
    xs = X[:, idx].transpose(1, 0, 2)  # (M, bands, N)
    ys = Y[:, idx].transpose(1, 0, 2)
    scale = np.linalg.norm(xs, axis=2, keepdims=True) / (np.linalg.norm(ys, axis=2, keepdims=True) + _EPS)
    clip = 10.0 ** (-cfg.beta_db / 20.0)
    ys = np.minimum(ys * scale, xs * (1.0 + clip))
    xs = xs - xs.mean(axis=2, keepdims=True)
    ys = ys - ys.mean(axis=2, keepdims=True)
    xs /= np.linalg.norm(xs, axis=2, keepdims=True) + _EPS
    ys /= np.linalg.norm(ys, axis=2, keepdims=True) + _EPS
    return float(np.sum(xs * ys) / (xs.shape[0] * xs.shape[1]))


def snr_db(clean, estimate) -> float:
    """``10 log10(|clean|^2 / |clean - estimate|^2)``; ``inf`` for a perfect estimate."""
    x = np.asarray(getattr(clean, "samples", clean), dtype=np.float64)
    e = np.asarray(getattr(estimate, "samples", estimate), dtype=np.float64)
    if x.shape != e.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {e.shape}")
    residual = float(np.sum((x - e) ** 2))
    if residual == 0.0:
        return math.inf
    return 10.0 * math.log10(float(np.sum(x ** 2)) / residual)


@dataclass
class ScoreReport:
    keys: tuple[str, ...]
    items: list[dict]
    groups: dict[tuple, dict[str, float]] = field(default_factory=dict)
    means: dict[str, float] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [{**dict(zip(self.keys, k)), **v} for k, v in sorted(self.groups.items())]


def _sort_key(value):
    return (0, value, "") if isinstance(value, (int, float)) else (1, 0, str(value))


def aggregate(items: list[dict], keys=("noise", "snr_db"), values=("stoi",)) -> ScoreReport:
    """Group items by ``keys`` and average each of ``values`` (plus the overall mean)."""
    if not items:
        raise ValueError("nothing to aggregate")
    keys = tuple(keys)
    for item in items:
        missing = [k for k in (*keys, *values) if k not in item]
        if missing:
            raise KeyError(f"item {item.get('item_id', item)!r} lacks {missing}")
    buckets = defaultdict(list)
    for item in items:
        buckets[tuple(item[k] for k in keys)].append(item)
    groups = {}
    for k in sorted(buckets, key=lambda t: tuple(_sort_key(v) for v in t)):
        members = buckets[k]
        groups[k] = {v: float(np.mean([m[v] for m in members])) for v in values}
        groups[k]["count"] = len(members)
    means = {v: float(np.mean([m[v] for m in items])) for v in values}
    return ScoreReport(keys, list(items), groups, means)


ITEM_COLUMNS = ("item_id", "noise", "snr_db", "stoi", "snr_improvement")


def write_items_csv(path, items: list[dict], columns=ITEM_COLUMNS) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for item in items:
            writer.writerow(item)


def write_report_csv(path, report: ScoreReport) -> None:
    rows = report.rows()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
