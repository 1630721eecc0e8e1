"""Colour / resolution / bit-quantization reduction of lip frames.

Frames are ``(H, W, C)`` float arrays in [0, 1] with ``C`` in {1, 3}.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .eofp import SUPPORTED_BITS, quantize_dequantize

LUMA = np.array([0.299, 0.587, 0.114])
RESOLUTIONS = (64, 32, 16)
FPS = 50
FRAME_SUFFIXES = (".png", ".pgm")


@dataclass(frozen=True)
class CrqConfig:
    color: str = "GRAY"
    resolution: int = 16
    image_bits: int = 5

    def __post_init__(self):
        if self.color not in ("RGB", "GRAY"):
            raise ValueError(f"color must be RGB or GRAY, got {self.color!r}")
        if self.resolution not in RESOLUTIONS:
            raise ValueError(f"resolution must be one of {RESOLUTIONS}, got {self.resolution}")
        if self.image_bits not in SUPPORTED_BITS:
            raise ValueError(f"image_bits must be one of {SUPPORTED_BITS}, got {self.image_bits}")

    @property
    def channels(self) -> int:
        return 3 if self.color == "RGB" else 1


def _as_frame(frame) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float32)
    if frame.ndim == 2:
        frame = frame[:, :, None]
    if frame.ndim != 3 or frame.shape[2] not in (1, 3):
        raise ValueError(f"expected an (H, W, 1|3) frame, got shape {frame.shape}")
    return frame


def color_reduce(frame, mode: str = "GRAY") -> np.ndarray:
    frame = _as_frame(frame)
    c = frame.shape[2]
    if mode == "RGB":
        if c != 3:
            raise ValueError(f"RGB mode needs 3 channels, got {c}")
        return frame
    if mode != "GRAY":
        raise ValueError(f"unknown colour mode {mode!r}")
    if c == 1:
        return frame
    gray = np.clip(frame.astype(np.float64) @ LUMA, 0.0, 1.0)
    return gray[:, :, None].astype(np.float32)


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i averages input cells overlapping output cell i, weighted by overlap."""
    scale = n_in / n_out
    lo = np.arange(n_out)[:, None] * scale
    hi = lo + scale
    j = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, j + 1) - np.maximum(lo, j), 0.0, None)
    return overlap / scale


def resolution_reduce(frame, r: int) -> np.ndarray:
    """Area-weighted (box) downsampling to ``r x r``."""
    frame = _as_frame(frame)
    h, w, _ = frame.shape
    if r > min(h, w):
        raise ValueError(f"cannot upscale a {h}x{w} frame to {r}x{r}")
    if (h, w) == (r, r):
        return frame
    rows, cols = _area_matrix(h, r), _area_matrix(w, r)
    out = np.einsum("ih,hwc,jw->ijc", rows, frame.astype(np.float64), cols)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def image_quantize(frame, bits: int) -> np.ndarray:
    frame = _as_frame(frame)
    if frame.size and (frame.min() < 0 or frame.max() > 1):
        raise ValueError("pixels must lie in [0, 1]")
    return quantize_dequantize(frame, bits)


def crq(frame, config: CrqConfig) -> np.ndarray:
    return image_quantize(resolution_reduce(color_reduce(frame, config.color), config.resolution), config.image_bits)


def ae_target(frame, resolution: int) -> np.ndarray:
    """Grayscale, downsampled, unquantized frame used as the autoencoder target."""
    return resolution_reduce(color_reduce(frame, "GRAY"), resolution)


def crq_sequence(frames, config: CrqConfig) -> np.ndarray:
    return np.stack([crq(f, config) for f in frames])


def ae_target_sequence(frames, resolution: int) -> np.ndarray:
    return np.stack([ae_target(f, resolution) for f in frames])


def load_frame(path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        data = np.asarray(img, dtype=np.float32) / 255.0
    return _as_frame(data)


def save_frame(path, frame) -> None:
    frame = _as_frame(frame)
    codes = np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)
    img = Image.fromarray(codes[:, :, 0], "L") if codes.shape[2] == 1 else Image.fromarray(codes, "RGB")
    img.save(path)


def list_frames(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"lip frame directory not found: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)


def load_lip_sequence(directory) -> np.ndarray:
    """All frames of one utterance as ``(T, H, W, C)``; shapes must agree."""
    paths = list_frames(directory)
    if not paths:
        raise FileNotFoundError(f"no PNG/PGM frames in {directory}")
    frames = [load_frame(p) for p in paths]
    shape = frames[0].shape
    for p, f in zip(paths, frames):
        if f.shape != shape:
            raise ValueError(f"frame {p.name} has shape {f.shape}, expected {shape}")
    return np.stack(frames)
