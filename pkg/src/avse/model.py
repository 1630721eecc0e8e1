"""Convolutional-recurrent audio-visual enhancer.

Per frame: a conv/pool audio net turns the 257x5 noisy context into ``A``;
the EOFP-quantized 2048x5 visual context ``V`` is appended; an LSTM and a
fully connected layer fuse the sequence; two linear heads predict the clean
log1p frame and the centre latent.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn

from . import audio, augment
from . import nn as core
from .audio import Waveform
from .autoencoder import LATENT_DIM
from .eofp import quantize_dequantize
from .nn import LayerSpec


@dataclass(frozen=True)
class AvseConfig:
    n_bins: int = audio.N_BINS
    context: int = audio.CONTEXT
    conv_channels: tuple[int, int, int] = (16, 32, 32)
    kernel: int = 3
    freq_pool: int = 2
    lstm_hidden: int = 256
    bidirectional: bool = False
    fc2: int = 512
    latent_dim: int = LATENT_DIM
    latent_bits: int = 3
    mu: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        if self.mu <= 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if self.kernel % 2 == 0:
            raise ValueError("audio net kernels must be odd to keep the context width")

    @property
    def width(self) -> int:
        return 2 * self.context + 1

    def audio_specs(self) -> list[LayerSpec]:
        c1, c3, c4 = self.conv_channels
        pad = self.kernel // 2
        conv = lambda i, o: LayerSpec("conv2d", {"in_channels": i, "out_channels": o,  # noqa: E731
                                                  "kernel": self.kernel, "padding": pad})
        return [conv(1, c1),
                LayerSpec("maxpool2d", {"kernel": (self.freq_pool, 1)}),
                conv(c1, c3),
                conv(c3, c4)]

    def audio_latent_shape(self) -> tuple[int, ...]:
        shape = (1, self.n_bins, self.width)
        for spec in self.audio_specs():
            shape = spec.output_shape(shape)
        return shape

    @property
    def audio_latent_dim(self) -> int:
        return math.prod(self.audio_latent_shape())

    @property
    def fused_input_dim(self) -> int:
        return self.audio_latent_dim + self.latent_dim * self.width

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d


class AvseNet(nn.Module):
    def __init__(self, config: AvseConfig):
        super().__init__()
        self.config = config
        conv_a1, pool_a2, conv_a3, conv_a4 = (s.build() for s in config.audio_specs())
        self.audio_net = nn.Sequential(conv_a1, nn.ReLU(), pool_a2, conv_a3, nn.ReLU(), conv_a4, nn.ReLU())
        self.lstm1 = LayerSpec("lstm", {"input_size": config.fused_input_dim, "hidden_size": config.lstm_hidden,
                                        "bidirectional": config.bidirectional}).build()
        out = config.lstm_hidden * (2 if config.bidirectional else 1)
        self.fc2 = nn.Linear(out, config.fc2)
        self.fc_a3 = nn.Linear(config.fc2, config.n_bins)
        self.fc_v3 = nn.Linear(config.fc2, config.latent_dim)

    def audio_latent(self, x_ctx: torch.Tensor) -> torch.Tensor:
        """``(B, T, 257, 5)`` -> ``(B, T, A)``."""
        cfg = self.config
        if tuple(x_ctx.shape[-2:]) != (cfg.n_bins, cfg.width):
            raise core.ShapeError("audio context", x_ctx.shape, (*x_ctx.shape[:-2], cfg.n_bins, cfg.width))
        b, t = x_ctx.shape[:2]
        a = self.audio_net(x_ctx.reshape(b * t, 1, cfg.n_bins, cfg.width))
        return a.reshape(b, t, -1)

    def fuse(self, a: torch.Tensor, v_ctx: torch.Tensor):
        if a.shape[:2] != v_ctx.shape[:2]:
            raise core.ShapeError("visual context", v_ctx.shape, (*a.shape[:2], v_ctx.shape[-1]))
        av = torch.cat([a, v_ctx], dim=-1)
        f = torch.relu(self.fc2(self.lstm1(av)[0]))
        return self.fc_a3(f), self.fc_v3(f)

    def forward(self, x_ctx: torch.Tensor, v_ctx: torch.Tensor):
        return self.fuse(self.audio_latent(x_ctx), v_ctx)


def build(config: AvseConfig, seed: int = 0) -> AvseNet:
    model = AvseNet(config)
    core.kaiming_uniform_(model, core.seed_everything(seed))
    return model


def quantize_latent(z: np.ndarray, total_bits: int = 3) -> np.ndarray:
    """EOFP round trip of each latent frame (own exponent window per frame)."""
    return quantize_dequantize(np.asarray(z, dtype=np.float32), total_bits, rows=True)


def visual_context(v: np.ndarray, L: int = audio.CONTEXT) -> np.ndarray:
    """``(T, D)`` latents -> ``(T, (2L+1) * D)``, frames ``n-L .. n+L`` in order."""
    ctx = audio.frame_context(v, L)  # (T, D, 2L+1)
    return np.ascontiguousarray(ctx.transpose(0, 2, 1).reshape(len(v), -1))


def combined_loss(y_hat, y, z_hat, z, mu: float = 1e-3, mask=None) -> torch.Tensor:
    return core.mse(y_hat, y, mask) + mu * core.mse(z_hat, z, mask)


def fuse_and_decode(model: AvseNet, a_seq: torch.Tensor, v_ctx_seq: torch.Tensor):
    return model.fuse(a_seq, v_ctx_seq)


def audio_net(model: AvseNet, x_ctx: torch.Tensor) -> torch.Tensor:
    return model.audio_latent(x_ctx)


# ---------------------------------------------------------------- training


@dataclass
class Utterance:
    """Frame-aligned training material for one noisy mixture."""

    id: str
    x: np.ndarray  # (F, 257) normalised noisy log1p
    y: np.ndarray  # (F, 257) clean log1p, normalised with the noisy statistics
    z: np.ndarray  # (T, 2048) unquantized latents

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.float32)
        self.z = np.asarray(self.z, dtype=np.float32)
        if len(self.x) != len(self.y):
            raise ValueError(f"{self.id}: {len(self.x)} noisy frames but {len(self.y)} clean frames")
        if abs(len(self.x) - len(self.z)) > 1:
            raise ValueError(f"{self.id}: {len(self.x)} audio frames vs {len(self.z)} video frames")


@dataclass
class TrainSettings:
    epochs: int = 20
    batch_size: int = 32
    lr: float = core.DEFAULT_LR
    seed: int = 0
    segment: int = 150
    ofr_k: int = 0
    lpr: float = 0.0


@dataclass
class Segment:
    x_ctx: np.ndarray   # (S, 257, 5)
    y: np.ndarray       # (S, 257)
    v_halo: np.ndarray  # (S + 2L, 2048) quantized latents incl. context halo
    z: np.ndarray       # (S, 2048)
    mask: np.ndarray    # (S,) frames that count towards the loss


def align_latents(z: np.ndarray, n_frames: int) -> np.ndarray:
    """Truncate or edge-pad a latent sequence that is off by at most one frame."""
    if abs(len(z) - n_frames) > 1:
        raise ValueError(f"video has {len(z)} frames but audio has {n_frames}")
    if len(z) >= n_frames:
        return z[:n_frames]
    return np.concatenate([z, z[-1:]], axis=0)


def utterance_segments(utt: Utterance, settings: TrainSettings, config: AvseConfig,
                       rng: np.random.Generator) -> list[Segment]:
    L, S = config.context, settings.segment
    z = align_latents(utt.z, len(utt.x))
    audio_frames = np.concatenate([utt.x, utt.y], axis=1)
    offset = augment.sample_offset(settings.ofr_k, rng) if settings.ofr_k else 0
    offset = int(np.clip(offset, -(len(z) - 1), len(z) - 1))
    audio_frames, z = augment.apply_offset(audio_frames, z, offset)
    x, y = audio_frames[:, :config.n_bins], audio_frames[:, config.n_bins:]
    v = quantize_latent(z, config.latent_bits)
    n = len(x)
    x_ctx = audio.frame_context(x, L)
    segments = []
    for start in range(0, n, S):
        idx = np.minimum(np.arange(start, start + S), n - 1)
        halo = np.clip(np.arange(start - L, start + S + L), 0, n - 1)
        pos = np.arange(start, start + S)
        mask = (pos >= L) & (pos <= n - 1 - L)
        if n <= 2 * L:
            mask = pos < n
        segments.append(Segment(x_ctx[idx], y[idx], v[halo], z[idx], mask))
    return segments


def collate(segments: list[Segment], config: AvseConfig, lp: float, rng: np.random.Generator):
    """Stack segments into tensors; zero-out one run of visual frames for the batch."""
    L, S = config.context, len(segments[0].y)
    v_halo = np.stack([s.v_halo for s in segments])
    start, stop = augment.zero_out_span(S, lp, rng)
    v_halo[:, L + start:L + stop] = 0.0
    v_ctx = np.stack([v_halo[:, j:j + S] for j in range(2 * L + 1)], axis=2).reshape(len(segments), S, -1)
    return (torch.from_numpy(np.stack([s.x_ctx for s in segments]).astype(np.float32)),
            torch.from_numpy(v_ctx.astype(np.float32)),
            torch.from_numpy(np.stack([s.y for s in segments]).astype(np.float32)),
            torch.from_numpy(np.stack([s.z for s in segments]).astype(np.float32)),
            torch.from_numpy(np.stack([s.mask for s in segments])))


def run_epoch(model: AvseNet, optimizer, dataset: list[Utterance], settings: TrainSettings,
              epoch: int) -> float:
    """One pass over the data; batch order, offsets and zero-out derive from (seed, epoch)."""
    config = model.config
    rng = np.random.default_rng([settings.seed, epoch])
    segments = [seg for utt in dataset for seg in utterance_segments(utt, settings, config, rng)]
    order = rng.permutation(len(segments))
    model.train()
    total, weight = 0.0, 0.0
    for start in range(0, len(order), settings.batch_size):
        batch = [segments[i] for i in order[start:start + settings.batch_size]]
        lp = augment.sample_lp(settings.lpr, rng)
        x, v, y, z, mask = collate(batch, config, lp, rng)
        y_hat, z_hat = model(x, v)
        loss = combined_loss(y_hat, y, z_hat, z, config.mu, mask)
        if not torch.isfinite(loss):
            raise core.NumericalError(f"non-finite loss at epoch {epoch + 1}, batch {start // settings.batch_size}"
                                      f" (lp={lp:.1f}, |x|max={x.abs().max():.3g}, |v|max={v.abs().max():.3g})")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        n = float(mask.sum())
        total += loss.item() * n
        weight += n
    model.eval()
    return total / max(weight, 1.0)


def train(model: AvseNet, dataset: list[Utterance], settings: TrainSettings, optimizer=None,
          start_epoch: int = 0, on_epoch: Callable[[int, float], None] | None = None) -> list[float]:
    """Adam over the combined loss; returns per-epoch mean training losses."""
    if not dataset:
        raise ValueError("training set is empty")
    optimizer = optimizer or core.make_adam(model.parameters(), lr=settings.lr)
    history = []
    for epoch in range(start_epoch, settings.epochs):
        loss = run_epoch(model, optimizer, dataset, settings, epoch)
        history.append(loss)
        if on_epoch:
            on_epoch(epoch, loss)
    return history


# --------------------------------------------------------------- inference


@torch.no_grad()
def predict(model: AvseNet, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Enhanced normalised log1p frames for one utterance.

    ``x`` is ``(F, 257)`` normalised noisy log1p, ``v`` ``(F, 2048)`` model-ready
    (already quantized / zeroed) latents.
    """
    cfg = model.config
    if len(x) != len(v):
        raise ValueError(f"{len(x)} audio frames but {len(v)} visual frames")
    x_ctx = torch.from_numpy(audio.frame_context(x, cfg.context).astype(np.float32))[None]
    v_ctx = torch.from_numpy(visual_context(np.asarray(v, np.float32), cfg.context))[None]
    model.eval()
    y_hat, _ = model(x_ctx, v_ctx)
    return y_hat[0].numpy().astype(np.float64)


def model_latents(model: AvseNet, z: np.ndarray | None, n_frames: int,
                  absent: np.ndarray | None = None) -> np.ndarray:
    """Quantize encoder latents for the model; absent frames become zeros."""
    dim = model.config.latent_dim
    if z is None:
        return np.zeros((n_frames, dim), np.float32)
    v = quantize_latent(align_latents(np.asarray(z, np.float32), n_frames), model.config.latent_bits)
    if absent is not None:
        absent = np.asarray(absent, dtype=bool)
        if len(absent) != n_frames:
            absent = align_latents(absent[:, None], n_frames)[:, 0]
        v[absent] = 0.0
    return v


def enhance(noisy: Waveform, model: AvseNet, latents: np.ndarray | None = None,
            absent: np.ndarray | None = None) -> Waveform:
    """Enhance one noisy utterance given its encoder latents (``None`` = no video)."""
    if noisy.sample_rate != audio.SAMPLE_RATE:
        raise ValueError(f"expected {audio.SAMPLE_RATE} Hz audio (50 fps framing), got {noisy.sample_rate}")
    x, stats, spec = audio.analyse(noisy)
    v = model_latents(model, latents, len(x), absent)
    y_hat = predict(model, x, v)
    return audio.reconstruct(y_hat, stats, spec)


def encode_lips(frames: np.ndarray, ae, crq_config) -> np.ndarray:
    """CRQ + encoder for a ``(T, H, W, C)`` lip sequence -> ``(T, 2048)``."""
    from . import autoencoder, crq

    return autoencoder.encode(ae, crq.crq_sequence(frames, crq_config))


def enhance_av(noisy: Waveform, lips: np.ndarray | None, model: AvseNet, ae=None, crq_config=None,
               absent: np.ndarray | None = None) -> Waveform:
    """Full chain from waveform + lip frames; ``lips=None`` runs with all latents zeroed."""
    z = None if lips is None else encode_lips(lips, ae, crq_config)
    return enhance(noisy, model, z, absent)


def save_model(path, model: AvseNet, optimizer=None, extra: dict | None = None) -> None:
    core.save_checkpoint(path, model, optimizer, preamble={"kind": "avse", "config": model.config.to_dict()},
                         extra=extra)


def load_model(path, with_optimizer: bool = False, lr: float = core.DEFAULT_LR):
    from . import tensorio

    _, meta = tensorio.load_bundle(path)
    if meta.get("preamble", {}).get("kind") != "avse":
        raise ValueError(f"{path} is not an enhancement model checkpoint")
    model = AvseNet(AvseConfig(**meta["preamble"]["config"]))
    optimizer = core.make_adam(model.parameters(), lr=lr) if with_optimizer else None
    core.load_checkpoint(path, model, optimizer)
    model.eval()
    return (model, optimizer, meta) if with_optimizer else (model, meta)
