"""Convolution-only autoencoder producing 2048-d latent lip features."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import nn as core
from .nn import LayerSpec

LATENT_DIM = 2048


@dataclass(frozen=True)
class AeConfig:
    resolution: int = 16
    channels: int = 1
    latent_dim: int = LATENT_DIM
    widths: tuple[int, ...] = (32, 64, 128)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        r = self.resolution
        if r < 4 or r & (r - 1):
            raise ValueError(f"resolution must be a power of two >= 4 to reach a 2x2 code, got {r}")
        if self.latent_dim % 4:
            raise ValueError(f"latent_dim must split over a 2x2 grid, got {self.latent_dim}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")

    @property
    def n_down(self) -> int:
        return int(math.log2(self.resolution)) - 1

    def level_widths(self) -> list[int]:
        return [self.widths[min(i, len(self.widths) - 1)] for i in range(self.n_down)]

    def encoder_specs(self) -> list[LayerSpec]:
        specs, c = [], self.channels
        for w in self.level_widths():
            specs.append(LayerSpec("conv2d", {"in_channels": c, "out_channels": w, "kernel": 3,
                                              "stride": 2, "padding": 1}))
            c = w
        specs.append(LayerSpec("conv2d", {"in_channels": c, "out_channels": self.latent_dim // 4, "kernel": 1}))
        return specs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


class LipAutoencoder(nn.Module):
    def __init__(self, config: AeConfig):
        super().__init__()
        self.config = config
        specs = config.encoder_specs()
        layers: list[nn.Module] = []
        for spec in specs[:-1]:
            layers += [spec.build(), nn.ReLU()]
        layers.append(specs[-1].build())
        self.encoder = nn.Sequential(*layers)
        widths = config.level_widths()
        dec: list[nn.Module] = [nn.Conv2d(config.latent_dim // 4, widths[-1], 1), nn.ReLU()]
        for hi, lo in zip(widths[::-1], widths[::-1][1:] + [widths[0]]):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(hi, lo, 3, padding=1), nn.ReLU()]
        dec += [nn.Conv2d(widths[0], 1, 3, padding=1), nn.Sigmoid()]
        self.decoder = nn.Sequential(*dec)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """``(N, C, r, r)`` -> ``(N, latent_dim)``."""
        expected = (self.config.channels, self.config.resolution, self.config.resolution)
        if tuple(x.shape[1:]) != expected:
            raise core.ShapeError("autoencoder input", x.shape[1:], expected)
        return self.encoder(x).flatten(1)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.config.latent_dim:
            raise core.ShapeError("latent", z.shape, (z.shape[0], self.config.latent_dim))
        return self.decoder(z.reshape(z.shape[0], self.config.latent_dim // 4, 2, 2))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))


def build(config: AeConfig, seed: int = 0) -> LipAutoencoder:
    model = LipAutoencoder(config)
    core.kaiming_uniform_(model, core.seed_everything(seed), gain=math.sqrt(2.0))
    return model


def _to_nchw(frames: np.ndarray) -> torch.Tensor:
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim == 3:
        frames = frames[None]
    return torch.from_numpy(np.ascontiguousarray(frames.transpose(0, 3, 1, 2)))


def train_ae(model: LipAutoencoder, inputs: np.ndarray, targets: np.ndarray, epochs: int,
             batch_size: int = 64, lr: float = 1e-3, seed: int = 0, log=None, optimizer=None,
             start_epoch: int = 0, on_epoch=None) -> list[float]:
    """Frame-wise reconstruction training; returns the mean loss of every epoch.

    ``inputs`` are CRQ-processed frames ``(N, r, r, C)``, ``targets`` the
    unquantized grayscale frames ``(N, r, r, 1)``. Pass a restored
    ``optimizer`` and ``start_epoch`` to resume; shuffling depends only on
    ``(seed, epoch)``.
    """
    if len(inputs) == 0:
        raise ValueError("autoencoder training set is empty")
    if len(inputs) != len(targets):
        raise ValueError(f"{len(inputs)} inputs but {len(targets)} targets")
    x_all, y_all = _to_nchw(inputs), _to_nchw(targets)
    opt = optimizer or core.make_adam(model.parameters(), lr=lr)
    history = []
    for epoch in range(start_epoch, epochs):
        model.train()
        order = np.random.default_rng([seed, epoch]).permutation(len(x_all))
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = torch.from_numpy(order[start:start + batch_size])
            loss = core.mse(model(x_all[idx]), y_all[idx])
            core.check_finite(loss, "autoencoder loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        history.append(total / count)
        model.eval()
        if log:
            log(f"ae epoch {epoch + 1}/{epochs} loss {history[-1]:.6f}")
        if on_epoch:
            on_epoch(epoch, history[-1])
    return history


@torch.no_grad()
def encode(model: LipAutoencoder, frames: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Latent vectors ``(N, latent_dim)`` for frames ``(N, r, r, C)``."""
    model.eval()
    x = _to_nchw(frames)
    out = [model.encode(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return torch.cat(out).numpy() if out else np.zeros((0, model.config.latent_dim), np.float32)


@torch.no_grad()
def decode(model: LipAutoencoder, latents: np.ndarray) -> np.ndarray:
    model.eval()
    z = torch.from_numpy(np.asarray(latents, dtype=np.float32).reshape(-1, model.config.latent_dim))
    return model.decode(z).numpy().transpose(0, 2, 3, 1)


def save_ae(path, model: LipAutoencoder, history: list[float] | None = None, optimizer=None,
            extra: dict | None = None) -> None:
    core.save_checkpoint(path, model, optimizer,
                         preamble={"kind": "autoencoder", "config": model.config.to_dict()},
                         extra={"history": history or [], **(extra or {})})


def load_ae(path, with_optimizer: bool = False, lr: float = 1e-3):
    from . import tensorio

    _, meta = tensorio.load_bundle(path)
    if meta.get("preamble", {}).get("kind") != "autoencoder":
        raise ValueError(f"{path} is not an autoencoder checkpoint")
    model = LipAutoencoder(AeConfig(**meta["preamble"]["config"]))
    optimizer = core.make_adam(model.parameters(), lr=lr) if with_optimizer else None
    core.load_checkpoint(path, model, optimizer)
    model.eval()
    return (model, optimizer, meta) if with_optimizer else (model, meta)
