"""Layer set, loss, optimiser and checkpoints for the enhancement models.

Backed by PyTorch (CPU).  Parameters are stored in float32; gradient checks
run the same layers in float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import tensorio

DEFAULT_LR = 5e-5
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    def __init__(self, what: str, got, expected):
        super().__init__(f"{what}: got shape {tuple(got)}, expected {tuple(expected)}")
        self.got = tuple(got)
        self.expected = tuple(expected)


class NumericalError(RuntimeError):
    pass


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one layer; ``output_shape`` excludes the batch axis."""

    kind: str
    params: dict = field(default_factory=dict)

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        p = self.params
        if self.kind in ("conv2d", "maxpool2d"):
            c, h, w = input_shape
            if self.kind == "conv2d" and c != p["in_channels"]:
                raise ShapeError("conv2d input channels", input_shape, (p["in_channels"], h, w))
            k = _pair(p["kernel"])
            s = _pair(p.get("stride", 1 if self.kind == "conv2d" else k))
            pad = _pair(p.get("padding", 0))
            oh = (h + 2 * pad[0] - k[0]) // s[0] + 1
            ow = (w + 2 * pad[1] - k[1]) // s[1] + 1
            if oh < 1 or ow < 1:
                raise ShapeError(f"{self.kind} input too small", input_shape, (c, k[0], k[1]))
            return (p["out_channels"] if self.kind == "conv2d" else c, oh, ow)
        if self.kind == "linear":
            if input_shape[-1] != p["in_features"]:
                raise ShapeError("linear input", input_shape, (*input_shape[:-1], p["in_features"]))
            return (*input_shape[:-1], p["out_features"])
        if self.kind == "lstm":
            t, d = input_shape
            if d != p["input_size"]:
                raise ShapeError("lstm input", input_shape, (t, p["input_size"]))
            return (t, p["hidden_size"] * (2 if p.get("bidirectional") else 1))
        raise ValueError(f"unknown layer kind {self.kind!r}")

    def build(self) -> nn.Module:
        p = self.params
        if self.kind == "conv2d":
            return nn.Conv2d(p["in_channels"], p["out_channels"], _pair(p["kernel"]),
                             stride=_pair(p.get("stride", 1)), padding=_pair(p.get("padding", 0)))
        if self.kind == "maxpool2d":
            k = _pair(p["kernel"])
            return nn.MaxPool2d(k, stride=_pair(p.get("stride", k)), padding=_pair(p.get("padding", 0)))
        if self.kind == "linear":
            return nn.Linear(p["in_features"], p["out_features"])
        if self.kind == "lstm":
            return nn.LSTM(p["input_size"], p["hidden_size"], batch_first=True,
                           bidirectional=bool(p.get("bidirectional", False)))
        raise ValueError(f"unknown layer kind {self.kind!r}")


def forward(layer: nn.Module, x: torch.Tensor) -> torch.Tensor:
    out = layer(x)
    return out[0] if isinstance(layer, nn.LSTM) else out


def backward(layer: nn.Module, x: torch.Tensor, upstream: torch.Tensor):
    """Vector-Jacobian product of one layer.

    Returns ``(input_grad, {param_name: grad})`` for ``sum(upstream * layer(x))``.
    """
    x = x.detach().requires_grad_(True)
    out = forward(layer, x)
    if out.shape != upstream.shape:
        raise ShapeError("upstream gradient", upstream.shape, out.shape)
    params = dict(layer.named_parameters())
    grads = torch.autograd.grad(out, [x, *params.values()], upstream, allow_unused=True)
    param_grads = {n: (g if g is not None else torch.zeros_like(p))
                   for (n, p), g in zip(params.items(), grads[1:])}
    return grads[0], param_grads


def mse(prediction: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error over all elements (optionally over masked frames only).

    ``mask`` has the prediction's leading shape; trailing axes are averaged.
    """
    if prediction.shape != target.shape:
        raise ShapeError("mse target", target.shape, prediction.shape)
    sq = (prediction - target) ** 2
    if mask is None:
        return sq.mean()
    mask = mask.to(sq.dtype)
    per_frame = sq.reshape(*mask.shape, -1).mean(-1)
    return (per_frame * mask).sum() / mask.sum().clamp_min(1.0)


def make_adam(params, lr: float = DEFAULT_LR, betas=(0.9, 0.999), eps: float = 1e-8) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=betas, eps=eps)


def adam_step(params, grads, state: torch.optim.Adam) -> None:
    """Apply one Adam update with explicitly supplied gradients."""
    params = list(params)
    owned = {id(p) for g in state.param_groups for p in g["params"]}
    for p, g in zip(params, grads, strict=True):
        if id(p) not in owned:
            raise ValueError("parameter is not registered with this optimiser state")
        if p.shape != g.shape:
            raise ShapeError("gradient", g.shape, p.shape)
        p.grad = g.detach().to(p.dtype).clone()
    state.step()


def check_finite(value: torch.Tensor, what: str) -> None:
    if not torch.isfinite(value).all():
        raise NumericalError(f"non-finite values in {what}")


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def save_checkpoint(path, model: nn.Module, optimizer: torch.optim.Optimizer | None = None,
                    preamble: dict | None = None, extra: dict | None = None) -> None:
    """Write parameters (+ optimiser moments) as a tensor bundle.

    The JSON header records a layer registry (name -> shape), the caller's
    ``preamble`` (model config) and ``extra`` (epoch, loss log ...).
    """
    tensors = {f"param/{n}": t.detach().cpu().numpy() for n, t in model.state_dict().items()}
    meta = {"version": CHECKPOINT_VERSION, "preamble": preamble or {}, "extra": extra or {},
            "registry": {n: list(t.shape) for n, t in model.state_dict().items()}}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        opt_meta = {"groups": [], "steps": {}}
        for group in optimizer.param_groups:
            opt_meta["groups"].append({k: v for k, v in group.items() if k != "params"})
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                n = names[id(p)]
                opt_meta["steps"][n] = float(st["step"])
                tensors[f"adam/{n}/exp_avg"] = st["exp_avg"].cpu().numpy()
                tensors[f"adam/{n}/exp_avg_sq"] = st["exp_avg_sq"].cpu().numpy()
        meta["optimizer"] = opt_meta
    tensorio.save_bundle(path, tensors, meta)


def load_checkpoint(path, model: nn.Module, optimizer: torch.optim.Optimizer | None = None) -> dict:
    """Restore parameters (and optimiser state) in place; returns the header meta."""
    tensors, meta = tensorio.load_bundle(Path(path))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise tensorio.FormatError(f"unsupported checkpoint version {meta.get('version')}")
    state = model.state_dict()
    if set(meta["registry"]) != set(state):
        raise ValueError(f"checkpoint layers {sorted(meta['registry'])} do not match model {sorted(state)}")
    for n, t in state.items():
        saved = tensors[f"param/{n}"]
        if tuple(saved.shape) != tuple(t.shape):
            raise ShapeError(f"checkpoint parameter {n}", saved.shape, t.shape)
    model.load_state_dict({n: torch.from_numpy(tensors[f"param/{n}"]) for n in state})
    if optimizer is not None and "optimizer" in meta:
        opt_meta = meta["optimizer"]
        params = dict(model.named_parameters())
        for group, saved in zip(optimizer.param_groups, opt_meta["groups"]):
            group.update({k: tuple(v) if isinstance(v, list) else v for k, v in saved.items()})
        for n, step in opt_meta["steps"].items():
            p = params[n]
            optimizer.state[p] = {
                "step": torch.tensor(step),
                "exp_avg": torch.from_numpy(tensors[f"adam/{n}/exp_avg"]).clone(),
                "exp_avg_sq": torch.from_numpy(tensors[f"adam/{n}/exp_avg_sq"]).clone(),
            }
    return meta


def kaiming_uniform_(module: nn.Module, generator: torch.Generator, gain: float = 1.0) -> None:
    """Seeded fan-in uniform initialisation; biases start at zero."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            if p.dim() >= 2:
                fan_in = p.shape[1] * (math.prod(p.shape[2:]) if p.dim() > 2 else 1)
                bound = gain * math.sqrt(3.0 / fan_in)
                p.uniform_(-bound, bound, generator=generator)
            else:
                p.zero_()


def to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()
