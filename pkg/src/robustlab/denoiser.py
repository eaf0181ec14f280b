"""Small convolutional denoiser in the residual DnCNN style.

The network predicts the noise map and subtracts it from the input by
default (``residual=True``); the wrapper always exposes the direct mapping
from noisy observation to clean estimate.  Batch normalization is off in
the desk-scale default to keep gradients through attacks simple; enable it
via the config for larger fidelity runs.
"""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .common import config_hash

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    depth: int = 7
    width: int = 64
    in_channels: int = 1
    residual: bool = True
    batch_norm: bool = False

    def __post_init__(self):
        if self.depth < 3:
            raise ValueError(f"depth must be >= 3, got {self.depth}")
        if self.width < 8:
            raise ValueError(f"width must be >= 8, got {self.width}")
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels}")


class Denoiser(nn.Module):
    """Conv stack mapping a noisy [B, C, H, W] batch to a clean estimate."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        layers: list[nn.Module] = [
            nn.Conv2d(config.in_channels, config.width, 3, padding=1),
            nn.ReLU(inplace=True),
        ]
        for _ in range(config.depth - 2):
            layers.append(nn.Conv2d(config.width, config.width, 3, padding=1, bias=not config.batch_norm))
            if config.batch_norm:
                layers.append(nn.BatchNorm2d(config.width))
            layers.append(nn.ReLU(inplace=True))
        layers.append(nn.Conv2d(config.width, config.in_channels, 3, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.dim() != 4:
            raise ValueError(f"expected [B, C, H, W] input, got shape {tuple(y.shape)}")
        if y.shape[1] != self.config.in_channels:
            raise ValueError(
                f"channel mismatch: model expects {self.config.in_channels}, got {y.shape[1]}"
            )
        out = self.body(y)
        return y - out if self.config.residual else out


def denoiser_forward(model: nn.Module, y: torch.Tensor) -> torch.Tensor:
    """Clean estimate for a noisy batch, without tracking gradients."""
    with torch.no_grad():
        return model(y)


def grad_wrt_input(model: nn.Module, loss_fn, y: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Gradient of loss_fn(model(y), target) with respect to the input y."""
    y = y.detach().requires_grad_(True)
    loss = loss_fn(model(y), target)
    (grad,) = torch.autograd.grad(loss, y)
    return grad


def save_checkpoint(path, model: Denoiser) -> None:
    """Write a versioned checkpoint: config echo, config hash, named weights."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "config_hash": config_hash(model.config),
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> Denoiser:
    """Load a checkpoint, validating version and config hash."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    config = DenoiserConfig(**payload["config"])
    if config_hash(config) != payload["config_hash"]:
        raise ValueError("checkpoint config hash mismatch; file corrupted or config schema drifted")
    model = Denoiser(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def checkpoint_bytes(model: Denoiser) -> bytes:
    """Checkpoint serialized to bytes; handy for hashing in determinism tests."""
    buf = io.BytesIO()
    save_checkpoint(buf, model)
    return buf.getvalue()
