"""Channel-wise importance-based feature selection.

A modified layer scores each channel by the gradient of the sum of its
probe's top-k logits with respect to a channel-uniform perturbation, maps
the scores monotonically to non-negative importance multipliers, and scales
the channels.  Each layer's probe is a small surrogate classifier trained
jointly with the backbone, so relevance never back-propagates through other
modified layers.  Gradients DO flow through the mask-generation path: the
mask is itself a gradient, so training and attackers see the true
second-order computation graph of a single layer.

During training the top-1 index is replaced by the true label before
summing (duplicates collapse, so a logit is never counted twice).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

IMGF_KINDS = ("sigmoid", "softplus", "softmax")

#: Sharpness defaults per mask function; sigmoid acts as a near-switch.
DEFAULT_ALPHA = {"sigmoid": 10.0, "softplus": 5.0}


@dataclass(frozen=True)
class CifsConfig:
    k: int = 2
    imgf: str = "softmax"
    alpha: float | None = None
    temperature: float = 1.0
    beta: float | None = None
    positions: tuple = (7, 8)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.imgf not in IMGF_KINDS:
            raise ValueError(f"unknown mask function {self.imgf!r}; expected one of {IMGF_KINDS}")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.beta is not None and self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")

    @property
    def resolved_alpha(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return DEFAULT_ALPHA.get(self.imgf, 1.0)


def _pool_channels(z: torch.Tensor) -> torch.Tensor:
    """Global average over feature positions: [B, C, ...] -> [B, C]."""
    if z.dim() < 2:
        raise ValueError(f"expected at least [B, C] features, got shape {tuple(z.shape)}")
    if z.dim() == 2:
        return z
    return z.mean(dim=tuple(range(2, z.dim())))


class LinearProbe(nn.Module):
    """Global-average-pool followed by an affine map to class logits."""

    def __init__(self, channels: int, num_classes: int):
        super().__init__()
        self.channels = channels
        self.fc = nn.Linear(channels, num_classes)

    def forward(self, z):
        pooled = _pool_channels(z)
        if pooled.shape[1] != self.channels:
            raise ValueError(f"probe expects {self.channels} channels, got {pooled.shape[1]}")
        return self.fc(pooled)


class MlpProbe(nn.Module):
    """Pool, hidden layer, affine map; for layers that are not linearly separable."""

    def __init__(self, channels: int, num_classes: int, hidden: int | None = None):
        super().__init__()
        self.channels = channels
        hidden = hidden or channels
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, num_classes)

    def forward(self, z):
        pooled = _pool_channels(z)
        if pooled.shape[1] != self.channels:
            raise ValueError(f"probe expects {self.channels} channels, got {pooled.shape[1]}")
        return self.fc2(torch.relu(self.fc1(pooled)))


def probe_forward(probe: nn.Module, z_l: torch.Tensor) -> torch.Tensor:
    """Raw prediction logits for intermediate features."""
    return probe(z_l)


def _selected_logit_mask(logits: torch.Tensor, k: int, true_label) -> torch.Tensor:
    """Boolean [B, K] mask of the top-k logit indices per sample.

    With a true label given, the top-1 slot is replaced by the label; mask
    semantics make an already-selected label a no-op rather than a double
    count.
    """
    num_classes = logits.shape[1]
    if k > num_classes:
        raise ValueError(f"k={k} exceeds number of classes {num_classes}")
    topk = logits.detach().topk(k, dim=1).indices
    if true_label is not None:
        label = torch.as_tensor(true_label, device=logits.device, dtype=torch.long)
        if label.dim() == 0:
            label = label.expand(logits.shape[0])
        topk = topk.clone()
        topk[:, 0] = label
    mask = torch.zeros_like(logits, dtype=torch.bool)
    mask.scatter_(1, topk, True)
    return mask


def assess_relevance(
    probe: nn.Module,
    z_l: torch.Tensor,
    k: int,
    true_label=None,
    create_graph: bool | None = None,
) -> torch.Tensor:
    """Channel relevances: gradient of the summed top-k logits w.r.t. a
    channel-uniform perturbation, evaluated at zero.

    Returns [B, n_C].  ``create_graph`` defaults to the grad-enabled state
    so that training and input-gradient attacks differentiate through the
    relevance itself too.
    """
    if create_graph is None:
        create_graph = torch.is_grad_enabled()
    with torch.enable_grad():
        b, c = z_l.shape[0], z_l.shape[1]
        delta = torch.zeros(b, c, dtype=z_l.dtype, device=z_l.device, requires_grad=True)
        z_pert = z_l + delta.reshape(b, c, *([1] * (z_l.dim() - 2)))
        logits = probe(z_pert)
        mask = _selected_logit_mask(logits, k, true_label)
        selected_sum = logits.masked_fill(~mask, 0.0).sum()
        (g,) = torch.autograd.grad(selected_sum, delta, create_graph=create_graph)
    return g


def imgf(config: CifsConfig, g: torch.Tensor) -> torch.Tensor:
    """Map relevances monotonically to non-negative importance scores."""
    if not torch.isfinite(g).all():
        raise ValueError("relevance vector contains non-finite entries")
    if config.imgf == "sigmoid":
        return torch.sigmoid(config.resolved_alpha * g)
    if config.imgf == "softplus":
        return F.softplus(g, beta=config.resolved_alpha)
    return torch.softmax(g / config.temperature, dim=-1)


def apply_mask(z_l: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Scale each channel by its importance score."""
    if mask.dim() == 1:
        mask = mask[None]
    if mask.shape[-1] != z_l.shape[1]:
        raise ValueError(f"mask length {mask.shape[-1]} != channel count {z_l.shape[1]}")
    return z_l * mask.reshape(mask.shape[0], mask.shape[1], *([1] * (z_l.dim() - 2)))


def cifs_layer_forward(config: CifsConfig, probe: nn.Module, z_l: torch.Tensor, true_label=None):
    """Select channels and return (masked features, the probe's raw logits)."""
    logits = probe_forward(probe, z_l)
    g = assess_relevance(probe, z_l, config.k, true_label)
    mask = imgf(config, g)
    return apply_mask(z_l, mask), logits


class CifsLayer(nn.Module):
    """Module wrapper binding a config and probe to the selection step."""

    def __init__(self, config: CifsConfig, probe: nn.Module):
        super().__init__()
        self.config = config
        self.probe = probe

    def forward(self, z_l, true_label=None):
        return cifs_layer_forward(self.config, self.probe, z_l, true_label)


def channel_activation_stats(features_batch: torch.Tensor, threshold_frac: float = 0.01):
    """Per-channel normalized mean magnitudes and activation frequencies.

    Features are pooled to [B, C] magnitudes; means are normalized by their
    maximum (0/0 guarded to 0) and a channel counts as activated in a
    sample when its magnitude exceeds threshold_frac times the batch-wide
    maximum.
    """
    if features_batch.shape[0] == 0:
        raise ValueError("activation stats of an empty batch are undefined")
    mags = _pool_channels(features_batch.detach()).abs()
    means = mags.mean(dim=0)
    peak = means.max()
    norm_means = means / peak if peak > 0 else torch.zeros_like(means)
    global_max = mags.max()
    threshold = threshold_frac * global_max
    freq = (mags > threshold).double().mean(dim=0) if global_max > 0 else torch.zeros_like(means)
    return norm_means, freq


def channel_diagnostics_csv(path, class_weights, natural_stats, adversarial_stats) -> None:
    """Write the per-channel comparison table used for activation plots.

    Rows: channel index, rank of the channel when the classifier weights
    for the inspected class are sorted descending, then natural/adversarial
    mean magnitudes and frequencies.
    """
    w = np.asarray(class_weights, dtype=np.float64)
    order = np.argsort(-w)
    rank = np.empty_like(order)
    rank[order] = np.arange(w.size)
    nat_m, nat_f = (np.asarray(t, dtype=np.float64) for t in natural_stats)
    adv_m, adv_f = (np.asarray(t, dtype=np.float64) for t in adversarial_stats)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([
            "channel", "weight_rank",
            "mean_magnitude_natural", "mean_magnitude_adversarial",
            "frequency_natural", "frequency_adversarial",
        ])
        for c in range(w.size):
            writer.writerow([
                c, int(rank[c]),
                repr(float(nat_m[c])), repr(float(adv_m[c])),
                repr(float(nat_f[c])), repr(float(adv_f[c])),
            ])


# ---------------------------------------------------------------------------
# Slim residual network with optional CIFS layers
# ---------------------------------------------------------------------------


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm2d(out_ch)
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        h = torch.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return torch.relu(h + self.shortcut(x))


class SlimResNet(nn.Module):
    """Residual classifier at reduced width, optionally CIFS-modified.

    Eight basic blocks in four stages (an 18-layer layout at configurable
    widths).  With a CifsConfig the blocks named by ``config.positions``
    (1-based over the flattened block list, default the last two) are
    followed by selection layers; the probe on the final block is linear,
    earlier probes are two-layer MLPs.  Forward returns
    (final logits, [probe logits...]), the probe list empty when unmodified.
    """

    def __init__(
        self,
        widths: tuple = (32, 64, 128, 256),
        in_channels: int = 3,
        num_classes: int = 10,
        cifs: CifsConfig | None = None,
    ):
        super().__init__()
        self.widths = tuple(widths)
        self.cifs_config = cifs
        self.conv1 = nn.Conv2d(in_channels, widths[0], 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(widths[0])
        blocks = []
        block_channels = []
        in_ch = widths[0]
        for stage, w in enumerate(widths):
            for j in range(2):
                stride = 2 if (stage > 0 and j == 0) else 1
                blocks.append(BasicBlock(in_ch, w, stride))
                block_channels.append(w)
                in_ch = w
        self.blocks = nn.ModuleList(blocks)
        self.fc = nn.Linear(widths[-1], num_classes)

        self.cifs_layers = nn.ModuleDict()
        if cifs is not None:
            last = len(blocks)
            for pos in cifs.positions:
                if not 1 <= pos <= last:
                    raise ValueError(f"CIFS position {pos} outside 1..{last}")
                ch = block_channels[pos - 1]
                probe = LinearProbe(ch, num_classes) if pos == last else MlpProbe(ch, num_classes)
                self.cifs_layers[str(pos)] = CifsLayer(cifs, probe)

    @property
    def num_probes(self) -> int:
        return len(self.cifs_layers)

    def forward(self, x, true_label=None):
        h = torch.relu(self.bn1(self.conv1(x)))
        probe_logits = []
        for idx, block in enumerate(self.blocks, start=1):
            h = block(h)
            if str(idx) in self.cifs_layers:
                h, p = self.cifs_layers[str(idx)](h, true_label)
                probe_logits.append(p)
        return self.fc(h.mean(dim=(2, 3))), probe_logits

    def penultimate_features(self, x):
        """Feature map entering the final pooling; used for diagnostics."""
        h = torch.relu(self.bn1(self.conv1(x)))
        for idx, block in enumerate(self.blocks, start=1):
            h = block(h)
            if str(idx) in self.cifs_layers:
                h, _ = self.cifs_layers[str(idx)](h)
        return h
