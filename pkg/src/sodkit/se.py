"""Squeeze-and-Excitation channel attention.

Provides a functional API over single feature maps (squeeze / excite /
recalibrate / effective_capacity) plus an ``SELayer`` module for use inside
network blocks. Both share the same math: global average pooling produces a
per-channel descriptor, a two-layer gate (FC -> ReLU -> FC -> sigmoid) turns
it into scale factors in [0, 1], and each channel is multiplied by its factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


def hidden_width(channels: int, ratio: int) -> int:
    """Width of the gate bottleneck: max(1, round(C / ratio))."""
    if channels < 1 or ratio < 1:
        raise ValueError(f"channels and ratio must be >= 1, got {channels}, {ratio}")
    return max(1, round(channels / ratio))


@dataclass
class SEWeights:
    """Parameters of the two-layer excitation gate.

    w1: [hidden, C] squeeze-side weights, b1: [hidden] bias
    w2: [C, hidden] expand-side weights, b2: [C] bias
    ratio: bottleneck reduction ratio the shapes were derived from
    """

    w1: torch.Tensor
    b1: torch.Tensor
    w2: torch.Tensor
    b2: torch.Tensor
    ratio: int = 16

    @property
    def channels(self) -> int:
        return self.w2.shape[0]

    @staticmethod
    def init(channels: int, ratio: int = 16, dtype: torch.dtype = torch.float32,
             generator: torch.Generator | None = None) -> "SEWeights":
        """Uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] weights, zero biases."""
        hid = hidden_width(channels, ratio)

        def uniform(rows: int, cols: int) -> torch.Tensor:
            bound = cols ** -0.5
            w = torch.empty(rows, cols, dtype=dtype)
            w.uniform_(-bound, bound, generator=generator)
            return w

        return SEWeights(
            w1=uniform(hid, channels),
            b1=torch.zeros(hid, dtype=dtype),
            w2=uniform(channels, hid),
            b2=torch.zeros(channels, dtype=dtype),
            ratio=ratio,
        )

    def param_count(self) -> int:
        return sum(t.numel() for t in (self.w1, self.b1, self.w2, self.b2))


def _check_fmap(fmap: torch.Tensor) -> None:
    if fmap.ndim != 3:
        raise ValueError(f"feature map must be rank-3 [C,H,W], got shape {tuple(fmap.shape)}")
    c, h, w = fmap.shape
    if c < 1 or h < 1 or w < 1:
        raise ValueError(f"feature map dims must all be >= 1, got {tuple(fmap.shape)}")


def squeeze(fmap: torch.Tensor) -> torch.Tensor:
    """Global average pooling: [C,H,W] -> per-channel means [C]."""
    _check_fmap(fmap)
    return fmap.mean(dim=(1, 2))


def excite(desc: torch.Tensor, weights: SEWeights) -> torch.Tensor:
    """Two-layer gate: sigmoid(w2 @ relu(w1 @ s + b1) + b2), entries in [0, 1]."""
    if desc.ndim != 1:
        raise ValueError(f"channel descriptor must be rank-1, got shape {tuple(desc.shape)}")
    if desc.shape[0] != weights.w1.shape[1]:
        raise ValueError(
            f"descriptor/weight mismatch: expected {weights.w1.shape[1]} channels "
            f"(w1 is {tuple(weights.w1.shape)}), got {desc.shape[0]}"
        )
    hidden = F.relu(weights.w1 @ desc + weights.b1)
    return torch.sigmoid(weights.w2 @ hidden + weights.b2)


def recalibrate(fmap: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """Per-channel rescaling: out[c,h,w] = scale[c] * fmap[c,h,w]."""
    _check_fmap(fmap)
    if scale.ndim != 1 or scale.shape[0] != fmap.shape[0]:
        raise ValueError(
            f"scale length {tuple(scale.shape)} does not match {fmap.shape[0]} channels"
        )
    return fmap * scale[:, None, None]


def se_apply(fmap: torch.Tensor, weights: SEWeights) -> torch.Tensor:
    """Full SE operator: squeeze -> excite -> recalibrate."""
    return recalibrate(fmap, excite(squeeze(fmap), weights))


def effective_capacity(scale: torch.Tensor) -> float:
    """Sum of the channel scale factors.

    Uniform gates (all ones) give C, the capacity of an unattended block;
    learned gates redistribute the same budget across channels.
    """
    if scale.ndim != 1:
        raise ValueError(f"scale vector must be rank-1, got shape {tuple(scale.shape)}")
    if not torch.isfinite(scale).all():
        raise ValueError("scale vector contains non-finite entries")
    return float(scale.sum().item())


class SELayer(nn.Module):
    """Squeeze-and-Excitation layer for batched [B,C,H,W] tensors.

    Args:
        channels: number of input channels.
        ratio: bottleneck reduction ratio (hidden width = max(1, round(C/ratio))).
    """

    def __init__(self, channels: int, ratio: int = 16) -> None:
        super().__init__()
        hid = hidden_width(channels, ratio)
        self.channels = channels
        self.ratio = ratio
        self.fc1 = nn.Linear(channels, hid)
        self.fc2 = nn.Linear(hid, channels)
        nn.init.zeros_(self.fc1.bias)
        nn.init.zeros_(self.fc2.bias)

    def gates(self, x: torch.Tensor) -> torch.Tensor:
        """Scale factors for a batch: [B,C,H,W] -> [B,C]."""
        s = x.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(s))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        return x * self.gates(x)[:, :, None, None]

    def weights_view(self) -> SEWeights:
        """The layer's parameters as functional SEWeights (shared storage)."""
        return SEWeights(
            w1=self.fc1.weight, b1=self.fc1.bias,
            w2=self.fc2.weight, b2=self.fc2.bias,
            ratio=self.ratio,
        )


def se_param_count(channels: int, ratio: int = 16) -> int:
    """Analytic parameter count of one SE gate: 2*C*hid + hid + C."""
    hid = hidden_width(channels, ratio)
    return 2 * channels * hid + hid + channels
