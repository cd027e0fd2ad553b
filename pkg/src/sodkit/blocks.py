"""Building blocks for the GELAN-family detectors.

Conv/pool primitives, the RepNCSPELAN4 aggregation module (split two ways,
transform each half, concatenate, project), its SE-gated variant, a compact
ViT encoder, and the transformer-augmented aggregation module. Aggregation
blocks can emit an op-order trace of their forward pass for wiring checks.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .se import SELayer

# Active trace sink; blocks append (block_label, op_name) while set.
_TRACE: list[tuple[str, str]] | None = None


@contextmanager
def capture_trace():
    """Collect (block, op) events from every traced forward inside the block."""
    global _TRACE
    prev, _TRACE = _TRACE, []
    try:
        yield _TRACE
    finally:
        _TRACE = prev


def _trace(block: str, op: str) -> None:
    if _TRACE is not None:
        _TRACE.append((block, op))


def autopad(kernel: int) -> int:
    return kernel // 2


class ConvBlock(nn.Module):
    """Conv2d -> BatchNorm -> SiLU. Norm and activation are optional."""

    def __init__(self, c1: int, c2: int, k: int = 1, s: int = 1, groups: int = 1,
                 norm: bool = True, act: bool = True) -> None:
        super().__init__()
        self.conv = nn.Conv2d(c1, c2, k, s, autopad(k), groups=groups, bias=not norm)
        self.bn = nn.BatchNorm2d(c2) if norm else nn.Identity()
        self.act = nn.SiLU() if act else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.conv.in_channels:
            raise ValueError(
                f"expected {self.conv.in_channels} input channels, got {x.shape[1]}"
            )
        return self.act(self.bn(self.conv(x)))


class AConv(nn.Module):
    """Downsampling: 2x2 stride-1 average pool followed by a 3x3 stride-2 conv."""

    def __init__(self, c1: int, c2: int) -> None:
        super().__init__()
        self.cv1 = ConvBlock(c1, c2, 3, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.avg_pool2d(x, 2, 1, 0, False, True)
        return self.cv1(x)


class SPPELAN(nn.Module):
    """Spatial pyramid pooling: 1x1 reduce, three chained 5x5 max pools, concat, 1x1."""

    def __init__(self, c1: int, c2: int, c3: int) -> None:
        super().__init__()
        self.cv1 = ConvBlock(c1, c3, 1)
        self.cv5 = ConvBlock(4 * c3, c2, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = [self.cv1(x)]
        for _ in range(3):
            y.append(F.max_pool2d(y[-1], 5, 1, 2))
        return self.cv5(torch.cat(y, 1))


class RepConvN(nn.Module):
    """Training-form re-parameterizable conv: parallel 3x3 and 1x1 branches, summed."""

    def __init__(self, c1: int, c2: int) -> None:
        super().__init__()
        self.conv1 = ConvBlock(c1, c2, 3, act=False)
        self.conv2 = ConvBlock(c1, c2, 1, act=False)
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.conv1(x) + self.conv2(x))


class RepNBottleneck(nn.Module):
    def __init__(self, c1: int, c2: int) -> None:
        super().__init__()
        self.cv1 = RepConvN(c1, c2)
        self.cv2 = ConvBlock(c2, c2, 3)
        self.add = c1 == c2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.cv2(self.cv1(x))
        return x + y if self.add else y


class RepNCSP(nn.Module):
    """CSP stage: two 1x1 reduces, a bottleneck stack on one path, 1x1 merge."""

    def __init__(self, c1: int, c2: int, n: int = 1) -> None:
        super().__init__()
        c_ = c2 // 2
        self.cv1 = ConvBlock(c1, c_, 1)
        self.cv2 = ConvBlock(c1, c_, 1)
        self.cv3 = ConvBlock(2 * c_, c2, 1)
        self.m = nn.Sequential(*(RepNBottleneck(c_, c_) for _ in range(n)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.cv3(torch.cat((self.m(self.cv1(x)), self.cv2(x)), 1))


def _branch(c_in: int, c_out: int, depth: int) -> nn.Module:
    """Aggregation branch: plain 3x3 conv at depth 0, RepNCSP stack + 3x3 above."""
    if depth == 0:
        return ConvBlock(c_in, c_out, 3)
    return nn.Sequential(RepNCSP(c_in, c_out, depth), ConvBlock(c_out, c_out, 3))


@dataclass
class ViTSpec:
    """Compact ViT encoder configuration."""

    patch_size: int = 2
    embed_dim: int = 64
    depth: int = 1
    num_heads: int = 2
    mlp_ratio: float = 4.0

    def __post_init__(self) -> None:
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int) -> None:
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def attn_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Softmax attention matrix [B, heads, N, N]; rows sum to 1."""
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, d // self.num_heads)
        q, k, _ = qkv.permute(2, 0, 3, 1, 4)
        return ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, d // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class TransformerBlock(nn.Module):
    """Pre-norm multi-head self-attention + MLP, both with residuals."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float) -> None:
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ViTEncoder(nn.Module):
    """Patchify -> embed (+learned position) -> transformer blocks -> unembed.

    Output is a feature map with ``c_out`` channels at 1/patch_size resolution.
    Input spatial dims must be divisible by the patch size; the token count is
    fixed at construction from ``input_hw``.
    """

    def __init__(self, c_in: int, c_out: int, spec: ViTSpec, input_hw: tuple[int, int]) -> None:
        super().__init__()
        h, w = input_hw
        p = spec.patch_size
        if h % p or w % p:
            raise ValueError(f"input {h}x{w} not divisible by patch size {p}")
        self.spec = spec
        self.grid = (h // p, w // p)
        self.patch = nn.Conv2d(c_in, spec.embed_dim, p, p)
        self.pos = nn.Parameter(torch.zeros(1, self.grid[0] * self.grid[1], spec.embed_dim))
        self.blocks = nn.Sequential(
            *(TransformerBlock(spec.embed_dim, spec.num_heads, spec.mlp_ratio)
              for _ in range(spec.depth))
        )
        self.norm = nn.LayerNorm(spec.embed_dim)
        self.unembed = nn.Linear(spec.embed_dim, c_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        gh, gw = self.grid
        if x.shape[-2] != gh * self.spec.patch_size or x.shape[-1] != gw * self.spec.patch_size:
            raise ValueError(
                f"expected {gh * self.spec.patch_size}x{gw * self.spec.patch_size} input, "
                f"got {x.shape[-2]}x{x.shape[-1]}"
            )
        tokens = self.patch(x).flatten(2).transpose(1, 2) + self.pos
        tokens = self.norm(self.blocks(tokens))
        out = self.unembed(tokens)
        return out.transpose(1, 2).reshape(x.shape[0], -1, gh, gw)


@dataclass
class ElanBlockSpec:
    """RepNCSPELAN4 configuration.

    mid_channels is the cv1 output, split into two equal halves; each half is
    transformed to branch_channels. Concat width = mid + 2 * branch.
    """

    in_channels: int
    mid_channels: int
    out_channels: int
    branch_channels: int = 0
    depth: int = 1
    use_se: bool = False
    se_ratio: int = 16
    vit: ViTSpec | None = None
    vit_input_hw: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.mid_channels % 2:
            raise ValueError(f"mid_channels must be even, got {self.mid_channels}")
        if self.branch_channels == 0:
            self.branch_channels = self.mid_channels // 2

    @property
    def concat_channels(self) -> int:
        return self.mid_channels + 2 * self.branch_channels


class RepNCSPELAN4(nn.Module):
    """Split-transform-concat aggregation block.

    cv1 projects to mid channels, the result splits into two halves, cv2 and
    cv3 transform the halves in parallel, all four tensors concatenate, and
    cv4 projects to the output width. With use_se an SE gate recalibrates the
    concatenated tensor before cv4. With a vit spec, a single-block
    transformer refines the second branch before concatenation.
    """

    def __init__(self, spec: ElanBlockSpec, label: str = "elan") -> None:
        super().__init__()
        half = spec.mid_channels // 2
        self.spec = spec
        self.label = label
        self.cv1 = ConvBlock(spec.in_channels, spec.mid_channels, 1)
        self.cv2 = _branch(half, spec.branch_channels, spec.depth)
        self.cv3 = _branch(half, spec.branch_channels, spec.depth)
        if spec.vit is not None:
            hw = spec.vit_input_hw
            if hw is None:
                raise ValueError("vit_input_hw is required when a vit spec is set")
            self.vit = ViTEncoder(spec.branch_channels, spec.branch_channels, spec.vit, hw)
            self.vit_up = spec.vit.patch_size
        else:
            self.vit = None
            self.vit_up = 1
        self.se = SELayer(spec.concat_channels, spec.se_ratio) if spec.use_se else None
        self.cv4 = ConvBlock(spec.concat_channels, spec.out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _trace(self.label, "cv1")
        y = self.cv1(x)
        _trace(self.label, "split")
        x0, x1 = y.chunk(2, dim=1)
        _trace(self.label, "cv2")
        x0p = self.cv2(x0)
        _trace(self.label, "cv3")
        x1p = self.cv3(x1)
        if self.vit is not None:
            _trace(self.label, "vit")
            x1p = self.vit(x1p)
            if self.vit_up > 1:
                x1p = F.interpolate(x1p, scale_factor=self.vit_up, mode="nearest")
        _trace(self.label, "concat")
        cat = torch.cat((x0, x1, x0p, x1p), dim=1)
        if self.se is not None:
            _trace(self.label, "se")
            cat = self.se(cat)
        _trace(self.label, "cv4")
        return self.cv4(cat)


def transformer_param_count(dim: int, num_heads: int, mlp_ratio: float, depth: int) -> int:
    """Analytic parameter count of ``depth`` transformer blocks (no embeddings)."""
    hidden = int(dim * mlp_ratio)
    per_block = (
        2 * dim              # norm1
        + 3 * dim * dim + 3 * dim  # qkv
        + dim * dim + dim    # attn proj
        + 2 * dim            # norm2
        + dim * hidden + hidden + hidden * dim + dim  # mlp
    )
    return depth * per_block


def vit_encoder_param_count(c_in: int, c_out: int, spec: ViTSpec,
                            input_hw: tuple[int, int]) -> int:
    """Analytic parameter count of a full ViTEncoder."""
    d = spec.embed_dim
    tokens = (input_hw[0] // spec.patch_size) * (input_hw[1] // spec.patch_size)
    return (
        c_in * spec.patch_size ** 2 * d + d   # patch conv
        + tokens * d                          # position table
        + transformer_param_count(d, spec.num_heads, spec.mlp_ratio, spec.depth)
        + 2 * d                               # final norm
        + d * c_out + c_out                   # unembed
    )
