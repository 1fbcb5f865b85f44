"""Shared network building blocks.

Small conv stacks with GroupNorm + SiLU (smooth activations keep finite-
difference gradient checks clean), plus an explicit multi-head self-attention
implementation that exposes its attention weights for inspection.
"""

from __future__ import annotations

import torch
from torch import nn


def _norm3d(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(1, channels)


class ConvBlock3d(nn.Module):
    """conv3x3x3 -> GroupNorm -> SiLU, with stride for downsampling."""

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv3d(cin, cout, 3, stride=stride, padding=1)
        self.norm = _norm3d(cout)
        self.act = nn.SiLU()

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class ResBlock3d(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.norm1 = _norm3d(channels)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)
        self.norm2 = _norm3d(channels)
        self.act = nn.SiLU()

    def forward(self, x):
        h = self.act(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return self.act(x + h)


class GlobalStatPool3d(nn.Module):
    """Global pooling to per-channel (mean, std) over spatial dims.

    Produces a (B, 2C) vector regardless of spatial size. The second moment
    keeps texture/heterogeneity information that a plain spatial mean washes
    out; std uses a small epsilon inside the square root so gradients stay
    finite on constant (e.g. all-zero) channels.
    """

    eps = 1e-5

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        flat = x.reshape(x.shape[0], x.shape[1], -1)
        mean = flat.mean(dim=2)
        var = flat.var(dim=2, unbiased=False)
        return torch.cat([mean, torch.sqrt(var + self.eps)], dim=1)


class MultiScaleStatBackbone3d(nn.Module):
    """Residual 3D conv stages read out by multi-scale global stat pooling.

    The feature vector concatenates per-channel (mean, std) of the raw input
    and of every stage's output — a hypercolumn-style readout. Shallow-scale
    statistics carry global intensity/texture/geometry cues that survive
    distribution shift better than deep task-tuned channels, while the deep
    stats keep the discriminative detail. Output width is
    2 * (1 + sum(stage channels)), independent of spatial size.
    """

    def __init__(self, channels: tuple[int, ...], blocks_per_stage: int):
        super().__init__()
        stages = []
        cin = 1
        for cout in channels:
            blocks = [ConvBlock3d(cin, cout, stride=2)]
            blocks.extend(ResBlock3d(cout) for _ in range(blocks_per_stage))
            stages.append(nn.Sequential(*blocks))
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.pool = GlobalStatPool3d()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = [self.pool(x)]
        h = x
        for stage in self.stages:
            h = stage(h)
            feats.append(self.pool(h))
        return torch.cat(feats, dim=1)


class ConvBlock2d(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.norm = nn.GroupNorm(1, cout)
        self.act = nn.SiLU()

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class MultiHeadSelfAttention(nn.Module):
    """Standard scaled dot-product self-attention over a token sequence.

    ``forward`` returns the attended sequence and the attention weights
    (batch, heads, tokens, tokens); rows of the weight matrix sum to 1.
    With ``identity_hook`` the attention output is replaced by its input,
    which lets tests isolate the rest of the block.
    """

    def __init__(self, embed_dim: int, n_heads: int):
        super().__init__()
        if embed_dim % n_heads:
            raise ValueError(f"embed_dim {embed_dim} not divisible by heads {n_heads}")
        self.embed_dim = embed_dim
        self.n_heads = n_heads
        self.head_dim = embed_dim // n_heads
        self.qkv = nn.Linear(embed_dim, 3 * embed_dim)
        self.proj = nn.Linear(embed_dim, embed_dim)

    def forward(self, x: torch.Tensor, identity_hook: bool = False):
        b, n, e = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.n_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) / self.head_dim ** 0.5, dim=-1)
        if identity_hook:
            return x, attn
        out = (attn @ v).transpose(1, 2).reshape(b, n, e)
        return self.proj(out), attn


class TransformerBlock(nn.Module):
    """Pre-norm transformer encoder block: self-attention + feed-forward."""

    def __init__(self, embed_dim: int, n_heads: int, ff_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(embed_dim)
        self.attn = MultiHeadSelfAttention(embed_dim, n_heads)
        self.norm2 = nn.LayerNorm(embed_dim)
        self.ff = nn.Sequential(
            nn.Linear(embed_dim, ff_dim), nn.SiLU(), nn.Linear(ff_dim, embed_dim)
        )

    def forward(self, x: torch.Tensor, identity_hook: bool = False):
        attended, attn = self.attn(self.norm1(x), identity_hook=identity_hook)
        x = x + attended
        x = x + self.ff(self.norm2(x))
        return x, attn


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
