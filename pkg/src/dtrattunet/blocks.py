"""Reusable computational blocks: residual conv blocks, attention gate,
patch embedding, token reshaping, and the transformer layer.

Feature maps are ``(batch, channels, height, width)`` tensors, token
sequences are ``(batch, tokens, embed_dim)``. Every block is a pure
function of (input, parameters); the only shared mutable state is the
batch-norm running statistics touched by training-mode forward passes.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError


def _require_finite(name: str, t: torch.Tensor) -> None:
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} contains NaN or Inf values")


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    """Bilinear x2 upsampling, corners not aligned (fixed for checkpoint portability)."""
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def tokens_to_map(z: torch.Tensor) -> torch.Tensor:
    """Reshape ``(B, N, K)`` tokens to a ``(B, K, sqrt(N), sqrt(N))`` map.

    Requires N to be a perfect square; the inverse is `map_to_tokens` and the
    round trip is bit-exact.
    """
    b, n, k = z.shape
    side = math.isqrt(n)
    if side * side != n:
        raise ValueError(f"token count {n} is not a perfect square")
    return z.transpose(1, 2).reshape(b, k, side, side)


def map_to_tokens(x: torch.Tensor) -> torch.Tensor:
    """Inverse of `tokens_to_map`."""
    b, k, h, w = x.shape
    return x.reshape(b, k, h * w).transpose(1, 2)


def _init_conv(conv: nn.Conv2d) -> None:
    nn.init.kaiming_normal_(conv.weight, mode="fan_out", nonlinearity="relu")
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)


class ResBlock(nn.Module):
    """Two 3x3 conv+BN+ReLU stages summed with a 1x1 conv+BN+ReLU shortcut.

    Both branches end in a ReLU, so the output is elementwise >= 0.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        if out_channels < 1:
            raise ConfigError("out_channels must be >= 1")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels, eps=1e-5, momentum=0.1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels, eps=1e-5, momentum=0.1)
        self.shortcut_conv = nn.Conv2d(in_channels, out_channels, 1, bias=False)
        self.shortcut_bn = nn.BatchNorm2d(out_channels, eps=1e-5, momentum=0.1)
        for conv in (self.conv1, self.conv2, self.shortcut_conv):
            _init_conv(conv)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _require_finite("ResBlock input", x)
        main = F.relu(self.bn1(self.conv1(x)))
        main = F.relu(self.bn2(self.conv2(main)))
        shortcut = F.relu(self.shortcut_bn(self.shortcut_conv(x)))
        return main + shortcut


class UpResBlock(nn.Module):
    """Bilinear x2 upsampling followed by a ResBlock."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.block = ResBlock(in_channels, out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(upsample2x(x))


class AttentionGate(nn.Module):
    """Per-pixel (0, 1) coefficient from skip and gating features.

    The skip and gating maps are each projected to an intermediate width by a
    1x1 conv + BN, summed, passed through ReLU, and reduced to a single-channel
    score whose sigmoid multiplicatively reweights every channel of the skip.

    Args:
        skip_channels: channels of the encoder skip map ``x``.
        gate_channels: channels of the gating signal ``g`` (already upsampled
            by the caller to match ``x`` spatially).
        inter_channels: intermediate width; defaults to half the skip width.
    """

    def __init__(self, skip_channels: int, gate_channels: int, inter_channels: int | None = None):
        super().__init__()
        inter = max(skip_channels // 2, 1) if inter_channels is None else inter_channels
        self.skip_transform = nn.Conv2d(skip_channels, inter, 1, bias=True)
        self.skip_norm = nn.BatchNorm2d(inter, eps=1e-5, momentum=0.1)
        self.gate_transform = nn.Conv2d(gate_channels, inter, 1, bias=True)
        self.gate_norm = nn.BatchNorm2d(inter, eps=1e-5, momentum=0.1)
        self.score_conv = nn.Conv2d(inter, 1, 1, bias=True)
        self.score_norm = nn.BatchNorm2d(1, eps=1e-5, momentum=0.1)
        for conv in (self.skip_transform, self.gate_transform, self.score_conv):
            _init_conv(conv)

    def coefficients(self, x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != g.shape[-2:]:
            raise ValueError(
                f"skip {tuple(x.shape[-2:])} and gate {tuple(g.shape[-2:])} spatial sizes differ"
            )
        combined = F.relu(self.skip_norm(self.skip_transform(x)) + self.gate_norm(self.gate_transform(g)))
        return torch.sigmoid(self.score_norm(self.score_conv(combined)))

    def forward(self, x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        return x * self.coefficients(x, g)


class PatchEmbed(nn.Module):
    """Non-overlapping patch projection plus learned 1D position embeddings.

    There is no class token: every token is later reshaped back onto the
    square patch grid.
    """

    def __init__(self, in_channels: int, embed_dim: int, patch_size: int, num_patches: int):
        super().__init__()
        self.patch_size = patch_size
        self.num_patches = num_patches
        self.proj = nn.Conv2d(in_channels, embed_dim, kernel_size=patch_size, stride=patch_size)
        self.position = nn.Parameter(torch.zeros(1, num_patches, embed_dim))
        nn.init.trunc_normal_(self.proj.weight, std=0.02)
        nn.init.zeros_(self.proj.bias)
        nn.init.trunc_normal_(self.position, std=0.02)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(
                f"spatial size {h}x{w} not divisible by patch size {self.patch_size}"
            )
        z = self.proj(x).flatten(2).transpose(1, 2)
        if z.shape[1] != self.num_patches:
            raise ValueError(
                f"input yields {z.shape[1]} patches, position table holds {self.num_patches}"
            )
        return z + self.position


class MultiHeadSelfAttention(nn.Module):
    """Independent self-attention heads over disjoint embedding slices.

    The normalized token sequence is split into ``heads`` slices of width
    ``embed_dim / heads``; each head applies its own query/key/value
    projections and scaled-dot-product attention to its slice, the head
    outputs are concatenated and linearly mixed by the output projection.
    """

    def __init__(self, embed_dim: int, heads: int):
        super().__init__()
        if embed_dim % heads != 0:
            raise ConfigError(f"embed_dim {embed_dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = embed_dim // heads
        self.scale = self.head_dim ** -0.5
        shape = (heads, self.head_dim, self.head_dim)
        self.query_weight = nn.Parameter(torch.empty(shape))
        self.key_weight = nn.Parameter(torch.empty(shape))
        self.value_weight = nn.Parameter(torch.empty(shape))
        self.query_bias = nn.Parameter(torch.zeros(heads, self.head_dim))
        self.key_bias = nn.Parameter(torch.zeros(heads, self.head_dim))
        self.value_bias = nn.Parameter(torch.zeros(heads, self.head_dim))
        self.out_proj = nn.Linear(embed_dim, embed_dim)
        for w in (self.query_weight, self.key_weight, self.value_weight):
            nn.init.trunc_normal_(w, std=0.02)
        nn.init.trunc_normal_(self.out_proj.weight, std=0.02)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, tokens: torch.Tensor, return_weights: bool = False):
        b, n, k = tokens.shape
        if k != self.heads * self.head_dim:
            raise ValueError(f"token width {k} does not match {self.heads} heads x {self.head_dim}")
        split = tokens.view(b, n, self.heads, self.head_dim).transpose(1, 2)  # b h n d
        q = split @ self.query_weight + self.query_bias[:, None, :]
        key = split @ self.key_weight + self.key_bias[:, None, :]
        v = split @ self.value_weight + self.value_bias[:, None, :]
        attn = torch.softmax(q @ key.transpose(-2, -1) * self.scale, dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(b, n, k)
        out = self.out_proj(mixed)
        if return_weights:
            return out, attn
        return out


class TransformerLayer(nn.Module):
    """Pre-norm transformer layer: attention residual, then MLP residual.

    The MLP is two linear layers with a GELU between, expanding to
    ``mlp_dim`` and projecting back.
    """

    def __init__(self, embed_dim: int, heads: int, mlp_dim: int):
        super().__init__()
        self.attn_norm = nn.LayerNorm(embed_dim)
        self.attn = MultiHeadSelfAttention(embed_dim, heads)
        self.mlp_norm = nn.LayerNorm(embed_dim)
        self.mlp_in = nn.Linear(embed_dim, mlp_dim)
        self.mlp_out = nn.Linear(mlp_dim, embed_dim)
        for lin in (self.mlp_in, self.mlp_out):
            nn.init.trunc_normal_(lin.weight, std=0.02)
            nn.init.zeros_(lin.bias)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        z = self.attn(self.attn_norm(z)) + z
        return self.mlp_out(F.gelu(self.mlp_in(self.mlp_norm(z)))) + z
