"""Tour of the computational blocks.

Each block is a pure function of (input, parameters). This script walks
through their shape contracts and the closed-form behaviors that make them
easy to test: a zeroed attention gate halves its input, a zeroed transformer
layer is the identity, and token reshaping is exactly invertible.

Run:  python demos/01_building_blocks.py
"""

import torch

from dtrattunet.blocks import (
    AttentionGate,
    MultiHeadSelfAttention,
    PatchEmbed,
    ResBlock,
    TransformerLayer,
    UpResBlock,
    map_to_tokens,
    tokens_to_map,
)

torch.manual_seed(0)

print("ResBlock: two 3x3 conv+BN+ReLU stages plus a 1x1 conv+BN+ReLU shortcut.")
res = ResBlock(64, 128)
x = torch.randn(2, 64, 56, 56)
y = res(x)
print(f"  {tuple(x.shape)} -> {tuple(y.shape)}; min value {y.min():.4f} (always >= 0)\n")

print("UpResBlock: bilinear x2 upsampling, then a ResBlock.")
up = UpResBlock(768, 256)
z = up(torch.randn(1, 768, 14, 14))
print(f"  (1, 768, 14, 14) -> {tuple(z.shape)}\n")

print("AttentionGate: a per-pixel coefficient in (0, 1) reweights the skip map.")
gate = AttentionGate(skip_channels=64, gate_channels=128)
skip = torch.randn(1, 64, 28, 28)
signal = torch.randn(1, 128, 28, 28)
coeff = gate.coefficients(skip, signal)
print(f"  coefficient range: [{coeff.min():.3f}, {coeff.max():.3f}]")
with torch.no_grad():
    gate.score_conv.weight.zero_()
    gate.score_conv.bias.zero_()
    gate.score_norm.weight.zero_()
    gate.score_norm.bias.zero_()
halved = gate(skip, signal)
print(f"  zeroed score branch: max |out - 0.5*skip| = {(halved - 0.5 * skip).abs().max():.2e}\n")

print("PatchEmbed: 16x16 patches of a 224 image give a 196-token sequence.")
embed = PatchEmbed(in_channels=3, embed_dim=768, patch_size=16, num_patches=196)
tokens = embed(torch.randn(1, 3, 224, 224))
print(f"  token sequence: {tuple(tokens.shape)}\n")

print("TransformerLayer: pre-norm attention and MLP residuals.")
layer = TransformerLayer(embed_dim=768, heads=12, mlp_dim=3072)
out = layer(tokens)
print(f"  {tuple(tokens.shape)} -> {tuple(out.shape)}")
small = TransformerLayer(16, 4, 32)
with torch.no_grad():
    small.attn.out_proj.weight.zero_()
    small.attn.out_proj.bias.zero_()
    small.mlp_out.weight.zero_()
    small.mlp_out.bias.zero_()
probe = torch.randn(1, 6, 16)
print(f"  zeroed residual branches: identity error {(small(probe) - probe).abs().max():.2e}\n")

print("MultiHeadSelfAttention: independent heads over disjoint embedding slices.")
msa = MultiHeadSelfAttention(embed_dim=24, heads=3)
seq = torch.randn(1, 5, 24)
mixed, weights = msa(seq, return_weights=True)
print(f"  head width {msa.head_dim}; attention rows sum to {weights.sum(-1).mean():.6f}\n")

print("Token reshaping: (B, N, K) <-> (B, K, sqrt(N), sqrt(N)), bit-exact roundtrip.")
grid = tokens_to_map(tokens)
back = map_to_tokens(grid)
print(f"  {tuple(tokens.shape)} -> {tuple(grid.shape)} -> roundtrip exact: {torch.equal(back, tokens)}")
