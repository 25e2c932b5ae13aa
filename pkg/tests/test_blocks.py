import pytest
import torch

from _helpers import gradient_check, naive_per_head_attention, zero_parameters
from dtrattunet.blocks import (
    AttentionGate,
    MultiHeadSelfAttention,
    PatchEmbed,
    ResBlock,
    TransformerLayer,
    UpResBlock,
    map_to_tokens,
    tokens_to_map,
    upsample2x,
)
from dtrattunet.config import ConfigError


class TestResBlock:
    def test_output_shape(self):
        block = ResBlock(64, 128)
        out = block(torch.randn(2, 64, 56, 56))
        assert out.shape == (2, 128, 56, 56)

    def test_zeroed_parameters_give_zero_output(self):
        block = ResBlock(3, 8)
        zero_parameters(block)
        out = block(torch.randn(2, 3, 16, 16))
        assert torch.equal(out, torch.zeros_like(out))

    def test_rejects_non_finite_input(self):
        block = ResBlock(3, 8)
        bad = torch.randn(1, 3, 8, 8)
        bad[0, 0, 0, 0] = float("nan")
        with pytest.raises(ValueError, match="NaN"):
            block(bad)

    def test_output_nonnegative(self):
        for seed in range(10):
            torch.manual_seed(seed)
            block = ResBlock(4, 8)
            out = block(torch.randn(2, 4, 8, 8))
            assert (out >= 0).all()

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        block = ResBlock(3, 8).double().train()
        x = torch.randn(1, 3, 16, 16, dtype=torch.float64)
        ok, fraction = gradient_check(lambda t: block(t).sum(), x)
        assert ok, f"only {fraction:.1%} of coordinates matched"

    def test_all_parameters_receive_gradient(self):
        torch.manual_seed(1)
        block = ResBlock(3, 6)
        block(torch.randn(2, 3, 8, 8)).sum().backward()
        for name, p in block.named_parameters():
            assert p.grad is not None and p.grad.abs().sum() > 0, name


class TestUpResBlock:
    def test_doubles_spatial_size(self):
        block = UpResBlock(768, 256)
        out = block(torch.randn(2, 768, 14, 14))
        assert out.shape == (2, 256, 28, 28)

    def test_constant_plane_upsamples_to_constant(self):
        plane = torch.full((1, 4, 8, 8), 3.25)
        up = upsample2x(plane)
        assert up.shape == (1, 4, 16, 16)
        assert torch.allclose(up, torch.full_like(up, 3.25))

    def test_gradient_through_average_pool_matches_finite_differences(self):
        torch.manual_seed(2)
        block = UpResBlock(4, 4).double().train()
        x = torch.randn(1, 4, 8, 8, dtype=torch.float64)

        def pooled_sum(t):
            return torch.nn.functional.avg_pool2d(block(t), 2).sum()

        ok, fraction = gradient_check(pooled_sum, x)
        assert ok, f"only {fraction:.1%} of coordinates matched"


class TestAttentionGate:
    def test_output_shape(self):
        gate = AttentionGate(64, 128)
        out = gate(torch.randn(1, 64, 112, 112), torch.randn(1, 128, 112, 112))
        assert out.shape == (1, 64, 112, 112)

    def test_zeroed_score_branch_halves_input(self):
        gate = AttentionGate(4, 6)
        with torch.no_grad():
            gate.score_conv.weight.zero_()
            gate.score_conv.bias.zero_()
            gate.score_norm.weight.zero_()
            gate.score_norm.bias.zero_()
        x = torch.randn(2, 4, 8, 8)
        g = torch.randn(2, 6, 8, 8)
        for training in (True, False):
            gate.train(training)
            out = gate(x, g)
            assert torch.allclose(out, 0.5 * x, atol=1e-6)

    def test_coefficients_stay_inside_unit_interval(self):
        torch.manual_seed(3)
        gate = AttentionGate(4, 4).eval()
        x = torch.randn(1, 4, 8, 8)
        g = torch.randn(1, 4, 8, 8)
        out = gate(x, g)
        ratio = out / x
        assert (ratio > 0).all() and (ratio < 1).all()
        assert out.abs().max() < x.abs().max()

    def test_spatial_mismatch_rejected(self):
        gate = AttentionGate(4, 4)
        with pytest.raises(ValueError, match="spatial"):
            gate(torch.randn(1, 4, 8, 8), torch.randn(1, 4, 4, 4))

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(4)
        gate = AttentionGate(4, 4).double().train()
        x = torch.randn(1, 4, 8, 8, dtype=torch.float64)
        g = torch.randn(1, 4, 8, 8, dtype=torch.float64)

        ok, fraction = gradient_check(lambda t: gate(t, g).sum(), x)
        assert ok, f"skip-path gradients: {fraction:.1%}"
        ok, fraction = gradient_check(lambda t: gate(x, t).sum(), g)
        assert ok, f"gate-path gradients: {fraction:.1%}"


class TestPatchEmbed:
    def test_token_count_for_224_input(self):
        embed = PatchEmbed(3, 8, 16, 196)
        z = embed(torch.randn(1, 3, 224, 224))
        assert z.shape == (1, 196, 8)

    def test_token_count_for_32_input(self):
        embed = PatchEmbed(1, 8, 16, 4)
        z = embed(torch.randn(1, 1, 32, 32))
        assert z.shape == (1, 4, 8)

    def test_single_pixel_touches_single_patch(self):
        torch.manual_seed(5)
        embed = PatchEmbed(1, 8, 16, 4)
        blank = torch.zeros(1, 1, 32, 32)
        spot = blank.clone()
        spot[0, 0, 20, 7] = 1.0  # inside patch row 1, col 0
        delta = (embed(spot) - embed(blank)).abs().sum(dim=-1)[0]
        assert (delta > 0).sum() == 1
        assert delta[2] > 0  # row-major patch index 2

    def test_indivisible_size_rejected(self):
        embed = PatchEmbed(1, 8, 16, 4)
        with pytest.raises(ValueError, match="divisible"):
            embed(torch.randn(1, 1, 30, 30))

    def test_patch_count_mismatch_rejected(self):
        embed = PatchEmbed(1, 8, 16, 4)
        with pytest.raises(ValueError, match="position"):
            embed(torch.randn(1, 1, 64, 64))


class TestMultiHeadSelfAttention:
    def test_head_width_arithmetic(self):
        msa = MultiHeadSelfAttention(768, 12)
        assert msa.head_dim == 64

    def test_indivisible_width_rejected_at_construction(self):
        with pytest.raises(ConfigError, match="divisible"):
            MultiHeadSelfAttention(786, 12)

    def test_single_token_attention_weight_is_one(self):
        torch.manual_seed(6)
        msa = MultiHeadSelfAttention(8, 2)
        tokens = torch.randn(1, 1, 8)
        out, weights = msa(tokens, return_weights=True)
        assert torch.equal(weights, torch.ones_like(weights))
        assert torch.allclose(out, naive_per_head_attention(tokens, msa), atol=1e-6)

    def test_matches_naive_per_head_oracle(self):
        torch.manual_seed(7)
        msa = MultiHeadSelfAttention(24, 3)
        tokens = torch.randn(1, 5, 24)
        assert torch.allclose(msa(tokens), naive_per_head_attention(tokens, msa), atol=1e-5)

    def test_attention_rows_sum_to_one(self):
        torch.manual_seed(8)
        msa = MultiHeadSelfAttention(16, 4)
        _, weights = msa(torch.randn(2, 6, 16), return_weights=True)
        sums = weights.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)


class TestTransformerLayer:
    def test_shape_preserved(self):
        layer = TransformerLayer(768, 12, 3072)
        out = layer(torch.randn(2, 196, 768))
        assert out.shape == (2, 196, 768)

    def test_zeroed_residual_branches_act_as_identity(self):
        layer = TransformerLayer(16, 4, 32)
        with torch.no_grad():
            layer.attn.out_proj.weight.zero_()
            layer.attn.out_proj.bias.zero_()
            layer.mlp_out.weight.zero_()
            layer.mlp_out.bias.zero_()
        z = torch.randn(2, 6, 16)
        assert torch.allclose(layer(z), z, atol=1e-6)

    def test_token_permutation_equivariance(self):
        torch.manual_seed(9)
        layer = TransformerLayer(16, 4, 32).double()
        z = torch.randn(1, 6, 16, dtype=torch.float64)
        perm = torch.randperm(6)
        assert torch.allclose(layer(z[:, perm]), layer(z)[:, perm], atol=1e-9)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(10)
        layer = TransformerLayer(16, 4, 32).double()
        z = torch.randn(1, 6, 16, dtype=torch.float64)
        ok, fraction = gradient_check(lambda t: layer(t).sum(), z)
        assert ok, f"only {fraction:.1%} of coordinates matched"


class TestTokenReshape:
    def test_reshape_to_map(self):
        z = torch.randn(2, 196, 768)
        assert tokens_to_map(z).shape == (2, 768, 14, 14)

    def test_small_reshape(self):
        z = torch.randn(1, 4, 8)
        assert tokens_to_map(z).shape == (1, 8, 2, 2)

    def test_roundtrip_is_bit_exact(self):
        z = torch.randn(3, 16, 24)
        assert torch.equal(map_to_tokens(tokens_to_map(z)), z)

    def test_non_square_token_count_rejected(self):
        with pytest.raises(ValueError, match="square"):
            tokens_to_map(torch.randn(1, 5, 8))


def test_blocks_stay_finite_over_seeded_trials():
    for seed in range(100):
        torch.manual_seed(seed)
        res = ResBlock(3, 4)(torch.randn(1, 3, 8, 8))
        up = UpResBlock(3, 4)(torch.randn(1, 3, 8, 8))
        gate = AttentionGate(3, 3)(torch.randn(1, 3, 8, 8), torch.randn(1, 3, 8, 8))
        layer = TransformerLayer(8, 2, 16)(torch.randn(1, 4, 8))
        for out in (res, up, gate, layer):
            assert torch.isfinite(out).all()
