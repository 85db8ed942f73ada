import math

import pytest
import torch

from ui2i.blocks import (AbsnConv2d, ConvBlock, ConvBlockConfig,
                         EscaSpatialAttention, apply_output_bias,
                         init_parameters, lanczos2_taps, lanczos2_upsample)


def make_gate_neutral(attn: EscaSpatialAttention) -> None:
    """Parameterize every gate to saturate its sigmoid at ~1."""
    with torch.no_grad():
        for gate in (attn.channel_gate1, attn.height_gate,
                     attn.width_gate, attn.channel_gate2):
            final = gate[-1]
            final.normalize = False
            final.weight.zero_()
            final.bias.fill_(30.0)
        attn.spatial_conv.weight.zero_()
        attn.spatial_conv.bias.fill_(30.0)


class TestConvBlock:
    def test_output_shape_with_residual_and_attention(self):
        block = ConvBlock(ConvBlockConfig(8, 16, use_residual=True, use_attention=True))
        out = block(torch.randn(1, 8, 16, 16))
        assert out.shape == (1, 16, 16, 16)

    def test_gate_neutral_attention_reduces_to_plain_stack(self):
        torch.manual_seed(0)
        plain = ConvBlock(ConvBlockConfig(4, 8))
        attended = ConvBlock(ConvBlockConfig(4, 8, use_attention=True))
        attended.adapt.load_state_dict(plain.adapt.state_dict())
        for a, b in zip(attended.inner, plain.inner):
            a.load_state_dict(b.state_dict())
        make_gate_neutral(attended.attention)
        x = torch.randn(2, 4, 12, 12)
        assert torch.allclose(attended(x), plain(x), atol=1e-5)

    def test_zero_input_zero_biases_gives_zero(self):
        block = ConvBlock(ConvBlockConfig(3, 6, use_residual=True))
        with torch.no_grad():
            for m in block.modules():
                if isinstance(m, AbsnConv2d):
                    m.bias.zero_()
        out = block(torch.zeros(1, 3, 8, 8))
        assert torch.equal(out, torch.zeros_like(out))

    def test_skip_concatenation(self):
        block = ConvBlock(ConvBlockConfig(4, 8, accepts_skip=True, skip_channels=2))
        out = block(torch.randn(1, 4, 10, 10), skip=torch.randn(1, 2, 10, 10))
        assert out.shape == (1, 8, 10, 10)

    def test_channel_mismatch_rejected(self):
        block = ConvBlock(ConvBlockConfig(4, 8))
        with pytest.raises(ValueError):
            block(torch.randn(1, 5, 8, 8))

    def test_skip_spatial_mismatch_rejected(self):
        block = ConvBlock(ConvBlockConfig(4, 8, accepts_skip=True, skip_channels=2))
        with pytest.raises(ValueError):
            block(torch.randn(1, 4, 8, 8), skip=torch.randn(1, 2, 9, 8))

    def test_missing_skip_rejected(self):
        block = ConvBlock(ConvBlockConfig(4, 8, accepts_skip=True, skip_channels=2))
        with pytest.raises(ValueError):
            block(torch.randn(1, 4, 8, 8))

    def test_spatial_size_preserved(self):
        block = ConvBlock(ConvBlockConfig(3, 5, inner_convs=3))
        for size in ((7, 9), (16, 16), (5, 23)):
            assert block(torch.randn(1, 3, *size)).shape[2:] == size


class TestAttention:
    def test_shape_preserved(self):
        attn = EscaSpatialAttention(32)
        x = torch.randn(2, 32, 15, 17)
        assert attn(x).shape == x.shape

    def test_gates_strictly_inside_unit_interval(self):
        torch.manual_seed(1)
        attn = EscaSpatialAttention(8)
        x = torch.rand(2, 8, 9, 9) + 0.5  # strictly positive input
        out = attn(x)
        ratio = out / x
        assert ratio.max() < 1.0
        assert ratio.min() > 0.0

    def test_constant_along_height_gives_constant_height_gates(self):
        # Pooled statistics are identical for every row of a constant-along-H
        # input, so the height-attention gates cannot vary along H.
        torch.manual_seed(2)
        attn = EscaSpatialAttention(6)
        row = torch.rand(1, 6, 1, 13)
        x = row.expand(1, 6, 11, 13).contiguous()
        mean = x.mean(dim=(1, 3), keepdim=True)
        rms = torch.sqrt((x * x).mean(dim=(1, 3), keepdim=True) + 1e-12)
        gates = torch.sigmoid(attn.height_gate(torch.cat([mean, rms], dim=1)))
        assert gates.shape == (1, 1, 11, 1)
        assert (gates - gates[0, 0, 0, 0]).abs().max() < 1e-7

    def test_gate_neutral_is_identity(self):
        attn = EscaSpatialAttention(5)
        make_gate_neutral(attn)
        x = torch.randn(1, 5, 8, 8)
        assert torch.allclose(attn(x), x, atol=1e-6)


class TestLanczosUpsample:
    def test_shape_doubles(self):
        x = torch.randn(1, 3, 8, 8)
        assert lanczos2_upsample(x).shape == (1, 3, 16, 16)
        x = torch.randn(2, 5, 7, 13)
        assert lanczos2_upsample(x).shape == (2, 5, 14, 26)

    def test_constant_preserved_away_from_borders(self):
        x = torch.full((1, 2, 16, 16), 0.6)
        y = lanczos2_upsample(x)
        interior = y[:, :, 4:-4, 4:-4]
        assert (interior - 0.6).abs().max() < 1e-6

    def test_taps_match_direct_kernel_evaluation(self):
        def lanczos2(t):
            if t == 0:
                return 1.0
            if abs(t) >= 2:
                return 0.0
            return (math.sin(math.pi * t) / (math.pi * t)
                    * math.sin(math.pi * t / 2) / (math.pi * t / 2))

        phase_a, phase_b = lanczos2_taps()
        raw_a = [lanczos2(t) for t in (-1.75, -0.75, 0.25, 1.25)]
        raw_b = [lanczos2(t) for t in (-1.25, -0.25, 0.75, 1.75)]
        for taps, raw in ((phase_a, raw_a), (phase_b, raw_b)):
            assert sum(taps) == pytest.approx(1.0, abs=1e-12)
            norm = sum(raw)
            for tap, r in zip(taps, raw):
                assert tap == pytest.approx(r / norm, abs=1e-12)

    def test_phases_are_mirrors(self):
        phase_a, phase_b = lanczos2_taps()
        assert phase_a == list(reversed(phase_b))


class TestInitParameters:
    def test_weight_std(self):
        layer = torch.nn.Conv2d(100, 100, 10)  # 10^6 weights
        init_parameters(layer, seed=0)
        assert layer.weight.std().item() == pytest.approx(0.2, abs=0.01)
        half_width = 2 * math.sqrt(3) / 10
        assert layer.weight.abs().max().item() <= half_width

    def test_bias_xavier_bound(self):
        layer = torch.nn.Conv2d(8, 4, 3)
        init_parameters(layer, seed=1)
        bound = math.sqrt(6.0 / (8 * 9 + 4 * 9))
        assert layer.bias.abs().max().item() <= bound

    def test_deterministic_given_seed(self):
        a = torch.nn.Conv2d(4, 4, 3)
        b = torch.nn.Conv2d(4, 4, 3)
        init_parameters(a, seed=7)
        init_parameters(b, seed=7)
        assert torch.equal(a.weight, b.weight)
        assert torch.equal(a.bias, b.bias)

    def test_output_bias_zero_median(self):
        layer = torch.nn.Conv2d(4, 2, 3)
        apply_output_bias(layer, 0.0)
        assert torch.equal(layer.bias, torch.zeros(2))

    def test_output_bias_half_median(self):
        layer = torch.nn.Conv2d(4, 2, 3)
        apply_output_bias(layer, 0.5)
        assert layer.bias[0].item() == pytest.approx(math.atanh(0.5), rel=1e-6)
        assert layer.bias[0].item() == pytest.approx(0.5493, abs=1e-4)

    def test_missing_median_warns_and_zeroes(self):
        layer = torch.nn.Conv2d(4, 2, 3)
        with torch.no_grad():
            layer.bias.fill_(3.0)
        with pytest.warns(UserWarning):
            apply_output_bias(layer, None)
        assert torch.equal(layer.bias, torch.zeros(2))

    def test_extreme_median_clamped(self):
        layer = torch.nn.Conv2d(4, 1, 3)
        apply_output_bias(layer, 1.0)
        assert torch.isfinite(layer.bias).all()
        assert layer.bias.item() == pytest.approx(math.atanh(1 - 1e-4), rel=1e-4)
