"""Network building blocks: spectrally normalized convolutions, the generator
conv block, channel/spatial attention, fixed Lanczos2 upsampling, and
parameter initialization."""

import math
import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .absn import absn_apply

LEAKY_SLOPE = 0.2


class AbsnConv2d(nn.Conv2d):
    """Conv2d whose weight is divided by its bidirectional spectral-norm RMS
    on every forward pass. ``normalize=False`` marks the layer as exempt
    (generator output layers and the final layer of attention modules)."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 normalize=True, tag=""):
        super().__init__(in_channels, out_channels, kernel_size, stride=stride,
                         padding=padding, bias=True)
        self.normalize = normalize
        self.tag = tag

    def forward(self, x):
        w = absn_apply(self.weight, tag=self.tag) if self.normalize else self.weight
        return F.conv2d(x, w, self.bias, self.stride, self.padding)


def _mean_rms_pool(x, dims):
    mean = x.mean(dim=dims, keepdim=True)
    rms = torch.sqrt((x * x).mean(dim=dims, keepdim=True) + 1e-12)
    return mean, rms


class EscaSpatialAttention(nn.Module):
    """Channel -> height -> width -> channel gating followed by one spatial
    gate. Each axis stage pools mean and RMS statistics over the
    complementary axes, runs them through a two-layer 1x1 transform, and
    multiplies the input by the sigmoid gate. The spatial stage concatenates
    mean- and RMS-pooled channel statistics and gates through a 7x7 conv
    (the module's final layer, exempt from weight normalization)."""

    def __init__(self, channels, reduction=8):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.channel_gate1 = self._gate_transform(2 * channels, hidden, channels)
        self.height_gate = self._gate_transform(2, hidden, 1)
        self.width_gate = self._gate_transform(2, hidden, 1)
        self.channel_gate2 = self._gate_transform(2 * channels, hidden, channels)
        self.spatial_conv = AbsnConv2d(2, 1, 7, padding=3, normalize=False)

    @staticmethod
    def _gate_transform(in_ch, hidden, out_ch):
        return nn.Sequential(
            AbsnConv2d(in_ch, hidden, 1),
            nn.LeakyReLU(LEAKY_SLOPE),
            AbsnConv2d(hidden, out_ch, 1),
        )

    def forward(self, x):
        for gate, dims in (
            (self.channel_gate1, (2, 3)),
            (self.height_gate, (1, 3)),
            (self.width_gate, (1, 2)),
            (self.channel_gate2, (2, 3)),
        ):
            mean, rms = _mean_rms_pool(x, dims)
            x = x * torch.sigmoid(gate(torch.cat([mean, rms], dim=1)))
        mean, rms = _mean_rms_pool(x, (1,))
        return x * torch.sigmoid(self.spatial_conv(torch.cat([mean, rms], dim=1)))


@dataclass
class ConvBlockConfig:
    in_channels: int
    out_channels: int
    inner_convs: int = 2
    use_residual: bool = False
    use_attention: bool = False
    accepts_skip: bool = False
    skip_channels: int = 0
    attention_reduction: int = 8

    def __post_init__(self):
        if self.inner_convs < 1:
            raise ValueError("inner_convs must be >= 1")
        if self.accepts_skip and self.skip_channels < 1:
            raise ValueError("accepts_skip requires skip_channels >= 1")


class ConvBlock(nn.Module):
    """Generator conv block: optional skip concat, a channel-adapting 3x3
    conv, a fixed-width inner conv stack, optional attention, and an
    optional residual add of the channel-adapted feature."""

    def __init__(self, cfg: ConvBlockConfig):
        super().__init__()
        self.cfg = cfg
        first_in = cfg.in_channels + (cfg.skip_channels if cfg.accepts_skip else 0)
        self.adapt = AbsnConv2d(first_in, cfg.out_channels, 3, padding=1)
        self.inner = nn.ModuleList(
            AbsnConv2d(cfg.out_channels, cfg.out_channels, 3, padding=1)
            for _ in range(cfg.inner_convs)
        )
        self.attention = (
            EscaSpatialAttention(cfg.out_channels, cfg.attention_reduction)
            if cfg.use_attention else None
        )

    def forward(self, x, skip=None):
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}")
        if self.cfg.accepts_skip:
            if skip is None:
                raise ValueError("block configured with accepts_skip but no skip given")
            if skip.shape[2:] != x.shape[2:]:
                raise ValueError(
                    f"skip spatial size {tuple(skip.shape[2:])} != input {tuple(x.shape[2:])}")
            x = torch.cat([x, skip], dim=1)
        elif skip is not None:
            raise ValueError("skip passed to a block not configured for one")
        h = F.leaky_relu(self.adapt(x), LEAKY_SLOPE)
        shortcut = h
        for conv in self.inner:
            h = F.leaky_relu(conv(h), LEAKY_SLOPE)
        if self.attention is not None:
            h = self.attention(h)
        if self.cfg.use_residual:
            h = h + shortcut
        return h


def lanczos2_taps():
    """The two 4-tap polyphase filters for 2x Lanczos2 resampling.

    Output samples sit at quarter-pixel offsets of the input grid, so one
    phase evaluates L(t) = sinc(t) * sinc(t/2) at t in {-1.75, -0.75, 0.25,
    1.25} and the other at the mirrored offsets; each phase is normalized
    to sum 1 so constant signals are preserved.
    """
    def sinc(t):
        return math.sin(math.pi * t) / (math.pi * t) if t != 0 else 1.0

    def lanczos2(t):
        return sinc(t) * sinc(t / 2) if abs(t) < 2 else 0.0

    phase_a = [lanczos2((2 * k - 7) / 4) for k in (0, 2, 4, 6)]  # t = -1.75..1.25
    phase_b = [lanczos2((2 * k - 7) / 4) for k in (1, 3, 5, 7)]  # t = -1.25..1.75
    phase_a = [v / sum(phase_a) for v in phase_a]
    phase_b = [v / sum(phase_b) for v in phase_b]
    return phase_a, phase_b


def _lanczos2_kernel_1d():
    phase_a, phase_b = lanczos2_taps()
    taps = [0.0] * 8
    for i, k in enumerate((0, 2, 4, 6)):
        taps[k] = phase_a[i]
    for i, k in enumerate((1, 3, 5, 7)):
        taps[k] = phase_b[i]
    return taps


def lanczos2_upsample(x: torch.Tensor) -> torch.Tensor:
    """Double H and W with a fixed separable Lanczos2 kernel, channel count
    unchanged. Implemented as a per-channel stride-2 transposed convolution;
    each output pixel draws on a 4x4 input window."""
    channels = x.shape[1]
    k1d = torch.tensor(_lanczos2_kernel_1d(), dtype=x.dtype, device=x.device)
    k2d = torch.outer(k1d, k1d)
    weight = k2d.expand(channels, 1, 8, 8)
    return F.conv_transpose2d(x, weight, stride=2, padding=3, groups=channels)


def _fan_in_out(weight: torch.Tensor):
    receptive = weight[0][0].numel() if weight.ndim > 2 else 1
    fan_in = weight.shape[1] * receptive
    fan_out = weight.shape[0] * receptive
    return fan_in, fan_out


WEIGHT_INIT_HALF_WIDTH = 2 * math.sqrt(3) / 10  # uniform with std 0.2


def init_parameters(model: nn.Module, seed: int, output_layer: nn.Module | None = None,
                    output_median=None) -> nn.Module:
    """Initialize all conv/linear weights from U[-2*sqrt(3)/10, 2*sqrt(3)/10]
    (std 0.2) and biases from Xavier-uniform bounds of the owning layer.

    ``output_layer``, when given, is the generator's final conv; its bias is
    set to atanh(median) so the tanh output starts at the target domain's
    median pixel value. A missing median falls back to bias 0 with a warning.
    """
    gen = torch.Generator().manual_seed(seed)
    for module in model.modules():
        weight = getattr(module, "weight", None)
        if not isinstance(weight, nn.Parameter) or weight.ndim < 2:
            continue
        with torch.no_grad():
            weight.uniform_(-WEIGHT_INIT_HALF_WIDTH, WEIGHT_INIT_HALF_WIDTH, generator=gen)
            bias = getattr(module, "bias", None)
            if isinstance(bias, nn.Parameter):
                fan_in, fan_out = _fan_in_out(weight)
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                bias.uniform_(-bound, bound, generator=gen)
    if output_layer is not None:
        apply_output_bias(output_layer, output_median)
    return model


def apply_output_bias(output_layer: nn.Module, output_median=None) -> None:
    """Set a tanh output layer's bias so its activation starts at the target
    domain's median pixel value; bias 0 with a warning when no median is known."""
    with torch.no_grad():
        if output_median is None:
            warnings.warn("target-domain median unavailable; output bias set to 0")
            output_layer.bias.zero_()
        else:
            median = torch.as_tensor(output_median, dtype=output_layer.bias.dtype)
            median = median.clamp(-1 + 1e-4, 1 - 1e-4)
            output_layer.bias.copy_(torch.atanh(median).expand_as(output_layer.bias))
