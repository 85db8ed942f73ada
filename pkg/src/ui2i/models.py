"""Model assembly: the two U-Net style generators with a shared bottleneck,
the stacked domain discriminator, the content discriminator, and the
checkpoint container."""

import os
import tempfile
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from . import blocks
from .blocks import LEAKY_SLOPE, AbsnConv2d, ConvBlock, ConvBlockConfig

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class GeneratorConfig:
    channels_a: int
    channels_b: int
    base_width: int = 64
    levels: int = 3
    attention_levels: tuple = (2, 3)
    inner_convs: int = 2

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        bad = [lvl for lvl in self.attention_levels if not 1 <= lvl <= self.levels]
        if bad:
            raise ValueError(f"attention levels {bad} outside 1..{self.levels}")

    def level_width(self, level: int) -> int:
        return self.base_width * 2 ** (level - 1)

    @property
    def bottleneck_width(self) -> int:
        return self.base_width * 2 ** self.levels


class Encoder(nn.Module):
    """Per-level conv block (residual, attention on configured levels)
    followed by a stride-2 conv that halves resolution and doubles channels.
    Returns the per-level block outputs for skip connections plus the
    contracted map feeding the bottleneck."""

    def __init__(self, cfg: GeneratorConfig, in_channels: int):
        super().__init__()
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        for level in range(1, cfg.levels + 1):
            width = cfg.level_width(level)
            block_in = in_channels if level == 1 else width
            self.blocks.append(ConvBlock(ConvBlockConfig(
                block_in, width,
                inner_convs=cfg.inner_convs,
                use_residual=True,
                use_attention=level in cfg.attention_levels,
            )))
            self.downs.append(AbsnConv2d(width, width * 2, 3, stride=2, padding=1))

    def forward(self, x):
        skips = []
        for block, down in zip(self.blocks, self.downs):
            x = block(x)
            skips.append(x)
            x = F.leaky_relu(down(x), LEAKY_SLOPE)
        return skips, x


class Decoder(nn.Module):
    """Mirrors the encoder: fixed Lanczos2 upsampling (channel count
    unchanged), skip concatenation, and a residual conv block per level whose
    output width is twice the corresponding encoder width. The final conv is
    exempt from weight normalization and maps through tanh."""

    def __init__(self, cfg: GeneratorConfig, out_channels: int):
        super().__init__()
        self.blocks = nn.ModuleList()
        channels = cfg.bottleneck_width
        for level in range(cfg.levels, 0, -1):
            skip_ch = cfg.level_width(level)
            self.blocks.append(ConvBlock(ConvBlockConfig(
                channels, 2 * skip_ch,
                inner_convs=cfg.inner_convs,
                use_residual=True,
                accepts_skip=True,
                skip_channels=skip_ch,
            )))
            channels = 2 * skip_ch
        self.output_conv = AbsnConv2d(channels, out_channels, 3, padding=1,
                                      normalize=False)

    def forward(self, x, skips):
        for block, skip in zip(self.blocks, reversed(skips)):
            x = blocks.lanczos2_upsample(x)
            x = block(x, skip)
        return torch.tanh(self.output_conv(x))


class GeneratorPair(nn.Module):
    """Both translation directions with one physically shared bottleneck
    block: A->B runs encoder_a -> bottleneck -> decoder_b, B->A runs
    encoder_b -> bottleneck -> decoder_a."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder_a = Encoder(cfg, cfg.channels_a)
        self.encoder_b = Encoder(cfg, cfg.channels_b)
        width = cfg.bottleneck_width
        self.bottleneck = ConvBlock(ConvBlockConfig(
            width, width, inner_convs=cfg.inner_convs))
        self.decoder_a = Decoder(cfg, cfg.channels_a)
        self.decoder_b = Decoder(cfg, cfg.channels_b)

    def _check_input(self, x, channels):
        if x.shape[1] != channels:
            raise ValueError(f"expected {channels} input channels, got {x.shape[1]}")
        div = 2 ** self.cfg.levels
        if x.shape[2] % div or x.shape[3] % div:
            raise ValueError(
                f"spatial size {tuple(x.shape[2:])} not divisible by {div}; pad first")

    def translate(self, x, direction: str):
        """Run one direction; returns the translated image and the bottleneck
        feature map used by the content discriminator and contrastive loss."""
        if direction == "ab":
            self._check_input(x, self.cfg.channels_a)
            skips, h = self.encoder_a(x)
            z = self.bottleneck(h)
            return self.decoder_b(z, skips), z
        if direction == "ba":
            self._check_input(x, self.cfg.channels_b)
            skips, h = self.encoder_b(x)
            z = self.bottleneck(h)
            return self.decoder_a(z, skips), z
        raise ValueError(f"direction must be 'ab' or 'ba', got {direction!r}")

    def bottleneck_features(self, x, domain: str):
        """Encoder + shared bottleneck only (no decoding), for feature maps of
        extra contrastive images."""
        if domain == "a":
            self._check_input(x, self.cfg.channels_a)
            _, h = self.encoder_a(x)
        elif domain == "b":
            self._check_input(x, self.cfg.channels_b)
            _, h = self.encoder_b(x)
        else:
            raise ValueError(f"domain must be 'a' or 'b', got {domain!r}")
        return self.bottleneck(h)

    def init_parameters(self, seed: int, median_a=None, median_b=None):
        blocks.init_parameters(self, seed)
        blocks.apply_output_bias(self.decoder_a.output_conv, median_a)
        blocks.apply_output_bias(self.decoder_b.output_conv, median_b)
        return self


class DomainDiscriminator(nn.Module):
    """Patch discriminator over channel-stacked image pairs from the two
    domains. Three-class mode predicts a 2-D class coordinate per patch,
    two-class mode a scalar score."""

    def __init__(self, in_channels: int, three_class: bool = True):
        super().__init__()
        self.in_channels = in_channels
        self.three_class = three_class
        out_channels = 2 if three_class else 1
        self.net = nn.Sequential(
            AbsnConv2d(in_channels, 128, 8, stride=2, padding=3),
            nn.LeakyReLU(LEAKY_SLOPE),
            AbsnConv2d(128, 256, 4, stride=2, padding=1),
            nn.LeakyReLU(LEAKY_SLOPE),
            AbsnConv2d(256, 512, 4, stride=2, padding=1),
            nn.LeakyReLU(LEAKY_SLOPE),
            AbsnConv2d(512, 1024, 4, stride=1, padding=2),
            nn.LeakyReLU(LEAKY_SLOPE),
            AbsnConv2d(1024, out_channels, 4, stride=1, padding=1),
        )

    def forward(self, pair):
        if pair.shape[1] != self.in_channels:
            raise ValueError(
                f"stacked pair must have {self.in_channels} channels, got {pair.shape[1]}")
        return self.net(pair)


class ContentDiscriminator(nn.Module):
    """Domain classifier on bottleneck feature maps: one contracting conv at
    width 512 and a 1-channel linear scoring head."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.net = nn.Sequential(
            AbsnConv2d(in_channels, 512, 4, stride=2, padding=1),
            nn.LeakyReLU(LEAKY_SLOPE),
            AbsnConv2d(512, 1, 1),
        )

    def forward(self, z):
        return self.net(z)


def absn_exempt_layers(model: nn.Module) -> list[str]:
    """Names of conv layers that bypass weight normalization."""
    return [name for name, m in model.named_modules()
            if isinstance(m, AbsnConv2d) and not m.normalize]


def save_checkpoint(path, tensors: dict, metadata: dict, extra: dict | None = None):
    """Write a checkpoint atomically: a flat name->tensor archive plus a
    metadata record; ``extra`` carries resumable trainer state."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "metadata": metadata,
        "tensors": tensors,
        "extra": extra or {},
    }
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version: {version}")
    return payload
