"""Generative dehazing network.

4-channel input (RGB + haze map), a pooling-transformer encoder with one
3x3 input-embedding conv, N pooling blocks and a 2x2 max pool per level,
spatial pyramid pooling at the bottleneck, and a U-Net style decoder with
skip concatenation. Channels double per level: 16, 32, 64, 128, 256 by
default, spatial size halves four times.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ParameterError, ShapeError
from .priors import HazeMap
from .ptb import PoolingTransformerBlock

DECODER_VARIANTS = ("swish", "relu", "ptb", "residual", "subpixel")
OUTPUT_ACTIVATIONS = ("sigmoid", "clamp")

IN_CHANNELS = 4
OUT_CHANNELS = 3


@dataclass
class GeneratorConfig:
    base_channels: int = 16
    levels: int = 5
    n_ptb_per_level: int = 2
    m_decoder_convs: int = 3
    mlp_ratio: int = 4
    spp_pool_sizes: tuple = (3, 5, 7)
    decoder_variant: str = "swish"
    output_activation: str = "sigmoid"

    def __post_init__(self):
        if self.levels < 2:
            raise ParameterError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 1 or self.n_ptb_per_level < 1 or self.m_decoder_convs < 1:
            raise ParameterError("base_channels, n_ptb_per_level, m_decoder_convs must be >= 1")
        if self.decoder_variant not in DECODER_VARIANTS:
            raise ParameterError(f"decoder_variant must be one of {DECODER_VARIANTS}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ParameterError(f"output_activation must be one of {OUTPUT_ACTIVATIONS}")
        self.spp_pool_sizes = tuple(int(s) for s in self.spp_pool_sizes)
        for s in self.spp_pool_sizes:
            if s % 2 == 0 or s < 3:
                raise ParameterError(f"SPP pool sizes must be odd and >= 3, got {s}")

    @property
    def channel_schedule(self):
        return [self.base_channels * 2 ** i for i in range(self.levels)]

    @property
    def spatial_divisor(self) -> int:
        return 2 ** (self.levels - 1)


class SPPBlock(nn.Module):
    """Same-shape max pools at several window sizes, concatenated and fused."""

    def __init__(self, channels: int, pool_sizes):
        super().__init__()
        self.pool_sizes = tuple(pool_sizes)
        self.fuse = nn.Conv2d(channels * (len(self.pool_sizes) + 1), channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        for s in self.pool_sizes:
            if s >= min(h, w):
                raise ParameterError(
                    f"SPP pool size {s} must be smaller than feature size {h}x{w}"
                )
        branches = [x] + [F.max_pool2d(x, s, stride=1, padding=s // 2) for s in self.pool_sizes]
        return self.fuse(torch.cat(branches, dim=1))


class EncoderLevel(nn.Module):

    def __init__(self, in_ch: int, out_ch: int, n_ptb: int, mlp_ratio: int):
        super().__init__()
        self.embed = nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1)
        self.blocks = nn.ModuleList(
            PoolingTransformerBlock(out_ch, mlp_ratio) for _ in range(n_ptb)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.embed(x)
        for block in self.blocks:
            x = block(x)
        return x


class DecoderLevel(nn.Module):
    """One up-sampling level: upsample, concat skip, then the conv stack."""

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, m_convs: int,
                 variant: str, mlp_ratio: int):
        super().__init__()
        self.variant = variant
        if variant == "subpixel":
            # parameter-free shuffle: channels shrink 4x while resolution doubles
            self.up = nn.PixelShuffle(2)
            merged = in_ch // 4 + skip_ch
        else:
            self.up = nn.ConvTranspose2d(in_ch, out_ch, kernel_size=2, stride=2)
            merged = out_ch + skip_ch
        if variant == "ptb":
            self.embed = nn.Conv2d(merged, out_ch, kernel_size=3, padding=1)
            self.blocks = nn.ModuleList(
                PoolingTransformerBlock(out_ch, mlp_ratio)
                for _ in range(max(1, m_convs - 1))
            )
        else:
            convs = [nn.Conv2d(merged, out_ch, kernel_size=3, padding=1)]
            convs += [nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1)
                      for _ in range(m_convs - 1)]
            self.convs = nn.ModuleList(convs)

    def _act(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(x) if self.variant == "relu" else F.silu(x)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = self.up(x)
        if x.shape[-2:] != skip.shape[-2:]:
            raise ShapeError(
                f"decoder/skip spatial mismatch: {tuple(x.shape[-2:])} vs {tuple(skip.shape[-2:])}"
            )
        x = torch.cat([x, skip], dim=1)
        if self.variant == "ptb":
            x = self.embed(x)
            for block in self.blocks:
                x = block(x)
            return x
        x = self._act(self.convs[0](x))
        if self.variant == "residual":
            h = x
            for conv in self.convs[1:]:
                h = self._act(conv(h))
            return x + h
        for conv in self.convs[1:]:
            x = self._act(conv(x))
        return x


class DehazeGenerator(nn.Module):

    def __init__(self, cfg: GeneratorConfig | None = None):
        super().__init__()
        self.cfg = cfg or GeneratorConfig()
        chans = self.cfg.channel_schedule
        ins = [IN_CHANNELS] + chans[:-1]
        self.encoder = nn.ModuleList(
            EncoderLevel(i, c, self.cfg.n_ptb_per_level, self.cfg.mlp_ratio)
            for i, c in zip(ins, chans)
        )
        self.spp = SPPBlock(chans[-1], self.cfg.spp_pool_sizes)
        self.decoder = nn.ModuleList(
            DecoderLevel(chans[i + 1], chans[i], chans[i], self.cfg.m_decoder_convs,
                         self.cfg.decoder_variant, self.cfg.mlp_ratio)
            for i in reversed(range(self.cfg.levels - 1))
        )
        self.head = nn.Conv2d(chans[0], OUT_CHANNELS, kernel_size=3, padding=1)

    def encode(self, x: torch.Tensor):
        """Returns the deepest pre-SPP feature and the per-level skip features."""
        if x.dim() != 4 or x.shape[1] != IN_CHANNELS:
            raise ShapeError(f"expected Nx{IN_CHANNELS}xHxW input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        d = self.cfg.spatial_divisor
        if h % d or w % d:
            raise ShapeError(
                f"spatial size {h}x{w} must be divisible by {d}; "
                f"pad to {-(-h // d) * d}x{-(-w // d) * d} first"
            )
        skips = []
        for level in self.encoder[:-1]:
            x = level(x)
            skips.append(x)
            x = F.max_pool2d(x, 2, stride=2)
        x = self.encoder[-1](x)
        return x, skips

    def bottleneck(self, x: torch.Tensor) -> torch.Tensor:
        """Post-SPP bottleneck feature; the tap point for hint distillation."""
        encoded, _ = self.encode(x)
        return self.spp(encoded)

    def decode(self, bottleneck: torch.Tensor, skips) -> torch.Tensor:
        x = bottleneck
        for level, skip in zip(self.decoder, reversed(skips)):
            x = level(x, skip)
        return x

    def _activate(self, x: torch.Tensor) -> torch.Tensor:
        if self.cfg.output_activation == "sigmoid":
            return torch.sigmoid(x)
        return torch.clamp(x, 0.0, 1.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out, _ = self.forward_with_bottleneck(x)
        return out

    def forward_with_bottleneck(self, x: torch.Tensor):
        encoded, skips = self.encode(x)
        bottleneck = self.spp(encoded)
        out = self._activate(self.head(self.decode(bottleneck, skips)))
        return out, bottleneck


def build_generator(cfg: GeneratorConfig | None = None, seed: int = 0) -> DehazeGenerator:
    """Deterministic construction: the same seed yields bit-identical weights."""
    torch.manual_seed(seed)
    return DehazeGenerator(cfg)


def to_model_input(hazy_rgb: np.ndarray, hm: HazeMap) -> torch.Tensor:
    """Stack an HxWx3 image and its haze map into a 1x4xHxW float tensor."""
    if hazy_rgb.ndim != 3 or hazy_rgb.shape[2] != 3:
        raise ShapeError(f"hazy_rgb must be HxWx3, got {hazy_rgb.shape}")
    if hm.values.shape != hazy_rgb.shape[:2]:
        raise ShapeError(
            f"haze map shape {hm.values.shape} does not match image {hazy_rgb.shape[:2]}"
        )
    stacked = np.concatenate([hazy_rgb, hm.values[..., None]], axis=2)
    return torch.from_numpy(stacked.astype(np.float32)).permute(2, 0, 1).unsqueeze(0)


def generate(hazy_rgb: np.ndarray, hm: HazeMap, model: DehazeGenerator) -> np.ndarray:
    """Eval-mode dehazing of one image; returns an HxWx3 array in [0, 1]."""
    x = to_model_input(hazy_rgb, hm)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(x)
    finally:
        model.train(was_training)
    return out.squeeze(0).permute(1, 2, 0).numpy().astype(np.float64)
