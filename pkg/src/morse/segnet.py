"""UNet-style encoder/decoder producing coarse logits and decoder taps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import MLP, Conv2d, Module, Pointwise, Tensor, ops
from .config import BackboneConfig


@dataclass
class CoarseOutput:
    logits: Tensor
    block_features: list[Tensor]
    final_features: Tensor


class _ConvBlock(Module):
    """``n_convs`` 3x3 conv + ReLU layers."""

    def __init__(self, in_ch: int, out_ch: int, seed: int, name: str, n_convs: int = 2):
        self.convs = [
            Conv2d(in_ch if i == 0 else out_ch, out_ch, seed, f"{name}.conv{i + 1}") for i in range(n_convs)
        ]

    def forward(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = ops.relu(conv(x))
        return x


class UNet(Module):
    """``depth`` pooling levels, ``depth`` decoder blocks, skip connections.

    Decoder block ``d`` works at stride ``2**d``; the last ``expert_count``
    blocks are exposed as ``block_features`` (coarsest first), so the final
    entry is the full-resolution pre-logit map.
    """

    def __init__(self, cfg: BackboneConfig, seed: int):
        self.cfg = cfg
        b = cfg.base_channels
        ch = [b * 2**i for i in range(cfg.depth + 1)]
        n = cfg.convs_per_block
        self.encoder = [_ConvBlock(cfg.in_channels, ch[0], seed, "backbone.enc0", n)]
        self.encoder += [_ConvBlock(ch[i - 1], ch[i], seed, f"backbone.enc{i}", n) for i in range(1, cfg.depth)]
        self.bottleneck = _ConvBlock(ch[cfg.depth - 1], ch[cfg.depth], seed, "backbone.bottleneck", n)
        self.decoder = [
            _ConvBlock(ch[d + 1] + ch[d], ch[d], seed, f"backbone.dec{d}", n) for d in reversed(range(cfg.depth))
        ]
        self.classifier = Pointwise(ch[0], cfg.num_classes, seed, "backbone.classifier", gain=1.0)

    @property
    def block_channels(self) -> list[int]:
        """Channel counts of the tapped decoder blocks, coarsest first."""
        b = self.cfg.base_channels
        return [b * 2**d for d in reversed(range(self.cfg.expert_count))]

    def forward(self, x: Tensor) -> CoarseOutput:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected [B,{self.cfg.in_channels},H,W] input, got {x.shape}")
        H, W = x.shape[-2:]
        if H % 2**self.cfg.depth or W % 2**self.cfg.depth:
            raise ValueError(f"spatial size {H}x{W} must be divisible by {2**self.cfg.depth}")
        skips = []
        h = x
        for i, block in enumerate(self.encoder):
            if i > 0:
                h = ops.max_pool2d(h)
            h = block(h)
            skips.append(h)
        h = self.bottleneck(ops.max_pool2d(h))
        decoded = []
        for block, skip in zip(self.decoder, reversed(skips)):
            h = ops.bilinear_upsample(h, skip.shape[-2], skip.shape[-1])
            h = block(ops.concat([h, skip], axis=1))
            decoded.append(h)
        logits = self.classifier(h)
        return CoarseOutput(logits, decoded[-self.cfg.expert_count :], h)


def build_backbone(cfg: BackboneConfig, seed: int) -> UNet:
    return UNet(cfg, seed)


def forward_coarse(model: UNet, image) -> CoarseOutput:
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if not np.isfinite(data).all():
        raise ValueError("input image contains non-finite values")
    if not isinstance(image, Tensor):
        image = Tensor(image)
    if image.ndim == 3:
        image = ops.reshape(image, (1,) + image.shape)
    return model(image)


class ExpertProjector(Module):
    """One pointwise MLP per tapped block, then bilinear upsampling to full size.

    The MLP runs at the block's native resolution; upsampling afterwards is
    exact on constants, so a constant block map stays constant.
    """

    def __init__(self, block_channels: list[int], expert_dim: int, hidden, seed: int):
        self.mlps = [
            MLP([c, *hidden, expert_dim], seed, f"experts.{i}") for i, c in enumerate(block_channels)
        ]
        self.expert_dim = expert_dim

    def forward(self, block_features: list[Tensor], size: tuple[int, int]) -> list[Tensor]:
        if len(block_features) != len(self.mlps):
            raise ValueError(f"got {len(block_features)} block maps for {len(self.mlps)} experts")
        H, W = size
        return [ops.bilinear_upsample(mlp(f), H, W) for mlp, f in zip(self.mlps, block_features)]


def expert_features(projector: ExpertProjector, block_features: list[Tensor], size: tuple[int, int]) -> list[Tensor]:
    return projector(block_features, size)
