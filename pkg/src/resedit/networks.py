"""The two image transformation networks and the three-class discriminator.

Both transformation networks share one architecture: a stride-preserving
encoder-decoder that maps an image to an unclamped residual of the same
shape.  The discriminator stacks five stride-2 blocks and finishes with a
valid-padding convolution spanning the whole remaining feature map, so its
three logits are spatially global.

Block layout is conv -> batchnorm -> leaky-ReLU (slope 0.2); in the two
upsampling blocks a nearest-neighbor 2x upsample follows the activation.
Convolutions followed by batchnorm carry no bias (the normalization would
cancel it); the final convolution of each network keeps one.

Forward evaluation is read-only on parameters and safe to run concurrently;
training mutates parameters and needs a single exclusive owner.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .datamodel import validate_image, validate_residual

LEAKY_SLOPE = 0.2
INIT_STD = 0.02

GENERATOR_CHANNELS = (64, 128, 256, 128, 64)
DISCRIMINATOR_CHANNELS = (64, 128, 256, 512, 1024)


def _scaled(channels, width_scale):
    return tuple(max(2, round(c * width_scale)) for c in channels)


@dataclass(frozen=True)
class GeneratorSpec:
    """Channel plan for a transformation network.

    Layers: 5x5/s1, 4x4/s2, 4x4/s2, 3x3/s1 + 2x up, 3x3/s1 + 2x up, then a
    4x4/s1 no-norm no-nonlinearity convolution back to 3 channels.  Output
    spatial size equals input spatial size for any H, W divisible by 4.
    """

    channels: tuple = GENERATOR_CHANNELS

    def __post_init__(self):
        if len(self.channels) != 5:
            raise ValueError(f"generator needs 5 channel counts, got {self.channels}")

    @classmethod
    def scaled(cls, width_scale: float) -> "GeneratorSpec":
        return cls(channels=_scaled(GENERATOR_CHANNELS, width_scale))


@dataclass(frozen=True)
class DiscriminatorSpec:
    """Channel plan for the three-class discriminator at a fixed input size.

    Each listed channel count is one 4x4 stride-2 block; the final
    convolution's kernel equals the remaining spatial extent and emits 3
    logits.  ``perceptual_block`` names the block whose post-activation
    feature map feeds the perceptual loss (the third, by default).
    """

    image_size: int = 128
    channels: tuple = DISCRIMINATOR_CHANNELS
    perceptual_block: int = 3

    def __post_init__(self):
        if not (1 <= self.perceptual_block <= len(self.channels)):
            raise ValueError(f"perceptual_block {self.perceptual_block} out of range")
        if self.image_size % self.spatial_divisor:
            raise ValueError(f"image_size {self.image_size} must be divisible by "
                             f"{self.spatial_divisor} for {len(self.channels)} stride-2 blocks")

    @property
    def spatial_divisor(self) -> int:
        return 2 ** len(self.channels)

    @property
    def final_extent(self) -> int:
        return self.image_size // self.spatial_divisor

    @classmethod
    def scaled(cls, image_size: int, width_scale: float) -> "DiscriminatorSpec":
        return cls(image_size=image_size, channels=_scaled(DISCRIMINATOR_CHANNELS, width_scale))


class DiscriminatorOutput(NamedTuple):
    logits: torch.Tensor  # (batch, 3)
    probs: torch.Tensor   # (batch, 3), rows sum to 1
    phi: torch.Tensor     # perceptual feature map, (batch, C, H/8, W/8) by default


class Generator(nn.Module):
    """Maps an image to an unclamped residual of identical shape."""

    def __init__(self, spec: GeneratorSpec = GeneratorSpec()):
        super().__init__()
        self.spec = spec
        c1, c2, c3, c4, c5 = spec.channels
        self.conv1 = nn.Conv2d(3, c1, 5, stride=1, padding=2, bias=False)
        self.bn1 = nn.BatchNorm2d(c1)
        self.conv2 = nn.Conv2d(c1, c2, 4, stride=2, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c2)
        self.conv3 = nn.Conv2d(c2, c3, 4, stride=2, padding=1, bias=False)
        self.bn3 = nn.BatchNorm2d(c3)
        self.conv4 = nn.Conv2d(c3, c4, 3, stride=1, padding=1, bias=False)
        self.bn4 = nn.BatchNorm2d(c4)
        self.conv5 = nn.Conv2d(c4, c5, 3, stride=1, padding=1, bias=False)
        self.bn5 = nn.BatchNorm2d(c5)
        self.conv6 = nn.Conv2d(c5, 3, 4, stride=1, padding=0, bias=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        validate_image(x, spatial_divisor=4, name="generator input")
        act = lambda h: F.leaky_relu(h, LEAKY_SLOPE)
        h = act(self.bn1(self.conv1(x)))
        h = act(self.bn2(self.conv2(h)))
        h = act(self.bn3(self.conv3(h)))
        h = F.interpolate(act(self.bn4(self.conv4(h))), scale_factor=2, mode="nearest")
        h = F.interpolate(act(self.bn5(self.conv5(h))), scale_factor=2, mode="nearest")
        # 4x4 kernel at stride 1 preserves size with asymmetric padding.
        return self.conv6(F.pad(h, (1, 2, 1, 2)))


class Discriminator(nn.Module):
    """Three-class classifier over {real-negative, real-positive, generated}."""

    def __init__(self, spec: DiscriminatorSpec = DiscriminatorSpec()):
        super().__init__()
        self.spec = spec
        blocks = []
        in_ch = 3
        for out_ch in spec.channels:
            blocks.append(nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 4, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(out_ch),
                nn.LeakyReLU(LEAKY_SLOPE),
            ))
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(in_ch, 3, spec.final_extent, stride=1, padding=0, bias=True)

    def forward(self, x: torch.Tensor) -> DiscriminatorOutput:
        validate_image(x, spatial_divisor=self.spec.spatial_divisor, name="discriminator input")
        if x.shape[2] != self.spec.image_size or x.shape[3] != self.spec.image_size:
            raise ValueError(f"discriminator built for {self.spec.image_size}px inputs, "
                             f"got {x.shape[2]}x{x.shape[3]}")
        h = x
        phi = None
        for i, block in enumerate(self.blocks, start=1):
            h = block(h)
            if i == self.spec.perceptual_block:
                phi = h
        logits = self.head(h).flatten(1)
        return DiscriminatorOutput(logits=logits, probs=torch.softmax(logits, dim=1), phi=phi)


def init_params(module: nn.Module, seed: int) -> nn.Module:
    """Deterministic weight init: conv kernels N(0, 0.02^2), norm scale 1,
    shifts and biases 0."""
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            with torch.no_grad():
                m.weight.normal_(0.0, INIT_STD, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
            m.reset_running_stats()
    return module


def compose(x: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
    """Final output: input plus residual, clamped back into the pixel range."""
    validate_image(x, name="compose input")
    validate_residual(r)
    if x.shape != r.shape:
        raise ValueError(f"shape mismatch: image {tuple(x.shape)} vs residual {tuple(r.shape)}")
    return torch.clamp(x + r, -1.0, 1.0)


def generator_forward(gen: Generator, x: torch.Tensor) -> torch.Tensor:
    """Functional alias; the residual is returned unclamped."""
    return gen(x)


def discriminator_forward(disc: Discriminator, x: torch.Tensor) -> DiscriminatorOutput:
    return disc(x)
