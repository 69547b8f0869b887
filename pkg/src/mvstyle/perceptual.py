"""Frozen feature extractors: a perceptual hierarchy for the losses and a token
encoder for style conditioning and the structure metric.

Real pre-trained networks (VGG-19, CLIP, DINO) plug in by subclassing
:class:`PerceptualExtractor` / :class:`TokenEncoder`. The toy implementations
here are seeded random networks small enough for CPU tests.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .imaging import resize, to_nchw

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
LAYERS = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class FeatureMap:
    data: torch.Tensor  # (N, C, H', W')
    layer: int


@dataclass(frozen=True)
class GramMatrix:
    data: torch.Tensor  # (N, C, C), unnormalized
    layer: int
    normalizer: int

    @property
    def normalized(self) -> torch.Tensor:
        return self.data / self.normalizer


@dataclass(frozen=True)
class EncoderProfile:
    name: str
    num_local: int
    width: int
    resolution: int

    @property
    def num_tokens(self) -> int:
        return self.num_local + 1


# ViT-H/14-style CLIP encoder: 16x16 patch grid at 224px plus one global token.
CLIP_REFERENCE = EncoderProfile("clip-vit-h-14", num_local=256, width=1280, resolution=224)


def _freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


class PerceptualExtractor(nn.Module, abc.ABC):
    """Maps ``[0, 1]`` images to post-ReLU features at taps ``1..5``."""

    mean: torch.Tensor
    std: torch.Tensor

    def __init__(self, mean=IMAGENET_MEAN, std=IMAGENET_STD):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1))

    @abc.abstractmethod
    def taps(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        """Run normalized NCHW input, returning every tap keyed by layer index."""

    def forward(self, img: torch.Tensor, layers=LAYERS) -> list[FeatureMap]:
        layers = sorted(set(layers))
        bad = [l for l in layers if l not in LAYERS]
        if bad:
            raise ValueError(f"unknown layer index {bad}; expected a subset of {LAYERS}")
        x, _ = to_nchw(img)
        x = (x - self.mean.to(x)) / self.std.to(x)
        feats = self.taps(x)
        return [FeatureMap(feats[l], l) for l in layers]


class ToyExtractor(PerceptualExtractor):
    """Five conv+ReLU blocks with seeded He-normal weights.

    With the default ``kernel_size=3, stride=2`` tap ``l`` of a 32x32 input is
    ``32 / 2**l`` pixels wide. ``kernel_size=1, stride=1`` gives a pointwise
    hierarchy whose features permute with the pixels.

    ``feature_scale`` multiplies every tap. The default 0.1 puts the Gram style
    term in the range the reference loss weights expect (about 1e-4), so no
    single term swamps the weighted total.
    """

    def __init__(self, channels=(8, 16, 16, 32, 32), kernel_size=3, stride=2, feature_scale=0.1, seed=0):
        super().__init__()
        self.feature_scale = feature_scale
        gen = torch.Generator().manual_seed(seed)
        self.stride = stride
        self.padding = kernel_size // 2
        weights, biases = [], []
        c_in = 3
        for c_out in channels:
            fan_in = c_in * kernel_size * kernel_size
            w = torch.randn(c_out, c_in, kernel_size, kernel_size, generator=gen) * (2.0 / fan_in) ** 0.5
            weights.append(nn.Parameter(w))
            biases.append(nn.Parameter(torch.randn(c_out, generator=gen) * 0.1))
            c_in = c_out
        self.weights = nn.ParameterList(weights)
        self.biases = nn.ParameterList(biases)
        self.channels = tuple(channels)
        _freeze(self)

    def taps(self, x):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            x = F.relu(F.conv2d(x, w.to(x), b.to(x), stride=self.stride, padding=self.padding))
            out[i] = x * self.feature_scale
        return out


def extract_features(extractor: PerceptualExtractor, img: torch.Tensor, layers=LAYERS) -> list[FeatureMap]:
    return extractor(img, layers)


def gram(f: FeatureMap) -> GramMatrix:
    x = f.data
    if x.dim() == 3:
        x = x.unsqueeze(0)
    n, c, h, w = x.shape
    flat = x.reshape(n, c, h * w)
    g = flat @ flat.transpose(1, 2)
    return GramMatrix(g if f.data.dim() == 4 else g[0], f.layer, c * h * w)


class TokenEncoder(nn.Module, abc.ABC):
    """Image to ``(N, T, D)`` tokens: global token first, then local tokens row-major."""

    profile: EncoderProfile

    @property
    def num_tokens(self) -> int:
        return self.profile.num_tokens

    @property
    def width(self) -> int:
        return self.profile.width

    @abc.abstractmethod
    def tokens(self, x: torch.Tensor) -> torch.Tensor:
        """Encode an NCHW batch already at the native resolution."""

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        r = self.profile.resolution
        img = resize(img, (r, r))
        x, batched = to_nchw(img)
        t = self.tokens(x)
        return t if batched else t[0]


class ToyTokenEncoder(TokenEncoder):
    """Random conv features average-pooled over a ``grid x grid`` patch layout.

    The global token is the mean of the local ones, so a constant image yields
    identical tokens everywhere.
    """

    def __init__(self, grid=4, width=16, hidden=24, resolution=32, seed=0):
        super().__init__()
        if resolution % grid:
            raise ValueError("resolution must be a multiple of the patch grid")
        self.profile = EncoderProfile("toy-tokens", grid * grid, width, resolution)
        self.grid = grid
        gen = torch.Generator().manual_seed(seed)
        self.conv = nn.Parameter(torch.randn(hidden, 3, 3, 3, generator=gen) * (2.0 / 27) ** 0.5)
        self.conv_bias = nn.Parameter(torch.randn(hidden, generator=gen) * 0.1)
        self.embed = nn.Parameter(torch.randn(width, hidden, generator=gen) / hidden**0.5)
        _freeze(self)

    def tokens(self, x):
        x = F.pad(x, (1, 1, 1, 1), mode="replicate")
        f = F.relu(F.conv2d(x, self.conv.to(x), self.conv_bias.to(x)))
        f = F.adaptive_avg_pool2d(f, self.grid)  # (N, hidden, g, g)
        local = f.flatten(2).transpose(1, 2) @ self.embed.to(x).T  # (N, g*g, D)
        glob = local.mean(dim=1, keepdim=True)
        return torch.cat([glob, local], dim=1)


def encode_tokens(encoder: TokenEncoder, img: torch.Tensor) -> torch.Tensor:
    return encoder(img)
