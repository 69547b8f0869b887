"""Vision condition module: style image -> encoder tokens -> projected context."""

from __future__ import annotations

import hashlib

import torch
import torch.nn.functional as F
from torch import nn

from .perceptual import TokenEncoder


class VisionLanguageProjector(nn.Module):
    """Tokenwise two-layer MLP with a GELU between the affine maps."""

    def __init__(self, d_img: int, d_hidden: int, d_ctx: int, seed: int = 0, zero: bool = False):
        super().__init__()
        for name, v in (("d_img", d_img), ("d_hidden", d_hidden), ("d_ctx", d_ctx)):
            if v < 1:
                raise ValueError(f"{name} must be >= 1, got {v}")
        self.d_img, self.d_hidden, self.d_ctx = d_img, d_hidden, d_ctx
        self.fc1 = nn.Linear(d_img, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_ctx)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for fc in (self.fc1, self.fc2):
                if zero:
                    fc.weight.zero_()
                else:
                    fc.weight.copy_(torch.randn(fc.weight.shape, generator=gen) * 0.02)
                fc.bias.zero_()
        self.version = 0

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != self.d_img:
            raise ValueError(f"token width {tokens.shape[-1]} != projector input width {self.d_img}")
        return self.fc2(F.gelu(self.fc1(tokens)))

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def bump(self) -> None:
        """Mark parameters as changed so cached embeddings are recomputed."""
        self.version += 1


def init_projector(d_img: int, d_hidden: int, d_ctx: int, seed: int) -> VisionLanguageProjector:
    return VisionLanguageProjector(d_img, d_hidden, d_ctx, seed=seed)


def project(p: VisionLanguageProjector, tokens: torch.Tensor) -> torch.Tensor:
    return p(tokens)


def image_digest(img: torch.Tensor) -> str:
    arr = img.detach().cpu().contiguous().numpy()
    h = hashlib.sha256(str((arr.dtype, arr.shape)).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


class VisionCondition(nn.Module):
    """Frozen encoder plus trainable projector, with per-style caching.

    Encoder tokens are cached by image digest. Projected embeddings are cached
    by ``(digest, projector.version)`` so a training step never sees a stale
    context.
    """

    prefix = "projector."

    def __init__(self, encoder: TokenEncoder, projector: VisionLanguageProjector):
        super().__init__()
        self.encoder = encoder
        self.projector = projector
        self._tokens: dict[str, torch.Tensor] = {}
        self._embeddings: dict[tuple, torch.Tensor] = {}

    def trainable(self) -> dict[str, nn.Parameter]:
        return {self.prefix + n: p for n, p in self.projector.named_parameters()}

    def bump(self) -> None:
        self.projector.bump()
        self._embeddings.clear()

    def forward(self, style: torch.Tensor) -> torch.Tensor:
        key = image_digest(style)
        if key not in self._tokens:
            with torch.no_grad():
                self._tokens[key] = self.encoder(style)
        ck = (key, self.projector.version, torch.is_grad_enabled())
        if ck not in self._embeddings:
            self._embeddings[ck] = self.projector(self._tokens[key])
        return self._embeddings[ck]


class LearnedCondition(nn.Module):
    """Free ``T x D_ctx`` embedding that ignores the style image (ablation arm)."""

    prefix = "embedding."

    def __init__(self, num_tokens: int, d_ctx: int, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.weight = nn.Parameter(torch.randn(num_tokens, d_ctx, generator=gen) * 0.02)

    def trainable(self) -> dict[str, nn.Parameter]:
        return {self.prefix + "weight": self.weight}

    def bump(self) -> None:
        pass

    def forward(self, style: torch.Tensor) -> torch.Tensor:
        return self.weight


def encode_style(encoder: TokenEncoder, p: VisionLanguageProjector, style: torch.Tensor) -> torch.Tensor:
    return project(p, encoder(style))
