"""Content, style, structure and colour-alignment losses and their weighted sum.

All losses take channels-last images, batched or not. Batched inputs reduce
by the mean over batch items so a loss value does not depend on batch size.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from . import imaging
from .perceptual import PerceptualExtractor, gram

CONTENT_LAYERS = (3, 4, 5)
STYLE_LAYERS = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class LossWeights:
    content: float = 1e3
    style: float = 1e8
    structure: float = 2e4
    color_alignment: float = 1e4

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")


@dataclass
class LossBreakdown:
    content: torch.Tensor
    style: torch.Tensor
    structure: torch.Tensor
    color_alignment: torch.Tensor
    total: torch.Tensor

    def record(self, step: int | None = None) -> dict:
        rec = {} if step is None else {"step": step}
        for k in ("content", "style", "structure", "color_alignment", "total"):
            rec[k] = float(getattr(self, k).detach())
        return rec


def smooth_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    x = (a - b).abs()
    return torch.where(x < 1, 0.5 * x**2, x - 0.5).mean()


def content_loss(stylized, content, extractor: PerceptualExtractor) -> torch.Tensor:
    fs = extractor(stylized, CONTENT_LAYERS)
    fc = extractor(content, CONTENT_LAYERS)
    return sum(smooth_l1(a.data, b.data) for a, b in zip(fs, fc))


def style_loss(stylized, style, extractor: PerceptualExtractor) -> torch.Tensor:
    """Sum over taps 1..5 of ``||G(stylized)/N - G(style)/N||_F^2``, N = C*H*W.

    The target is the style image. A single style image broadcasts against a
    batch of stylized images.
    """
    fs = extractor(stylized, STYLE_LAYERS)
    ft = extractor(style, STYLE_LAYERS)
    total = 0.0
    for a, b in zip(fs, ft):
        ga, gb = gram(a).normalized, gram(b).normalized
        total = total + ((ga - gb) ** 2).sum(dim=(-2, -1)).mean()
    return total


def structure_loss(stylized, content) -> torch.Tensor:
    if stylized.shape != content.shape:
        raise ValueError(f"shape mismatch: {tuple(stylized.shape)} vs {tuple(content.shape)}")
    return (
        smooth_l1(imaging.sobel(stylized), imaging.sobel(content))
        + smooth_l1(imaging.laplacian(stylized), imaging.laplacian(content))
        + smooth_l1(imaging.soft_canny(stylized), imaging.soft_canny(content))
    )


def color_alignment_loss(stylized, style, h: int = imaging.HIST_BINS, tau: float = imaging.HIST_TAU) -> torch.Tensor:
    d = imaging.hellinger(imaging.color_histogram(stylized, h, tau), imaging.color_histogram(style, h, tau))
    return d.mean()


def combine(content, style, structure, color_alignment, w: LossWeights) -> LossBreakdown:
    """Weighted sum, evaluated in float64 so it matches a host-side recomputation exactly."""
    parts = [torch.as_tensor(t, dtype=torch.float64) for t in (content, style, structure, color_alignment)]
    total = (
        w.content * parts[0]
        + w.style * parts[1]
        + w.structure * parts[2]
        + w.color_alignment * parts[3]
    )
    return LossBreakdown(content, style, structure, color_alignment, total)


def total_loss(stylized, content, style, w: LossWeights, extractor: PerceptualExtractor) -> LossBreakdown:
    return combine(
        content_loss(stylized, content, extractor),
        style_loss(stylized, style, extractor),
        structure_loss(stylized, content),
        color_alignment_loss(stylized, style),
        w,
    )


def recompute_total(record: dict, w: LossWeights) -> float:
    return (
        w.content * record["content"]
        + w.style * record["style"]
        + w.structure * record["structure"]
        + w.color_alignment * record["color_alignment"]
    )
