"""Synthetic multi-view scenes and style images for desk-scale runs."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .backbone import ToyBackbone
from .imaging import save_image
from .perceptual import ToyExtractor, ToyTokenEncoder


def canvas(height: int, width: int, seed: int = 0) -> np.ndarray:
    """Smooth colour field with a few hard-edged rectangles and discs."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.zeros((height, width, 3))
    for c in range(3):
        fx, fy = rng.uniform(0.02, 0.12, size=2)
        ph = rng.uniform(0, 2 * np.pi)
        img[..., c] = 0.5 + 0.2 * np.sin(fx * x + fy * y + ph)
    for _ in range(6):
        h, w = rng.integers(4, max(5, height // 3), size=2)
        top, left = rng.integers(0, height - h), rng.integers(0, width - w)
        img[top : top + h, left : left + w] = rng.uniform(0.05, 0.95, size=3)
    for _ in range(3):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        r = rng.uniform(3, max(4, height / 6))
        img[(y - cy) ** 2 + (x - cx) ** 2 < r * r] = rng.uniform(0.05, 0.95, size=3)
    return np.clip(img, 0, 1)


def scene_views(n: int = 4, size: int = 32, shift: int = 3, seed: int = 0) -> list[torch.Tensor]:
    """``n`` views of one canvas, each panned ``shift`` pixels left of the previous.

    Content at column ``x`` in view ``i`` sits at column ``x + shift`` in view
    ``i + 1``, so the true forward flow is ``(shift, 0)``.
    """
    big = canvas(size + shift * (n - 1), size + shift * (n - 1), seed)
    x0 = shift * (n - 1)
    views = []
    for i in range(n):
        left = x0 - i * shift
        views.append(torch.from_numpy(big[: size, left : left + size].copy()).float())
    return views


def style_image(size: int = 32, seed: int = 1) -> torch.Tensor:
    """Warm channel-mixed tint of an unrelated canvas with diagonal stripes.

    A channel mix keeps the target palette reachable by a colour transform of
    the content, so toy runs show real progress on the colour term.
    """
    base = canvas(size, size, seed)
    tint = np.array([[0.9, 0.4, 0.0], [0.15, 0.45, 0.1], [0.05, 0.1, 0.35]])
    img = base @ tint.T + np.array([0.1, 0.02, 0.12])
    y, x = np.mgrid[0:size, 0:size]
    img = img + 0.08 * np.sin(0.8 * (x + y))[..., None]
    return torch.from_numpy(np.clip(img, 0, 1)).float()


def write_scene(out_dir, n: int = 4, size: int = 32, seed: int = 0, style_seed: int = 1) -> tuple[Path, Path]:
    """Write ``view_XX.png`` files under ``out_dir/scene`` and ``out_dir/style.png``."""
    out = Path(out_dir)
    scene = out / "scene"
    scene.mkdir(parents=True, exist_ok=True)
    for i, v in enumerate(scene_views(n, size, seed=seed)):
        save_image(v, scene / f"view_{i:02d}.png")
    style_path = out / "style.png"
    save_image(style_image(size, style_seed), style_path)
    return scene, style_path


def toy_models(seed: int = 0):
    """Backbone, token encoder and perceptual extractor for the toy profile."""
    return ToyBackbone(seed=seed), ToyTokenEncoder(seed=seed), ToyExtractor(seed=seed)
