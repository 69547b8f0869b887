"""Image I/O and the fixed-kernel differentiable operators used by the losses.

Images are float tensors in [0, 1] laid out channels-last, either ``(H, W, 3)``
or batched ``(N, H, W, 3)``. Every operator preserves the batch convention of
its input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

SOBEL_X = ((-1.0, 0.0, 1.0), (-2.0, 0.0, 2.0), (-1.0, 0.0, 1.0))
LAPLACIAN = ((0.0, 1.0, 0.0), (1.0, -4.0, 1.0), (0.0, 1.0, 0.0))
LUMA = (0.299, 0.587, 0.114)

CANNY_SIGMA = 1.0
CANNY_LOW = 0.1
CANNY_HIGH = 0.2
CANNY_SHARPNESS = 50.0
CANNY_EPS = 1e-6

HIST_BINS = 64
HIST_TAU = 0.02
HIST_RANGE = 3.0
HIST_EPS = 1e-6


class ImageFormatError(ValueError):
    """Raised when a file exists but cannot be decoded as an RGB raster."""


@dataclass(frozen=True)
class ColorHistogram:
    """Normalized ``(..., 3, h, h)`` log-chroma histogram (one plane per channel)."""

    bins: torch.Tensor

    @property
    def bin_count(self) -> int:
        return self.bins.shape[-1]


def load_image(path, dtype=torch.float32) -> torch.Tensor:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    try:
        with PILImage.open(path) as im:
            im.load()
            arr = _pil_to_array(im)
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageFormatError(f"cannot decode {path}: {exc}") from exc
    return torch.from_numpy(arr).to(dtype)


def _pil_to_array(im: PILImage.Image) -> np.ndarray:
    if im.mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(im, dtype=np.float64) / 65535.0
        return np.repeat(arr[..., None], 3, axis=-1)
    if im.mode != "RGB":
        im = im.convert("RGB")  # drops alpha, expands palette/gray
    return np.asarray(im, dtype=np.float64) / 255.0


def save_image(img: torch.Tensor, path) -> None:
    arr = img.detach().cpu().double().clamp(0, 1).numpy()
    arr = np.round(arr * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(arr, mode="RGB").save(path)


def to_nchw(img: torch.Tensor) -> tuple[torch.Tensor, bool]:
    """Return ``(N, C, H, W)`` view plus whether the input carried a batch axis."""
    if img.dim() == 3:
        return img.permute(2, 0, 1).unsqueeze(0), False
    if img.dim() == 4:
        return img.permute(0, 3, 1, 2), True
    raise ValueError(f"expected (H, W, C) or (N, H, W, C) image, got shape {tuple(img.shape)}")


def from_nchw(x: torch.Tensor, batched: bool) -> torch.Tensor:
    x = x.permute(0, 2, 3, 1)
    return x if batched else x[0]


def resize(img: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    h, w = int(size[0]), int(size[1])
    if h < 1 or w < 1:
        raise ValueError(f"resize target must be positive, got {size}")
    x, batched = to_nchw(img)
    if x.shape[-2:] == (h, w):
        return img
    y = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False, antialias=False)
    return from_nchw(y.clamp(0, 1), batched)


def _check_kernel_fit(x: torch.Tensor, k: int = 3) -> None:
    if x.shape[-2] < k or x.shape[-1] < k:
        raise ValueError(f"image {tuple(x.shape[-2:])} is smaller than the {k}x{k} kernel")


def _sobel_nchw(x: torch.Tensor) -> torch.Tensor:
    # Written as differences of neighbours so a constant image gives exact zeros.
    n, c, h, w = x.shape
    p = F.pad(x, (1, 1, 1, 1), mode="replicate")
    dx = p[..., 2:] - p[..., :-2]
    dy = p[..., 2:, :] - p[..., :-2, :]
    gx = dx[..., :-2, :] + 2 * dx[..., 1:-1, :] + dx[..., 2:, :]
    gy = dy[..., :-2] + 2 * dy[..., 1:-1] + dy[..., 2:]
    return torch.stack([gx, gy], dim=2).reshape(n, 2 * c, h, w)


def sobel(img: torch.Tensor) -> torch.Tensor:
    """Six-channel edge map ``(gx_R, gy_R, gx_G, gy_G, gx_B, gy_B)``."""
    x, batched = to_nchw(img)
    _check_kernel_fit(x)
    return from_nchw(_sobel_nchw(x), batched)


def laplacian(img: torch.Tensor) -> torch.Tensor:
    x, batched = to_nchw(img)
    _check_kernel_fit(x)
    p = F.pad(x, (1, 1, 1, 1), mode="replicate")
    mid = p[..., 1:-1, 1:-1]
    out = (
        (p[..., :-2, 1:-1] - mid) + (p[..., 2:, 1:-1] - mid)
        + (p[..., 1:-1, :-2] - mid) + (p[..., 1:-1, 2:] - mid)
    )
    return from_nchw(out, batched)


def gaussian_kernel(sigma: float, dtype=torch.float64) -> torch.Tensor:
    radius = max(1, math.ceil(3.0 * sigma))
    t = torch.arange(-radius, radius + 1, dtype=dtype)
    g = torch.exp(-0.5 * (t / sigma) ** 2)
    return g / g.sum()


def soft_canny(
    img: torch.Tensor,
    sigma: float = CANNY_SIGMA,
    low: float = CANNY_LOW,
    high: float = CANNY_HIGH,
    sharpness: float = CANNY_SHARPNESS,
    eps: float = CANNY_EPS,
) -> torch.Tensor:
    """Smooth relaxation of Canny: blur, Sobel magnitude, logistic double threshold.

    The high threshold is tested on the 3x3 max-pooled magnitude so a weak pixel
    next to a strong one survives, mimicking hysteresis.
    """
    if sigma <= 0 or sharpness <= 0:
        raise ValueError("sigma and sharpness must be positive")
    if not 0 <= low < high <= 1:
        raise ValueError(f"need 0 <= low < high <= 1, got low={low}, high={high}")
    x, batched = to_nchw(img)
    _check_kernel_fit(x)
    luma = torch.tensor(LUMA, dtype=x.dtype).view(1, 3, 1, 1)
    gray = (x * luma).sum(dim=1, keepdim=True)

    g = gaussian_kernel(sigma, x.dtype)
    r = g.numel() // 2
    gray = F.pad(gray, (r, r, 0, 0), mode="replicate")
    gray = F.conv2d(gray, g.view(1, 1, 1, -1))
    gray = F.pad(gray, (0, 0, r, r), mode="replicate")
    gray = F.conv2d(gray, g.view(1, 1, -1, 1))

    grad = _sobel_nchw(gray)
    mag = torch.sqrt(grad[:, :1] ** 2 + grad[:, 1:] ** 2 + eps)
    pooled = F.max_pool2d(F.pad(mag, (1, 1, 1, 1), mode="replicate"), 3, stride=1)
    edge = torch.sigmoid(sharpness * (mag - low)) * torch.sigmoid(sharpness * (pooled - high))
    return from_nchw(edge, batched)


def _log_chroma(x: torch.Tensor, eps: float) -> torch.Tensor:
    """``(N, 3, 2, P)`` log-chroma pairs; plane c holds (u_c, v_c)."""
    lg = torch.log(x + eps)
    r, g, b = lg[:, 0], lg[:, 1], lg[:, 2]
    planes = [
        torch.stack([r - g, r - b], dim=1),
        torch.stack([g - r, g - b], dim=1),
        torch.stack([b - r, b - g], dim=1),
    ]
    return torch.stack(planes, dim=1)


def color_histogram(
    img: torch.Tensor,
    h: int = HIST_BINS,
    tau: float = HIST_TAU,
    eps: float = HIST_EPS,
) -> ColorHistogram:
    """Differentiable RGB-uv histogram over ``[-3, 3]^2`` with inverse-quadratic kernels."""
    if h < 2:
        raise ValueError(f"bin count must be >= 2, got {h}")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    x, batched = to_nchw(img)
    n = x.shape[0]
    x = x.reshape(n, 3, -1)
    if x.shape[-1] == 0:
        raise ValueError("cannot histogram an empty image")

    weight = torch.sqrt((x**2).sum(dim=1) + eps)  # (N, P)
    uv = _log_chroma(x, eps)  # (N, 3, 2, P)
    centers = torch.linspace(-HIST_RANGE, HIST_RANGE, h, dtype=x.dtype)
    d = uv.unsqueeze(-1) - centers  # (N, 3, 2, P, h)
    k = 1.0 / (1.0 + (d / tau) ** 2)
    ku = k[:, :, 0] * weight[:, None, :, None]
    hist = torch.einsum("ncpi,ncpj->ncij", ku, k[:, :, 1])
    hist = hist / hist.sum(dim=(1, 2, 3), keepdim=True)
    return ColorHistogram(hist if batched else hist[0])


def hellinger(h1: ColorHistogram, h2: ColorHistogram) -> torch.Tensor:
    """Hellinger distance ``||sqrt(h1) - sqrt(h2)||_2 / sqrt(2)``, per batch item."""
    a, b = h1.bins, h2.bins
    if a.shape[-3:] != b.shape[-3:]:
        raise ValueError(f"histogram shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    diff = torch.sqrt(a) - torch.sqrt(b)
    return torch.linalg.vector_norm(diff, dim=(-3, -2, -1)) / math.sqrt(2.0)
