"""Evaluation metrics: colour histogram distance, token self-similarity structure
distance, and forward-flow multi-view consistency."""

from __future__ import annotations

import abc
import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from . import imaging
from .losses import color_alignment_loss
from .perceptual import TokenEncoder


class SceneMismatchError(ValueError):
    def __init__(self, missing_content: list[str], missing_stylized: list[str]):
        self.missing_content = missing_content
        self.missing_stylized = missing_stylized
        lines = [f"  no content image for stylized {n}" for n in missing_content]
        lines += [f"  no stylized image for content {n}" for n in missing_stylized]
        super().__init__("unmatched filenames:\n" + "\n".join(lines))


def chd(stylized: torch.Tensor, style: torch.Tensor) -> float:
    with torch.no_grad():
        return float(color_alignment_loss(stylized, style))


def self_similarity(local_tokens: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Cosine similarity between every pair of local tokens ``(T', D)``."""
    norms = local_tokens.norm(dim=-1, keepdim=True)
    unit = local_tokens / norms.clamp_min(eps)
    s = unit @ unit.transpose(-2, -1)
    zero = (norms[..., 0] <= eps)
    if zero.any():
        s = s.masked_fill(zero[..., :, None] | zero[..., None, :], 0.0)
    eye = torch.eye(s.shape[-1], dtype=torch.bool)
    return s.masked_fill(eye, 1.0)


def dsd_from_tokens(a: torch.Tensor, b: torch.Tensor) -> float:
    """100 x mean squared difference of self-similarity, global token (index 0) dropped."""
    sa, sb = self_similarity(a[..., 1:, :]), self_similarity(b[..., 1:, :])
    return float(100.0 * ((sa - sb) ** 2).mean())


def dsd(stylized: torch.Tensor, content: torch.Tensor, encoder: TokenEncoder) -> float:
    with torch.no_grad():
        return dsd_from_tokens(encoder(stylized), encoder(content))


class FlowEstimator(abc.ABC):
    @abc.abstractmethod
    def estimate(self, a: torch.Tensor, b: torch.Tensor) -> np.ndarray:
        """Forward flow ``(H, W, 2)`` of ``(dx, dy)`` pixel displacements from ``a`` to ``b``."""

    def __call__(self, a, b):
        return self.estimate(a, b)


class BlockMatchingFlow(FlowEstimator):
    """Exhaustive integer block matching with mean absolute difference.

    The cost of a displacement only counts patch pixels that fall inside both
    images, so a true translation scores exactly zero up to the border.
    Displacements are scanned smallest-first; ties keep the smaller one.
    """

    def __init__(self, patch: int = 8, radius: int = 8):
        self.patch, self.radius = patch, radius
        r = radius
        d = [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
        self.displacements = sorted(d, key=lambda t: (t[0] ** 2 + t[1] ** 2, t[1], t[0]))

    def estimate(self, a, b):
        a = _as_array(a)
        b = _as_array(b)
        if a.shape != b.shape:
            raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
        h, w, _ = a.shape
        r = self.radius
        bp = np.pad(b, ((r, r), (r, r), (0, 0)))
        inside = np.pad(np.ones((h, w)), r)
        best = np.full((h, w), np.inf)
        flow = np.zeros((h, w, 2))
        for dx, dy in self.displacements:
            shifted = bp[r + dy : r + dy + h, r + dx : r + dx + w]
            valid = inside[r + dy : r + dy + h, r + dx : r + dx + w]
            diff = np.abs(a - shifted).sum(axis=-1) * valid
            num = ndimage.uniform_filter(diff, self.patch, mode="constant")
            den = ndimage.uniform_filter(valid, self.patch, mode="constant")
            cost = np.where(den > 1e-9, num / np.maximum(den, 1e-9), np.inf)
            better = cost < best - 1e-12
            best = np.where(better, cost, best)
            flow[better] = (dx, dy)
        return flow


def _as_array(img) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().double().numpy()
    return np.asarray(img, dtype=np.float64)


def flow_consistency(est: FlowEstimator, content_pair, stylized_pair) -> float:
    shapes = {tuple(np.shape(x)) for x in (*content_pair, *stylized_pair)}
    if len(shapes) != 1:
        raise ValueError(f"all four images must share a size, got {sorted(shapes)}")
    f_content = est(*content_pair)
    f_stylized = est(*stylized_pair)
    return float(np.abs(f_content - f_stylized).mean())


@dataclass
class MetricsReport:
    scene: str
    style: str
    names: list[str] = field(default_factory=list)
    chd: list[float] = field(default_factory=list)
    dsd: list[float] = field(default_factory=list)
    pairs: list[tuple[str, str]] = field(default_factory=list)
    flow_l1: list[float] = field(default_factory=list)

    @property
    def mean_chd(self) -> float:
        return float(np.mean(self.chd)) if self.chd else float("nan")

    @property
    def mean_dsd(self) -> float:
        return float(np.mean(self.dsd)) if self.dsd else float("nan")

    @property
    def mean_flow_l1(self) -> float:
        return float(np.mean(self.flow_l1)) if self.flow_l1 else float("nan")

    def to_dict(self) -> dict:
        return {
            "scene": self.scene,
            "style": self.style,
            "images": [{"name": n, "chd": c, "dsd": d} for n, c, d in zip(self.names, self.chd, self.dsd)],
            "pairs": [{"first": a, "second": b, "flow_l1": f} for (a, b), f in zip(self.pairs, self.flow_l1)],
            # No pairs (single view) gives a NaN mean; JSON has no NaN, so it becomes null.
            "aggregate": {
                k: (None if np.isnan(v) else v)
                for k, v in (("chd", self.mean_chd), ("dsd", self.mean_dsd), ("flow_l1", self.mean_flow_l1))
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf)
        wr.writerow(["kind", "name", "chd", "dsd", "flow_l1"])
        for n, c, d in zip(self.names, self.chd, self.dsd):
            wr.writerow(["image", n, repr(c), repr(d), ""])
        for (a, b), f in zip(self.pairs, self.flow_l1):
            wr.writerow(["pair", f"{a}|{b}", "", "", repr(f)])
        wr.writerow(["mean", "", repr(self.mean_chd), repr(self.mean_dsd), repr(self.mean_flow_l1)])
        return buf.getvalue()

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        pj, pc = out / "report.json", out / "report.csv"
        pj.write_text(self.to_json())
        pc.write_text(self.to_csv())
        return pj, pc


IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


def list_images(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def evaluate_images(
    stylized: dict[str, torch.Tensor],
    content: dict[str, torch.Tensor],
    style: torch.Tensor,
    encoder: TokenEncoder,
    estimator: FlowEstimator,
    scene: str = "",
    style_name: str = "",
) -> MetricsReport:
    """Per-image CHD/DSD and consecutive-pair flow L1 in sorted name order."""
    missing_c = sorted(set(stylized) - set(content))
    missing_s = sorted(set(content) - set(stylized))
    if missing_c or missing_s:
        raise SceneMismatchError(missing_c, missing_s)
    if not stylized:
        raise ValueError("scene has no images")
    names = sorted(stylized)
    content = {n: imaging.resize(content[n], stylized[n].shape[:2]) for n in names}
    report = MetricsReport(scene, style_name)
    for n in names:
        s, c = stylized[n], content[n]
        report.names.append(n)
        report.chd.append(chd(s, style))
        report.dsd.append(dsd(s, c, encoder))
    for a, b in zip(names, names[1:]):
        report.pairs.append((a, b))
        report.flow_l1.append(
            flow_consistency(estimator, (content[a], content[b]), (stylized[a], stylized[b]))
        )
    return report


def evaluate_scene(stylized_dir, content_dir, style, encoder, estimator, style_name: str = "") -> MetricsReport:
    stylized = {p.name: imaging.load_image(p) for p in list_images(stylized_dir)}
    content = {p.name: imaging.load_image(p) for p in list_images(content_dir)}
    return evaluate_images(
        stylized, content, style, encoder, estimator, scene=Path(content_dir).name, style_name=style_name
    )
