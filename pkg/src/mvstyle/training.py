"""Single-scene training of LoRA adapters and the condition projector."""

from __future__ import annotations

import configparser
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from . import imaging
from .backbone import (
    GenerativeBackbone,
    inject_lora,
    load_archive,
    save_archive,
)
from .condition import LearnedCondition, VisionCondition, VisionLanguageProjector, image_digest
from .imaging import ImageFormatError, load_image, resize
from .losses import LossWeights, total_loss
from .metrics import list_images
from .perceptual import PerceptualExtractor, TokenEncoder

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class ConfigError(ValueError):
    """Bad configuration or inputs; ``field`` names the offending setting."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, record: dict):
        self.step, self.record = step, record
        super().__init__(f"non-finite loss at step {step}: {record}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 3
    steps: int = 200
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    rank: int = 8
    alpha: float = 8.0
    lora_filter: str = "all"
    resolution: int = 256
    profile: str = "toy-v1"
    condition: str = "vision"
    checkpoint_every: int = 0
    max_grad_norm: float = 0.0  # 0 disables clipping

    def __post_init__(self):
        for name in ("lr", "batch_size", "rank", "alpha", "resolution"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and v > 0):
                raise ConfigError(name, f"must be positive, got {v!r}")
        if self.steps < 0:
            raise ConfigError("steps", f"must be >= 0, got {self.steps}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every", "must be >= 0")
        if self.max_grad_norm < 0:
            raise ConfigError("max_grad_norm", "must be >= 0")
        if self.condition not in ("vision", "learned"):
            raise ConfigError("condition", f"expected 'vision' or 'learned', got {self.condition!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        w = d.pop("weights", {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown setting")
        try:
            weights = LossWeights(**w)
        except ValueError as exc:
            raise ConfigError("weights", str(exc)) from exc
        except TypeError as exc:
            raise ConfigError("weights", str(exc)) from exc
        return cls(weights=weights, **d)

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        w = changes.pop("weights", None)
        d.update(changes)
        if w is not None:
            d["weights"] = asdict(w) if isinstance(w, LossWeights) else w
        return TrainConfig.from_dict(d)


_INT_FIELDS = {"batch_size", "steps", "seed", "rank", "resolution", "checkpoint_every"}
_FLOAT_FIELDS = {"lr", "alpha", "max_grad_norm"}
_WEIGHT_KEYS = {
    "lambda_content": "content",
    "lambda_style": "style",
    "lambda_structure": "structure",
    "lambda_ca": "color_alignment",
}


def load_config(path) -> TrainConfig:
    """Read an INI file with ``[train]`` and optional ``[loss]`` sections."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"file not found: {path}")
    cp = configparser.ConfigParser()
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError("config", str(exc)) from exc
    d: dict = {}
    if cp.has_section("train"):
        for k, v in cp.items("train"):
            d[k] = _parse_field(k, v)
    if cp.has_section("loss"):
        w = {}
        for k, v in cp.items("loss"):
            if k not in _WEIGHT_KEYS:
                raise ConfigError(f"loss.{k}", "unknown loss weight")
            w[_WEIGHT_KEYS[k]] = _parse_number(f"loss.{k}", v, float)
        d["weights"] = w
    return TrainConfig.from_dict(d)


def _parse_number(name, v, kind):
    try:
        return kind(float(v)) if kind is int and float(v).is_integer() else kind(v)
    except ValueError:
        raise ConfigError(name, f"expected a number, got {v!r}") from None


def _parse_field(k: str, v: str):
    if k in _INT_FIELDS:
        return _parse_number(k, v, int)
    if k in _FLOAT_FIELDS:
        return _parse_number(k, v, float)
    return v.strip()


def write_config(cfg: TrainConfig, path) -> None:
    cp = configparser.ConfigParser()
    d = cfg.to_dict()
    w = d.pop("weights")
    cp["train"] = {k: str(v) for k, v in d.items()}
    inv = {v: k for k, v in _WEIGHT_KEYS.items()}
    cp["loss"] = {inv[k]: repr(v) for k, v in w.items()}
    with open(path, "w") as fh:
        cp.write(fh)


def lora_filter(spec: str) -> Callable[[str], bool]:
    """``all`` or a comma-separated list of layer-name prefixes."""
    if spec == "all":
        return lambda name: True
    prefixes = tuple(p.strip() for p in spec.split(",") if p.strip())
    return lambda name: name.startswith(prefixes)


class SceneDataset:
    """Sorted content views of one scene plus the reference style image."""

    def __init__(self, paths: list[Path], style_path: Path, resolution: int):
        self.paths = list(paths)
        self.style_path = Path(style_path)
        self.resolution = resolution
        self._load = lru_cache(maxsize=None)(self._read)

    def _read(self, i: int) -> torch.Tensor:
        r = self.resolution
        return resize(load_image(self.paths[i]), (r, r))

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, i: int) -> torch.Tensor:
        return self._load(i)

    def batch(self, indices) -> torch.Tensor:
        return torch.stack([self[i] for i in indices])

    @property
    def style(self) -> torch.Tensor:
        r = self.resolution
        return resize(load_image(self.style_path), (r, r))


def build_dataset(scene_dir, style_path, resolution: int) -> SceneDataset:
    scene_dir, style_path = Path(scene_dir), Path(style_path)
    if not scene_dir.is_dir():
        raise ConfigError("scene", f"not a directory: {scene_dir}")
    paths = list_images(scene_dir)
    if not paths:
        raise ConfigError("scene", f"no PNG/JPEG images in {scene_dir}")
    for p in [*paths, style_path]:
        try:
            load_image(p)
        except FileNotFoundError as exc:
            raise ConfigError("style" if p == style_path else "scene", str(exc)) from exc
        except ImageFormatError as exc:
            raise ConfigError("style" if p == style_path else "scene", f"unreadable image {p}: {exc}") from exc
    return SceneDataset(paths, style_path, resolution)


class EpochSampler:
    """Batches drawn from a stream of seeded per-epoch permutations.

    The batch for a step depends only on ``(seed, step)``, so resuming needs no
    sampler state.
    """

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n, self.batch_size, self.seed = n, batch_size, seed

    def permutation(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(self.n)

    def batch(self, step: int) -> list[int]:
        start = step * self.batch_size
        out = []
        for pos in range(start, start + self.batch_size):
            epoch, off = divmod(pos, self.n)
            out.append(int(self.permutation(epoch)[off]))
        return out


def build_condition(cfg: TrainConfig, encoder: TokenEncoder, backbone: GenerativeBackbone):
    d_ctx = backbone.profile.context_width
    if cfg.condition == "learned":
        return LearnedCondition(encoder.num_tokens, d_ctx, seed=cfg.seed)
    projector = VisionLanguageProjector(encoder.width, 2 * encoder.width, d_ctx, seed=cfg.seed)
    return VisionCondition(encoder, projector)


def trainable_parameters(backbone: GenerativeBackbone, condition=None) -> dict[str, nn.Parameter]:
    params = {}
    for host, a in sorted(backbone.adapters().items()):
        params[f"lora.{host}.A"] = a.A
        params[f"lora.{host}.B"] = a.B
    if condition is not None:
        params.update(condition.trainable())
    return params


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray]
    step: int
    config: TrainConfig
    meta: dict = field(default_factory=dict)
    log: list[dict] = field(default_factory=list)

    def save(self, path) -> None:
        arrays = dict(self.params)
        arrays.update({f"optim.{k}": v for k, v in self.optimizer.items()})
        meta = dict(self.meta, step=self.step, config=self.config.to_dict(), log=self.log)
        save_archive(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        arrays, meta = load_archive(path)
        meta = dict(meta)
        step = meta.pop("step")
        cfg = TrainConfig.from_dict(meta.pop("config"))
        history = meta.pop("log", [])
        params = {k: v for k, v in arrays.items() if not k.startswith("optim.")}
        optim = {k[len("optim."):]: v for k, v in arrays.items() if k.startswith("optim.")}
        return cls(params, optim, step, cfg, meta, history)


def _ensure_adapters(backbone: GenerativeBackbone, cfg: TrainConfig) -> None:
    if not backbone.adapters():
        inject_lora(backbone, cfg.rank, cfg.alpha, lora_filter(cfg.lora_filter), seed=cfg.seed)


def apply_checkpoint(ck: Checkpoint, backbone: GenerativeBackbone, condition) -> None:
    """Load adapter and condition tensors from ``ck`` into live modules."""
    if ck.meta.get("profile") != backbone.profile.id:
        raise ConfigError(
            "profile", f"checkpoint profile {ck.meta.get('profile')!r} != backbone profile {backbone.profile.id!r}"
        )
    _ensure_adapters(backbone, ck.config)
    params = trainable_parameters(backbone, condition)
    missing = sorted(set(params) ^ set(ck.params))
    if missing:
        raise ConfigError("checkpoint", f"parameter names do not match: {missing[:5]}")
    with torch.no_grad():
        for name, p in params.items():
            p.copy_(torch.from_numpy(ck.params[name]).to(p.dtype))
    condition.bump()


class _Session:
    def __init__(self, ds, cfg, backbone, extractor, condition, style):
        self.ds, self.cfg, self.backbone, self.extractor = ds, cfg, backbone, extractor
        self.condition, self.style = condition, style
        self.params = trainable_parameters(backbone, condition)
        self.optimizer = torch.optim.Adam(
            list(self.params.values()), lr=cfg.lr, betas=ADAM_BETAS, eps=ADAM_EPS
        )
        self.sampler = EpochSampler(len(ds), cfg.batch_size, cfg.seed)

    def optimizer_state(self) -> dict[str, np.ndarray]:
        out = {}
        for name, p in self.params.items():
            st = self.optimizer.state.get(p)
            if not st:
                continue
            out[f"{name}.exp_avg"] = st["exp_avg"].detach().numpy().copy()
            out[f"{name}.exp_avg_sq"] = st["exp_avg_sq"].detach().numpy().copy()
            out[f"{name}.step"] = np.array(float(st["step"]), dtype=np.float32)
        return out

    def load_optimizer_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if f"{name}.exp_avg" not in state:
                continue
            self.optimizer.state[p] = {
                "step": torch.tensor(float(np.ravel(state[f"{name}.step"])[0]), dtype=torch.float32),
                "exp_avg": torch.from_numpy(np.array(state[f"{name}.exp_avg"])).to(p.dtype),
                "exp_avg_sq": torch.from_numpy(np.array(state[f"{name}.exp_avg_sq"])).to(p.dtype),
            }

    def checkpoint(self, step: int, meta: dict, history: list[dict]) -> Checkpoint:
        params = {k: v.detach().cpu().numpy().copy() for k, v in self.params.items()}
        return Checkpoint(params, self.optimizer_state(), step, self.cfg, dict(meta), list(history))

    def step(self, step: int) -> dict:
        cfg = self.cfg
        content = self.ds.batch(self.sampler.batch(step))
        cond = self.condition(self.style)
        out = self.backbone.stylize(content, cond)
        br = total_loss(out, content, self.style, cfg.weights, self.extractor)
        rec = br.record(step)
        if not all(math.isfinite(v) for v in rec.values()):
            raise TrainingDivergedError(step, rec)
        self.optimizer.zero_grad(set_to_none=True)
        br.total.backward()
        if cfg.max_grad_norm > 0:
            torch.nn.utils.clip_grad_norm_(list(self.params.values()), cfg.max_grad_norm)
        self.optimizer.step()
        self.condition.bump()
        return rec


def _meta(cfg: TrainConfig, backbone, ds, condition) -> dict:
    return {
        "profile": backbone.profile.id,
        "rank": cfg.rank,
        "alpha": cfg.alpha,
        "lora_filter": cfg.lora_filter,
        "seed": cfg.seed,
        "weights": asdict(cfg.weights),
        "condition": cfg.condition,
        "canny": {
            "sigma": imaging.CANNY_SIGMA,
            "low": imaging.CANNY_LOW,
            "high": imaging.CANNY_HIGH,
            "sharpness": imaging.CANNY_SHARPNESS,
        },
        "histogram": {"bins": imaging.HIST_BINS, "tau": imaging.HIST_TAU},
        "style_path": str(ds.style_path),
        "style_digest": image_digest(ds.style),
        "rng": {"sampler": "numpy.default_rng([seed, epoch]).permutation"},
    }


def _run(session: _Session, start: int, stop: int, meta: dict, history: list[dict], out_dir, log_path) -> Checkpoint:
    backbone, cfg = session.backbone, session.cfg
    base_before = backbone.base_digest()
    fh = open(log_path, "a") if log_path else None
    try:
        for step in range(start, stop):
            rec = session.step(step)
            history.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
            if step % 50 == 0:
                log.info("step %d total %.6g", step, rec["total"])
            done = step + 1
            if out_dir and cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < stop:
                session.checkpoint(done, meta, history).save(Path(out_dir) / f"checkpoint_{done:06d}.npz")
    finally:
        if fh:
            fh.close()
    if backbone.base_digest() != base_before:
        raise AssertionError("frozen base parameters changed during training")
    ck = session.checkpoint(stop, meta, history)
    if out_dir:
        ck.save(Path(out_dir) / "checkpoint.npz")
    return ck


def train(
    ds: SceneDataset,
    cfg: TrainConfig,
    backbone: GenerativeBackbone,
    encoder: TokenEncoder,
    extractor: PerceptualExtractor,
    *,
    condition=None,
    out_dir=None,
    log_path=None,
) -> Checkpoint:
    """Optimize adapters and condition parameters for ``cfg.steps`` steps."""
    _check_resolution(cfg, backbone)
    _ensure_adapters(backbone, cfg)
    if condition is None:
        condition = build_condition(cfg, encoder, backbone)
    style = ds.style
    session = _Session(ds, cfg, backbone, extractor, condition, style)
    meta = _meta(cfg, backbone, ds, condition)
    return _run(session, 0, cfg.steps, meta, [], out_dir, log_path)


def resume(
    ck: Checkpoint,
    ds: SceneDataset,
    backbone: GenerativeBackbone,
    encoder: TokenEncoder,
    extractor: PerceptualExtractor,
    *,
    steps: int | None = None,
    condition=None,
    out_dir=None,
    log_path=None,
) -> Checkpoint:
    """Continue ``ck`` for ``steps`` more steps (default: up to ``ck.config.steps``)."""
    cfg = ck.config
    if ck.meta.get("profile") != backbone.profile.id:
        raise ConfigError(
            "profile", f"checkpoint profile {ck.meta.get('profile')!r} != backbone profile {backbone.profile.id!r}"
        )
    _check_resolution(cfg, backbone)
    if condition is None:
        condition = build_condition(cfg, encoder, backbone)
    apply_checkpoint(ck, backbone, condition)
    session = _Session(ds, cfg, backbone, extractor, condition, ds.style)
    session.load_optimizer_state(ck.optimizer)
    stop = ck.step + (max(cfg.steps - ck.step, 0) if steps is None else steps)
    return _run(session, ck.step, stop, ck.meta, list(ck.log), out_dir, log_path)


def _check_resolution(cfg: TrainConfig, backbone: GenerativeBackbone) -> None:
    if cfg.profile != backbone.profile.id:
        raise ConfigError("profile", f"config profile {cfg.profile!r} != backbone profile {backbone.profile.id!r}")
    if cfg.resolution % backbone.profile.reduction:
        raise ConfigError(
            "resolution", f"{cfg.resolution} is not divisible by the reduction factor {backbone.profile.reduction}"
        )
