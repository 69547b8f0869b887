"""Generative backbone: latent encoder, one-step conditional denoiser, decoder.

LoRA adapters wrap frozen ``nn.Linear`` / ``nn.Conv2d`` hosts. Only adapter
(and projector) tensors are ever trained or written to checkpoints; the base
weights are identified by the profile id.
"""

from __future__ import annotations

import abc
import hashlib
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .imaging import from_nchw, to_nchw


class StateError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackboneProfile:
    id: str
    latent_channels: int
    reduction: int
    context_width: int
    timestep: int = 999

    def latent_shape(self, height: int, width: int) -> tuple[int, int, int]:
        if height % self.reduction or width % self.reduction:
            raise ValueError(
                f"image size {height}x{width} is not divisible by the reduction factor {self.reduction}"
            )
        return (self.latent_channels, height // self.reduction, width // self.reduction)


# SD-Turbo (v2.1): 4-channel latent at 1/8 resolution, 1024-wide text context.
REFERENCE_PROFILE = BackboneProfile("sd-turbo-2.1", latent_channels=4, reduction=8, context_width=1024)
TOY_PROFILE = BackboneProfile("toy-v1", latent_channels=4, reduction=4, context_width=16)


class LoraAdapter(nn.Module):
    """Low-rank delta ``(alpha / r) * B @ A`` for a ``d x k`` host weight.

    For convolutions ``k = in_channels * kh * kw``.
    """

    def __init__(self, d: int, k: int, rank: int, alpha: float, host: str = "", generator=None):
        super().__init__()
        if rank < 1 or rank > min(d, k):
            raise ValueError(f"rank must lie in [1, {min(d, k)}], got {rank}")
        self.rank, self.alpha, self.host = rank, float(alpha), host
        self.A = nn.Parameter(torch.randn(rank, k, generator=generator) / rank**0.5)
        self.B = nn.Parameter(torch.zeros(d, rank))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> torch.Tensor:
        return self.scale * (self.B @ self.A)

    def num_parameters(self) -> int:
        return self.A.numel() + self.B.numel()


def lora_forward(W: torch.Tensor, b, adapter: LoraAdapter, x: torch.Tensor) -> torch.Tensor:
    """Linear host: ``(W + (alpha/r) B A) x + b`` over the last axis of ``x``."""
    d, k = W.shape
    if adapter.A.shape[1] != k or adapter.B.shape[0] != d:
        raise ValueError(
            f"adapter factors {tuple(adapter.B.shape)} x {tuple(adapter.A.shape)} do not fit weight {tuple(W.shape)}"
        )
    if x.shape[-1] != k:
        raise ValueError(f"input width {x.shape[-1]} != weight input width {k}")
    out = x @ W.T + adapter.scale * ((x @ adapter.A.T) @ adapter.B.T)
    return out if b is None else out + b


class LoraLinear(nn.Module):
    def __init__(self, base: nn.Linear, adapter: LoraAdapter):
        super().__init__()
        self.base, self.adapter = base, adapter

    def forward(self, x):
        return lora_forward(self.base.weight, self.base.bias, self.adapter, x)


class LoraConv2d(nn.Module):
    """Frozen conv plus a rank-r bottleneck: kernel-shaped A conv then 1x1 B conv."""

    def __init__(self, base: nn.Conv2d, adapter: LoraAdapter):
        super().__init__()
        if base.groups != 1:
            raise ValueError("grouped convolutions are not supported as LoRA hosts")
        self.base, self.adapter = base, adapter

    def forward(self, x):
        base = self.base
        r = self.adapter.rank
        a = base._conv_forward(x, self.adapter.A.view(r, base.in_channels, *base.kernel_size), None)
        delta = F.conv2d(a, self.adapter.B.view(base.out_channels, r, 1, 1))
        return base(x) + self.adapter.scale * delta


def _host_shape(m: nn.Module) -> tuple[int, int]:
    if isinstance(m, nn.Linear):
        return m.out_features, m.in_features
    kh, kw = m.kernel_size
    return m.out_channels, m.in_channels * kh * kw


def _default_filter(name: str) -> bool:
    return True


class GenerativeBackbone(nn.Module, abc.ABC):
    """Encoder / one-step denoiser / decoder with frozen base weights.

    Subclasses implement the NCHW ``_encode``, ``_denoise`` and ``_decode``
    hooks. Public methods take channels-last images.
    """

    profile: BackboneProfile

    def __init__(self):
        super().__init__()
        self.denoise_calls = 0

    @abc.abstractmethod
    def _encode(self, x: torch.Tensor) -> torch.Tensor: ...

    @abc.abstractmethod
    def _denoise(self, z: torch.Tensor, c: torch.Tensor) -> torch.Tensor: ...

    @abc.abstractmethod
    def _decode(self, z: torch.Tensor) -> torch.Tensor: ...

    def freeze_base(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)

    def encode_latent(self, img: torch.Tensor) -> torch.Tensor:
        x, batched = to_nchw(img)
        self.profile.latent_shape(x.shape[-2], x.shape[-1])
        z = self._encode(x)
        return z if batched else z[0]

    def denoise_once(self, z: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        if c.shape[-1] != self.profile.context_width:
            raise ValueError(f"context width {c.shape[-1]} != backbone context width {self.profile.context_width}")
        batched = z.dim() == 4
        zb = z if batched else z.unsqueeze(0)
        cb = c if c.dim() == 3 else c.unsqueeze(0)
        if cb.shape[0] != zb.shape[0]:
            cb = cb.expand(zb.shape[0], -1, -1)
        self.denoise_calls += 1
        out = self._denoise(zb, cb)
        return out if batched else out[0]

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor:
        batched = z.dim() == 4
        zb = z if batched else z.unsqueeze(0)
        if zb.shape[1] != self.profile.latent_channels:
            raise ValueError(f"latent has {zb.shape[1]} channels, profile expects {self.profile.latent_channels}")
        return from_nchw(self._decode(zb).clamp(0, 1), batched)

    def stylize(self, img: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        return self.decode_latent(self.denoise_once(self.encode_latent(img), c))

    def adapters(self) -> dict[str, LoraAdapter]:
        return {m.adapter.host: m.adapter for m in self.modules() if isinstance(m, (LoraLinear, LoraConv2d))}

    def lora_hosts(self) -> dict[str, nn.Module]:
        """Eligible (un-adapted or adapted) host layers keyed by name."""
        hosts = {}
        for name, m in self.named_modules():
            if isinstance(m, (LoraLinear, LoraConv2d)):
                hosts[name] = m.base
            elif isinstance(m, (nn.Linear, nn.Conv2d)) and not name.endswith(".base"):
                hosts[name] = m
        return hosts

    def base_parameters(self) -> dict[str, torch.Tensor]:
        """Frozen weights under their pre-injection names (``mix.base.weight`` -> ``mix.weight``)."""
        return {
            n.replace(".base.", "."): p
            for n, p in self.named_parameters()
            if ".adapter." not in n and not n.startswith("adapter.")
        }

    def base_digest(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.base_parameters().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def inject_lora(
    backbone: GenerativeBackbone,
    rank: int = 8,
    alpha: float = 8.0,
    name_filter: Callable[[str], bool] = _default_filter,
    seed: int = 0,
) -> int:
    """Wrap every matching host layer with a zero-initialized adapter."""
    gen = torch.Generator().manual_seed(seed)
    matched = [(n, m) for n, m in backbone.named_modules() if n and name_filter(n)]
    if any(isinstance(m, (LoraLinear, LoraConv2d)) for _, m in matched):
        raise StateError("LoRA adapters are already attached to matching layers")
    targets = [
        (n, m) for n, m in matched if isinstance(m, (nn.Linear, nn.Conv2d)) and not n.endswith(".base")
    ]
    for name, m in targets:
        d, k = _host_shape(m)
        param = next(m.parameters())
        adapter = LoraAdapter(d, k, min(rank, d, k), alpha, host=name, generator=gen)
        adapter.to(dtype=param.dtype, device=param.device)
        wrapper = LoraLinear(m, adapter) if isinstance(m, nn.Linear) else LoraConv2d(m, adapter)
        parent_name, _, attr = name.rpartition(".")
        parent = backbone.get_submodule(parent_name) if parent_name else backbone
        setattr(parent, attr, wrapper)
    return len(targets)


def lora_parameter_count(backbone: GenerativeBackbone) -> int:
    """Analytic ``sum r * (d + k)`` over attached adapters."""
    return sum(a.rank * sum(_host_shape_from_adapter(a)) for a in backbone.adapters().values())


def _host_shape_from_adapter(a: LoraAdapter) -> tuple[int, int]:
    return a.B.shape[0], a.A.shape[1]


def _identity_kernel(c_out: int, c_in: int, k: int, n: int) -> torch.Tensor:
    w = torch.zeros(c_out, c_in, k, k)
    for i in range(n):
        w[i, i, k // 2, k // 2] = 1.0
    return w


class ToyBackbone(GenerativeBackbone):
    """Seeded miniature of a latent one-step generator.

    Encoder: two 2x2 stride-2 convs. The first three latent channels carry 4x4
    block averages of RGB; the fourth is a random feature. Decoder: bilinear
    x4 upsample and a 3x3 conv reading the colour channels back, so the coder
    pair is nearly inverse on smooth images. Denoiser: identity-initialized
    3x3 mixing conv, FiLM modulation from the mean context token (stand-in for
    cross-attention), identity 1x1 output conv.
    """

    def __init__(self, profile: BackboneProfile = TOY_PROFILE, hidden: int = 8, cond_gain: float = 1.0, seed: int = 0):
        super().__init__()
        self.profile = profile
        cz = profile.latent_channels
        gen = torch.Generator().manual_seed(seed)

        self.enc1 = nn.Conv2d(3, hidden, 2, stride=2)
        self.enc2 = nn.Conv2d(hidden, cz, 2, stride=2)
        self.dec = nn.Conv2d(cz, 3, 3, padding=1, padding_mode="replicate")
        self.mix = nn.Conv2d(cz, cz, 3, padding=1, padding_mode="replicate")
        self.cond = nn.Linear(profile.context_width, 2 * cz)
        self.out = nn.Conv2d(cz, cz, 1)

        with torch.no_grad():
            w1 = torch.zeros(hidden, 3, 2, 2)
            for i in range(3):
                w1[i, i] = 0.25
            w1[3:] = torch.randn(hidden - 3, 3, 2, 2, generator=gen) * 0.5
            self.enc1.weight.copy_(w1)
            self.enc1.bias.zero_()

            w2 = torch.zeros(cz, hidden, 2, 2)
            for i in range(3):
                w2[i, i] = 0.25
            w2[3:, 3:] = torch.randn(cz - 3, hidden - 3, 2, 2, generator=gen) * 0.25
            self.enc2.weight.copy_(w2)
            self.enc2.bias.zero_()

            self.dec.weight.copy_(_identity_kernel(3, cz, 3, 3))
            self.dec.bias.zero_()
            self.mix.weight.copy_(_identity_kernel(cz, cz, 3, cz))
            self.mix.bias.zero_()
            self.out.weight.copy_(_identity_kernel(cz, cz, 1, cz))
            self.out.bias.zero_()
            w = profile.context_width
            self.cond.weight.copy_(torch.randn(2 * cz, w, generator=gen) * cond_gain / w**0.5)
            self.cond.bias.zero_()
        self.freeze_base()

    def _encode(self, x):
        return self.enc2(F.relu(self.enc1(x)))

    def _denoise(self, z, c):
        gamma, beta = self.cond(c.mean(dim=1)).chunk(2, dim=-1)
        h = self.mix(z)
        h = h * (1 + gamma[..., None, None]) + beta[..., None, None]
        return self.out(h)

    def _decode(self, z):
        up = F.interpolate(z, scale_factor=self.profile.reduction, mode="bilinear", align_corners=False)
        return self.dec(up)


def build_backbone(profile_id: str, seed: int = 0) -> GenerativeBackbone:
    if profile_id == TOY_PROFILE.id:
        return ToyBackbone(TOY_PROFILE, seed=seed)
    raise ValueError(
        f"no built-in weights for backbone profile {profile_id!r}; "
        "real backbones must be provided by the integrator"
    )


def stylize(backbone: GenerativeBackbone, content: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    return backbone.stylize(content, c)


META_KEY = "__meta__"


def save_archive(path, arrays: dict[str, torch.Tensor | np.ndarray], meta: dict) -> None:
    """Flat ``.npz``: little-endian float32 arrays by name plus a JSON metadata record.

    Entries carry a fixed timestamp so identical contents give identical bytes.
    """
    out = {}
    for name, a in arrays.items():
        if isinstance(a, torch.Tensor):
            a = a.detach().cpu().numpy()
        out[name] = np.ascontiguousarray(a, dtype="<f4")
    out[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(out):
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, out[name], allow_pickle=False)


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files if k != META_KEY}
        meta = json.loads(data[META_KEY].tobytes().decode()) if META_KEY in data.files else {}
    return arrays, meta
