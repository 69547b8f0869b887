"""
LoRA adapters on the toy backbone
=================================

Inject adapters, check they start as an exact no-op, count what would train.
"""

import torch

from mvstyle import toy
from mvstyle.backbone import REFERENCE_PROFILE, ToyBackbone, inject_lora, lora_parameter_count

backbone = ToyBackbone()
print("eligible layers:", list(backbone.lora_hosts()))

img = toy.scene_views(1, 32)[0]
ctx = torch.randn(17, 16, generator=torch.Generator().manual_seed(0))
before = backbone.stylize(img, ctx)

n = inject_lora(backbone, rank=8, alpha=8)
after = backbone.stylize(img, ctx)
print(f"{n} adapters attached; output unchanged: {torch.equal(before, after)}")

for name, a in backbone.adapters().items():
    d, k = a.B.shape[0], a.A.shape[1]
    print(f"  {name:5s} d={d:2d} k={k:3d} r={a.rank} -> {a.num_parameters()} params")
print("LoRA parameters:", lora_parameter_count(backbone))
print("frozen base parameters:", sum(p.numel() for p in backbone.base_parameters().values()))

# the encoder -> denoiser -> decoder path runs the denoiser once per call
backbone.denoise_calls = 0
backbone.stylize(img, ctx)
print("denoiser calls per stylize:", backbone.denoise_calls)

# latent arithmetic for the reference profile at 256x256
print(REFERENCE_PROFILE.id, "latent for 256x256:", REFERENCE_PROFILE.latent_shape(256, 256))
