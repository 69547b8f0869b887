"""
Multi-view consistency and structure metrics
============================================

The block-matching flow oracle on a known translation, and DSD on token
self-similarity.
"""

import numpy as np
import torch

from mvstyle import toy
from mvstyle.metrics import BlockMatchingFlow, dsd, dsd_from_tokens, flow_consistency
from mvstyle.perceptual import ToyTokenEncoder

a, b = toy.scene_views(2, 32, shift=3)
est = BlockMatchingFlow()
flow = est(a, b)
print("estimated flow, mean (dx, dy):", flow.reshape(-1, 2).mean(0))

# a colour remap keeps every match, so the flows agree
remap = lambda v: torch.stack([1 - v[..., 2], v[..., 0], v[..., 1] ** 2], -1)
print("flow L1, colour-remapped pair: %.3f" % flow_consistency(est, (a, b), (remap(a), remap(b))))

g = torch.Generator().manual_seed(0)
noise = (torch.rand(32, 32, 3, generator=g), torch.rand(32, 32, 3, generator=g))
print("flow L1, independent noise:    %.3f" % flow_consistency(est, (a, b), noise))

# DSD compares cosine self-similarity of local tokens, x100
enc = ToyTokenEncoder()
print("DSD(view, view):          ", dsd(a, a, enc))
print("DSD(view, remapped view): %.4f" % dsd(remap(a), a, enc))
toks = enc(a)
perm = torch.from_numpy(np.random.default_rng(0).permutation(16) + 1)
print("DSD with tokens shuffled: %.4f" % dsd_from_tokens(torch.cat([toks[:1], toks[perm]]), toks))
