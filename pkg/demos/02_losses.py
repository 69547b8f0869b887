"""
The four loss terms
===================

Content, Gram style, structure and colour alignment on toy images, then the
weighted total with the reference weights.
"""

import torch

from mvstyle import toy
from mvstyle.losses import LossWeights, recompute_total, total_loss
from mvstyle.perceptual import ToyExtractor

extractor = ToyExtractor()
content = toy.scene_views(1, 32, seed=0)[0]
style = toy.style_image(32)

w = LossWeights()
print("weights:", w)

# identity: stylized == content == style
same = total_loss(content, content, content, w, extractor)
print("all-identical total:", same.total.item())

# returning the content unchanged keeps content/structure at zero but
# leaves the style and colour terms open
br = total_loss(content, content, style, w, extractor)
rec = br.record()
for k, v in rec.items():
    print(f"  {k:16s} {v:.6g}")

# the logged total is exactly the weighted sum of the logged parts
print("recomputed == logged:", recompute_total(rec, w) == rec["total"])

# a crude colour transfer moves the colour term down
shifted = (content - content.mean((0, 1)) + style.mean((0, 1))).clamp(0, 1)
print("colour term, content vs style:   %.4f" % rec["color_alignment"])
print("colour term, mean-shifted input: %.4f" % total_loss(shifted, content, style, w, extractor).color_alignment)
