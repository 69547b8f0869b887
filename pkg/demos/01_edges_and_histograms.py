"""
Edge operators and the colour histogram
=======================================

Everything the structure and colour terms look at, on a small synthetic image.
"""

import torch

from mvstyle import imaging, toy

img = torch.from_numpy(toy.canvas(32, 32, seed=0))

# Sobel gives 6 channels (gx, gy per colour), the Laplacian 3, soft Canny 1
sob = imaging.sobel(img)
lap = imaging.laplacian(img)
edges = imaging.soft_canny(img)
print("sobel", tuple(sob.shape), "laplacian", tuple(lap.shape), "soft canny", tuple(edges.shape))

# a constant image has no edges at all
flat = torch.full((8, 8, 3), 0.4, dtype=torch.float64)
print("sobel of a flat image is zero:", bool((imaging.sobel(flat) == 0).all()))
print("soft canny on a flat image: %.2e" % imaging.soft_canny(flat).max())

# the soft canny map lights up on the rectangle and disc borders
print("fraction of pixels above 0.5:", float((edges > 0.5).double().mean()))

# RGB-uv histogram: 3 planes of 64x64 bins, summing to one
h = imaging.color_histogram(img)
print("histogram", tuple(h.bins.shape), "sum %.12f" % h.bins.sum())

# Hellinger distance against a tinted copy grows with the tint
for amount in (0.0, 0.1, 0.3):
    tinted = (img * torch.tensor([1.0, 1.0 - amount, 1.0 - 2 * amount])).clamp(0, 1)
    d = imaging.hellinger(h, imaging.color_histogram(tinted))
    print(f"tint {amount:.1f}: Hellinger {d.item():.4f}")
