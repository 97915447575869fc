"""Procedural building-like scenes used as clean GS images.

Facades give long straight vertical/horizontal edges, which is exactly the
structure rolling-shutter motion bends.  Images are lightly blurred so that
bilinear resampling stays accurate, and kept away from pure black so the
zero-intensity visibility rule never fires on real content.
"""

import numpy as np
from scipy.ndimage import gaussian_filter

FLOOR = 0.05


def facade_image(rng, size, channels=3, blur=0.8):
    """One ``size x size x channels`` facade scene drawn from ``rng``."""
    img = np.empty((size, size, channels))
    top = rng.uniform(0.55, 0.9, channels)
    bottom = rng.uniform(0.35, 0.7, channels)
    ramp = np.linspace(0.0, 1.0, size)[:, None, None]
    img[:] = top * (1 - ramp) + bottom * ramp

    n_buildings = rng.integers(2, 5)
    edges = np.sort(rng.choice(np.arange(1, 16), n_buildings - 1, replace=False)) / 16.0
    cols = np.concatenate([[0.0], edges, [1.0]]) * size
    for b in range(n_buildings):
        j0, j1 = int(cols[b]), int(cols[b + 1])
        roof = int(rng.uniform(0.05, 0.45) * size)
        wall = rng.uniform(0.2, 0.8, channels)
        img[roof:, j0:j1] = wall
        win = rng.uniform(0.1, 0.95, channels)
        pitch_i = int(rng.integers(max(4, size // 16), max(6, size // 7)))
        pitch_j = int(rng.integers(max(4, size // 16), max(6, size // 7)))
        wi = max(2, int(pitch_i * rng.uniform(0.35, 0.6)))
        wj = max(2, int(pitch_j * rng.uniform(0.35, 0.6)))
        for i in range(roof + pitch_i // 2, size - wi, pitch_i):
            for j in range(j0 + pitch_j // 3, j1 - wj, pitch_j):
                img[i:i + wi, j:j + wj] = win
        img[roof:roof + 2, j0:j1] = wall * 0.6
    # a few poles / cables for thin structure
    for _ in range(rng.integers(1, 4)):
        j = int(rng.integers(0, size - 2))
        img[:, j:j + 2] = rng.uniform(0.1, 0.4, channels)
    if blur > 0:
        img = gaussian_filter(img, sigma=(blur, blur, 0), mode="nearest")
    return np.clip(img, FLOOR, 1.0)


def facade_images(n, size, seed, channels=3):
    """``n`` deterministic facades; image ``k`` depends only on ``(seed, k)``."""
    seqs = np.random.SeedSequence([seed, 0xFACADE]).spawn(n)
    return [facade_image(np.random.default_rng(s), size, channels) for s in seqs]
