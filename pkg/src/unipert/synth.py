"""Procedural colored-shape image pools.

Each image is a smooth two-color gradient background with a few filled
rectangles and disks blended on top. Fully determined by (seed, index), so
pools regenerate bit-identically anywhere.
"""

from __future__ import annotations

import numpy as np

from .sampler import ImagePool
from .tensorops import SeededRng


def synth_image(gen: np.random.Generator, height: int, width: int) -> np.ndarray:
    c0 = gen.uniform(0.0, 1.0, size=3)
    c1 = gen.uniform(0.0, 1.0, size=3)
    ys = np.linspace(0.0, 1.0, height)[:, None, None]
    xs = np.linspace(0.0, 1.0, width)[None, :, None]
    mix = 0.5 * (ys + xs)
    img = (1.0 - mix) * c0 + mix * c1

    n_shapes = int(gen.integers(2, 5))
    yy = np.arange(height)[:, None]
    xx = np.arange(width)[None, :]
    for _ in range(n_shapes):
        color = gen.uniform(0.0, 1.0, size=3)
        alpha = gen.uniform(0.6, 1.0)
        cy = gen.uniform(0.15, 0.85) * height
        cx = gen.uniform(0.15, 0.85) * width
        size = gen.uniform(0.12, 0.35) * min(height, width)
        if gen.uniform() < 0.5:
            mask = (np.abs(yy - cy) <= size) & (np.abs(xx - cx) <= size)
        else:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= size**2
        img[mask] = (1.0 - alpha) * img[mask] + alpha * color
    return np.clip(img, 0.0, 1.0)


def synth_pool(seed: int, count: int, height: int, width: int, role: str = "source") -> ImagePool:
    images = np.stack([
        synth_image(SeededRng(seed, stream_id=i).generator(), height, width)
        for i in range(count)
    ])
    return ImagePool(images=images, role=role)


def default_pools(seed: int, *, height: int = 32, width: int = 32,
                  n_targets: int = 10, n_seen: int = 20, n_unseen: int = 30):
    """The desk-scale trio: target pool plus disjoint seen/unseen source
    pools (disjointness by construction via distinct stream families)."""
    targets = synth_pool(seed * 3 + 1, n_targets, height, width, role="target")
    seen = synth_pool(seed * 3 + 2, n_seen, height, width, role="source")
    unseen = synth_pool(seed * 3 + 3, n_unseen, height, width, role="source")
    return targets, seen, unseen
