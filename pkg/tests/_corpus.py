"""Deterministic image corpus for tests, cut from the scikit-image sample images."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from skimage import data as skdata

SOURCES = (
    "astronaut", "camera", "chelsea", "coffee", "coins", "moon", "clock", "cell",
    "immunohistochemistry", "rocket", "grass", "gravel", "brick", "retina", "hubble_deep_field",
)


def _patches(img: np.ndarray, size: int, min_std: float) -> list[np.ndarray]:
    H, W = img.shape[:2]
    out = []
    for top in range(0, H - size + 1, size):
        for left in range(0, W - size + 1, size):
            p = img[top : top + size, left : left + size]
            gray = p if p.ndim == 2 else p[..., :3].mean(axis=2)
            if gray.std() >= min_std:
                out.append(p)
    return out


def build_corpus(root, count: int, size: int = 48, min_std: float = 6.0) -> Path:
    """Write ``count`` PNG patches (RGB and grayscale mixed) named round-robin across sources."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    pools = [_patches(getattr(skdata, name)(), size, min_std) for name in SOURCES]
    written, depth = 0, 0
    while written < count:
        progressed = False
        for pool in pools:
            if depth < len(pool) and written < count:
                Image.fromarray(np.ascontiguousarray(pool[depth])).save(root / f"{written:04d}.png")
                written += 1
                progressed = True
        if not progressed:
            raise RuntimeError(f"sample images only yield {written} patches of {size}x{size}")
        depth += 1
    return root
