"""Paired synthetic underwater-style dataset built from natural test images."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from skimage import data as skdata

CAST_GAINS = (0.55, 0.9, 1.0)
NOISE_SIGMA = 0.02
SOURCES = ("astronaut", "coffee", "chelsea", "rocket")


def _sources() -> list[np.ndarray]:
    return [getattr(skdata, name)()[..., :3] for name in SOURCES]


def degrade(gt: np.ndarray, rng: np.random.Generator, gains=CAST_GAINS, sigma: float = NOISE_SIGMA) -> np.ndarray:
    """Blue-green cast via per-channel gains plus Gaussian noise; HWC float in [0, 1]."""
    out = gt * np.asarray(gains)[None, None, :] + rng.normal(0.0, sigma, gt.shape)
    return np.clip(out, 0.0, 1.0)


def make_pairs(count: int = 24, size: int = 96, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """``count`` (raw, truth) uint8 HWC pairs from random crops, downscaled 2x for texture density."""
    rng = np.random.default_rng(seed)
    sources = _sources()
    pairs = []
    for k in range(count):
        src = sources[k % len(sources)]
        h, w = src.shape[:2]
        crop = 2 * size
        top = int(rng.integers(0, h - crop + 1))
        left = int(rng.integers(0, w - crop + 1))
        patch = Image.fromarray(src[top:top + crop, left:left + crop])
        gt8 = np.asarray(patch.resize((size, size), Image.BILINEAR), dtype=np.uint8)
        raw = degrade(gt8 / 255.0, rng)
        raw8 = np.rint(raw * 255.0).astype(np.uint8)
        pairs.append((raw8, gt8))
    return pairs


def write_dataset(root, count: int = 24, size: int = 96, seed: int = 0) -> Path:
    """Write ``root/raw/NNN.png`` and ``root/reference/NNN.png``."""
    root = Path(root)
    (root / "raw").mkdir(parents=True, exist_ok=True)
    (root / "reference").mkdir(parents=True, exist_ok=True)
    for k, (raw, gt) in enumerate(make_pairs(count, size, seed)):
        name = f"{k:03d}.png"
        Image.fromarray(raw).save(root / "raw" / name, format="PNG")
        Image.fromarray(gt).save(root / "reference" / name, format="PNG")
    return root
