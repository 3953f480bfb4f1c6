"""Contrast limited adaptive histogram equalization and pseudo-label synthesis.

Each RGB channel is equalized independently:

1. split the channel into a ``tiles x tiles`` grid,
2. histogram every tile into ``bins`` bins (bin k holds values in
   [k/bins, (k+1)/bins)), clip each bin at ``clip_limit`` times the mean bin
   height and spread the clipped excess uniformly over all bins,
3. map bin k to the mid-point of the cumulative distribution,
   (CDF(k-1) + CDF(k)) / 2,
4. blend the mappings of the (up to) four nearest tile centres bilinearly
   (``blend="none"`` uses the pixel's own tile only),
5. clip to [0, 1].

A tile whose histogram occupies a single bin has no contrast to redistribute;
it uses the identity mapping, which makes constant images fixed points.

Everything here runs on plain arrays outside the autodiff tape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, UsageError, ValidationError
from .tensor import Tensor


@dataclass(frozen=True)
class ClaheConfig:
    tiles: int = 8
    bins: int = 256
    clip_limit: float = 2.0
    blend: str = "bilinear"

    def __post_init__(self):
        if self.tiles < 1:
            raise ConfigurationError("tiles must be >= 1")
        if self.bins < 2:
            raise ConfigurationError("bins must be >= 2")
        if self.clip_limit < 1.0:
            raise ConfigurationError("clip_limit must be >= 1.0 (multiple of the mean bin height)")
        if self.blend not in ("bilinear", "none"):
            raise ConfigurationError(f"blend must be 'bilinear' or 'none', got {self.blend!r}")


def tile_bounds(size: int, tiles: int) -> np.ndarray:
    """Integer boundaries of ``tiles`` near-equal spans covering ``range(size)``."""
    return (np.arange(tiles + 1) * size) // tiles


def tile_mappings(channel: np.ndarray, config: ClaheConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-tile lookup tables ``(tiles, tiles, bins)`` and the single-bin (identity) mask."""
    t, nb = config.tiles, config.bins
    h, w = channel.shape
    ys, xs = tile_bounds(h, t), tile_bounds(w, t)
    bins = to_bins(channel, nb)
    luts = np.empty((t, t, nb))
    flat = np.zeros((t, t), dtype=bool)
    for i in range(t):
        for j in range(t):
            block = bins[ys[i]:ys[i + 1], xs[j]:xs[j + 1]]
            hist = np.bincount(block.ravel(), minlength=nb).astype(np.float64)
            flat[i, j] = np.count_nonzero(hist) == 1
            luts[i, j] = equalize_histogram(hist, config.clip_limit)
    return luts, flat


def to_bins(values: np.ndarray, bins: int) -> np.ndarray:
    return np.minimum((values * bins).astype(np.int64), bins - 1)


def equalize_histogram(hist: np.ndarray, clip_limit: float) -> np.ndarray:
    """Clip, redistribute, and return the mid-point CDF mapping of every bin."""
    n = hist.sum()
    nb = hist.size
    limit = clip_limit * n / nb
    clipped = np.minimum(hist, limit)
    clipped += (n - clipped.sum()) / nb
    cdf = np.cumsum(clipped) / n
    prev = np.concatenate(([0.0], cdf[:-1]))
    return (prev + cdf) / 2


def _axis_weights(size: int, tiles: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """For each pixel along one axis: lower tile, upper tile, weight of the upper tile."""
    bounds = tile_bounds(size, tiles)
    centers = (bounds[:-1] + bounds[1:] - 1) / 2
    pos = np.arange(size, dtype=np.float64)
    lo = np.clip(np.searchsorted(centers, pos, side="right") - 1, 0, tiles - 1)
    hi = np.minimum(lo + 1, tiles - 1)
    span = centers[hi] - centers[lo]
    wgt = np.where(span > 0, (pos - centers[lo]) / np.where(span > 0, span, 1), 0.0)
    return lo, hi, np.clip(wgt, 0.0, 1.0)


def _lookup(luts, flat, ty, tx, bins, values):
    mapped = luts[ty, tx, bins]
    return np.where(flat[ty, tx], values, mapped)


def equalize_channel(channel: np.ndarray, config: ClaheConfig) -> np.ndarray:
    h, w = channel.shape
    t = config.tiles
    values = channel.astype(np.float64)
    luts, flat = tile_mappings(values, config)
    bins = to_bins(values, config.bins)
    if config.blend == "none":
        ty = np.searchsorted(tile_bounds(h, t), np.arange(h), side="right") - 1
        tx = np.searchsorted(tile_bounds(w, t), np.arange(w), side="right") - 1
        out = _lookup(luts, flat, ty[:, None], tx[None, :], bins, values)
    else:
        y0, y1, wy = _axis_weights(h, t)
        x0, x1, wx = _axis_weights(w, t)
        y0, y1, wy = y0[:, None], y1[:, None], wy[:, None]
        x0, x1, wx = x0[None, :], x1[None, :], wx[None, :]
        a = _lookup(luts, flat, y0, x0, bins, values)
        b = _lookup(luts, flat, y0, x1, bins, values)
        c = _lookup(luts, flat, y1, x0, bins, values)
        d = _lookup(luts, flat, y1, x1, bins, values)
        # lerp form keeps equal corner values exact
        top = a + wx * (b - a)
        bottom = c + wx * (d - c)
        out = top + wy * (bottom - top)
    return np.clip(out, 0.0, 1.0)


def clahe_array(image: np.ndarray, config: ClaheConfig = ClaheConfig()) -> np.ndarray:
    """CLAHE on an (N, C, H, W) or (C, H, W) array with values in [0, 1]."""
    arr = np.asarray(image)
    squeeze = arr.ndim == 3
    if squeeze:
        arr = arr[None]
    if arr.ndim != 4:
        raise DimensionError(f"expected (N, C, H, W) image, got shape {arr.shape}")
    h, w = arr.shape[2:]
    if h < config.tiles or w < config.tiles:
        raise ConfigurationError(f"image {h}x{w} is smaller than the {config.tiles}x{config.tiles} tile grid")
    if arr.size and not (np.isfinite(arr).all() and arr.min() >= 0 and arr.max() <= 1):
        raise ValidationError("CLAHE input must be finite and lie in [0, 1]")
    out = np.empty(arr.shape, dtype=arr.dtype)
    for n in range(arr.shape[0]):
        for c in range(arr.shape[1]):
            out[n, c] = equalize_channel(arr[n, c], config)
    return out[0] if squeeze else out


def clahe(image: Tensor, config: ClaheConfig = ClaheConfig()) -> Tensor:
    """CLAHE of an image tensor; the result is never attached to a tape."""
    return Tensor(clahe_array(image.data, config), dtype=image.dtype)


def make_pseudo_label(prediction: Tensor, config: ClaheConfig = ClaheConfig()) -> Tensor:
    """Pseudo ground truth for the dynamic tuning loss.

    ``prediction`` must already be detached; passing a tensor that is part of
    a recorded graph is rejected so the stop-gradient contract cannot be
    broken silently.
    """
    if prediction.is_attached:
        raise UsageError("make_pseudo_label needs a detached prediction (call tensor.detach first)")
    return clahe(prediction, config)
