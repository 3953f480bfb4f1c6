"""Reference-gradient losses (L1, SSIM), the dynamic tuning loss, and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .clahe import ClaheConfig, make_pseudo_label
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.35

    def __post_init__(self):
        for key in ("alpha", "beta", "gamma"):
            if getattr(self, key) < 0:
                raise ConfigurationError(f"loss weight {key} must be >= 0")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2-D Gaussian (outer product of the 1-D kernel)."""
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error."""
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    return T.mean(T.absolute(T.sub(pred, target)))


def ssim_map(x: Tensor, y: Tensor, data_range: float = 1.0) -> Tensor:
    """Per-pixel SSIM over the valid region of an 11x11 Gaussian window (no padding)."""
    if x.shape != y.shape:
        raise DimensionError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    if x.ndim != 4:
        raise DimensionError(f"ssim expects NCHW tensors, got {x.shape}")
    n, c, h, w = x.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ConfigurationError(f"image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    win = np.broadcast_to(gaussian_window(), (c, 1, SSIM_WINDOW, SSIM_WINDOW))
    kernel = Tensor(win.copy(), dtype=x.dtype)

    def blur(t):
        return T.conv2d(t, kernel, None, 1, 0, groups=c)

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x, mu_y = blur(x), blur(y)
    mu_xx, mu_yy, mu_xy = T.mul(mu_x, mu_x), T.mul(mu_y, mu_y), T.mul(mu_x, mu_y)
    var_x = T.sub(blur(T.mul(x, x)), mu_xx)
    var_y = T.sub(blur(T.mul(y, y)), mu_yy)
    cov = T.sub(blur(T.mul(x, y)), mu_xy)
    num = T.mul(T.add_scalar(T.scale(mu_xy, 2.0), c1), T.add_scalar(T.scale(cov, 2.0), c2))
    den = T.mul(T.add_scalar(T.add(mu_xx, mu_yy), c1), T.add_scalar(T.add(var_x, var_y), c2))
    return T.div(num, den)


def ssim_loss(pred: Tensor, target: Tensor) -> Tensor:
    """1 - mean SSIM."""
    return T.add_scalar(T.scale(T.mean(ssim_map(pred, target)), -1.0), 1.0)


def dynamic_tuning_loss(pred: Tensor, clahe_cfg: ClaheConfig = ClaheConfig(),
                        pseudo_label: Tensor | None = None) -> Tensor:
    """MAE between the prediction and CLAHE of its own detached copy.

    ``pseudo_label`` may be supplied when it was computed earlier (per-epoch
    mode, or to hold it fixed in a finite-difference check).
    """
    if pseudo_label is None:
        pseudo_label = make_pseudo_label(T.detach(pred), clahe_cfg)
    return l1_loss(pred, pseudo_label)


def total_loss(pred: Tensor, target: Tensor, weights: LossWeights = LossWeights(),
               clahe_cfg: ClaheConfig = ClaheConfig(), pseudo_label: Tensor | None = None,
               gamma: float | None = None) -> tuple[Tensor, dict]:
    """alpha * L1 + beta * L_SSIM + gamma * L_d.

    Terms whose weight is zero are not evaluated, so they contribute exactly
    zero gradient. ``gamma`` overrides ``weights.gamma`` (used by the warm-up).
    Returns the loss tensor and the unweighted component values.
    """
    if pred.shape != target.shape:
        raise DimensionError(f"total_loss: shape mismatch {pred.shape} vs {target.shape}")
    g = weights.gamma if gamma is None else gamma
    if g < 0:
        raise ConfigurationError("gamma must be >= 0")
    terms = []
    parts = {"l1": 0.0, "ssim": 0.0, "dynamic": 0.0}
    if weights.alpha:
        l1 = l1_loss(pred, target)
        parts["l1"] = l1.item()
        terms.append(T.scale(l1, weights.alpha))
    if weights.beta:
        ls = ssim_loss(pred, target)
        parts["ssim"] = ls.item()
        terms.append(T.scale(ls, weights.beta))
    if g:
        ld = dynamic_tuning_loss(pred, clahe_cfg, pseudo_label)
        parts["dynamic"] = ld.item()
        terms.append(T.scale(ld, g))
    if not terms:
        return T.scale(T.mean(pred), 0.0), parts
    loss = terms[0]
    for term in terms[1:]:
        loss = T.add(loss, term)
    return loss, parts
