"""Image quality metrics: PSNR, RMSE, SSIM, UIQM, UCIQE and the gray-world score.

All functions take RGB images with values in [0, 1], either as a
:class:`~dgnet.tensor.Tensor` or an array shaped (3, H, W) or (1, 3, H, W),
and compute in float64.

Scale conventions for the no-reference metrics (both are defined on 8-bit
data in their original publications):

* UIQM works on pixel values multiplied by 255. Colorfulness uses
  alpha-trimmed statistics (alpha_L = alpha_R = 0.1); sharpness is the Sobel
  EME of each channel weighted (0.299, 0.587, 0.114); contrast is the logAMEE
  over blocks spanning all three channels. Block size is 8x8 and only full
  blocks are used.
* UCIQE converts sRGB (D65) to CIELab and uses L / 100 and a / 255,
  b / 255, i.e. the 8-bit OpenCV Lab scale with the opponent axes centred on
  zero, so achromatic pixels have zero chroma.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .losses import SSIM_K1, SSIM_K2, gaussian_window
from .tensor import Tensor

UIQM_COEFFS = (0.0282, 0.2953, 3.5753)
UCIQE_COEFFS = (0.4680, 0.2745, 0.2576)
EME_BLOCK = 8

FULL_REFERENCE = ("psnr", "rmse", "ssim")
NO_REFERENCE = ("uiqm", "uciqe", "grayworld")


def as_chw(image) -> np.ndarray:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise DimensionError(f"metrics take one image at a time, got batch of {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DimensionError(f"expected an RGB image shaped (3, H, W), got {arr.shape}")
    return arr.astype(np.float64)


def mse(pred, ref) -> float:
    a, b = as_chw(pred), as_chw(ref)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(pred, ref) -> float:
    """10 log10(1 / MSE) in dB; identical images give ``inf``."""
    err = mse(pred, ref)
    return math.inf if err == 0 else 10.0 * math.log10(1.0 / err)


def rmse(pred, ref) -> float:
    return math.sqrt(mse(pred, ref))


def _blur_valid(x: np.ndarray, g1: np.ndarray) -> np.ndarray:
    k = g1.size
    x = np.lib.stride_tricks.sliding_window_view(x, k, axis=-1) @ g1
    x = np.lib.stride_tricks.sliding_window_view(x, k, axis=-2) @ g1
    return x


def ssim_metric(pred, ref, data_range: float = 1.0) -> float:
    """Mean SSIM, 11x11 Gaussian window (sigma 1.5), valid region only."""
    x, y = as_chw(pred), as_chw(ref)
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {y.shape}")
    win = gaussian_window()
    g1 = win.sum(axis=0)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _blur_valid(x, g1), _blur_valid(y, g1)
    vx = _blur_valid(x * x, g1) - mx * mx
    vy = _blur_valid(y * y, g1) - my * my
    cxy = _blur_valid(x * y, g1) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


# ---------------------------------------------------------------------------
# UIQM


def trimmed_mean(values: np.ndarray, alpha_l: float = 0.1, alpha_r: float = 0.1) -> float:
    v = np.sort(values.ravel())
    k = v.size
    lo = math.ceil(alpha_l * k)
    hi = math.floor(alpha_r * k)
    return float(v[lo:k - hi].mean())


def uicm(image) -> float:
    rgb = as_chw(image) * 255.0
    rg = rgb[0] - rgb[1]
    yb = (rgb[0] + rgb[1]) / 2 - rgb[2]
    mu_rg, mu_yb = trimmed_mean(rg), trimmed_mean(yb)
    var_rg = float(np.mean((rg - mu_rg) ** 2))
    var_yb = float(np.mean((yb - mu_yb) ** 2))
    return -0.0268 * math.hypot(mu_rg, mu_yb) + 0.1586 * math.sqrt(var_rg + var_yb)


def sobel_magnitude(channel: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude with half-sample symmetric borders."""
    p = np.pad(channel, 1, mode="symmetric")
    # d/dy: vertical derivative smoothed horizontally, and vice versa
    dy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    dx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    return np.hypot(dx, dy)


def _blocks(x: np.ndarray, block: int) -> np.ndarray:
    """Full ``block x block`` tiles of the trailing two axes, as (by, bx, ..., block, block)."""
    h, w = x.shape[-2:]
    by, bx = h // block, w // block
    x = x[..., :by * block, :bx * block]
    lead = x.shape[:-2]
    x = x.reshape(*lead, by, block, bx, block)
    nl = len(lead)
    order = (nl, nl + 2, *range(nl), nl + 1, nl + 3)
    return x.transpose(order)


def eme(x: np.ndarray, block: int = EME_BLOCK) -> float:
    """Measure of enhancement: 2/(k1 k2) * sum over blocks of log(max/min); blocks with min 0 count 0."""
    b = _blocks(x, block)
    k = b.shape[0] * b.shape[1]
    if k == 0:
        return 0.0
    mx = b.max(axis=(-2, -1))
    mn = b.min(axis=(-2, -1))
    ok = mn > 0
    ratio = np.where(ok, mx / np.where(ok, mn, 1.0), 1.0)
    return float(2.0 / k * np.log(ratio).sum())


def uism(image) -> float:
    rgb = as_chw(image) * 255.0
    total = 0.0
    for lam, ch in zip((0.299, 0.587, 0.114), rgb):
        mag = sobel_magnitude(ch)
        peak = mag.max()
        if peak > 0:
            mag = mag * (255.0 / peak)
        total += lam * eme(mag * ch)
    return total


def uiconm(image, block: int = EME_BLOCK) -> float:
    """logAMEE contrast: -1/(k1 k2) * sum of r log r, r = (max - min) / (max + min) per block."""
    rgb = as_chw(image) * 255.0
    b = _blocks(rgb, block)  # (by, bx, 3, block, block)
    k = b.shape[0] * b.shape[1]
    if k == 0:
        return 0.0
    mx = b.max(axis=(-3, -2, -1))
    mn = b.min(axis=(-3, -2, -1))
    top, bot = mx - mn, mx + mn
    ok = (top > 0) & (bot > 0)
    r = np.where(ok, top / np.where(ok, bot, 1.0), 1.0)
    return float(-1.0 / k * np.sum(r * np.log(r)))


def uiqm_components(image) -> tuple[float, float, float]:
    return uicm(image), uism(image), uiconm(image)


def uiqm(image) -> float:
    c1, c2, c3 = UIQM_COEFFS
    a, b, c = uiqm_components(image)
    return c1 * a + c2 * b + c3 * c


# ---------------------------------------------------------------------------
# UCIQE

_SRGB_TO_XYZ = np.array([
    [0.412453, 0.357580, 0.180423],
    [0.212671, 0.715160, 0.072169],
    [0.019334, 0.119193, 0.950227],
])
# white point taken as the matrix row sums (D65 to 5 digits), so every gray maps to a = b = 0 exactly
_WHITE = _SRGB_TO_XYZ.sum(axis=1)


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB in [0, 1], shape (3, H, W) -> CIELab (L in [0, 100]), D65 white point."""
    lin = np.where(rgb > 0.04045, ((rgb + 0.055) / 1.055) ** 2.4, rgb / 12.92)
    xyz = np.tensordot(_SRGB_TO_XYZ, lin, axes=(1, 0)) / _WHITE[:, None, None]
    eps = (6 / 29) ** 3
    f = np.where(xyz > eps, np.cbrt(xyz), xyz / (3 * (6 / 29) ** 2) + 4 / 29)
    lum = 116 * f[1] - 16
    a = 500 * (f[0] - f[1])
    b = 200 * (f[1] - f[2])
    return np.stack([lum, a, b])


def uciqe_components(image) -> tuple[float, float, float]:
    """(chroma standard deviation, luminance contrast, mean saturation)."""
    lab = rgb_to_lab(as_chw(image))
    lum = lab[0] / 100.0
    chroma = np.hypot(lab[1], lab[2]) / 255.0
    sigma_c = float(chroma.std())
    flat = np.sort(lum.ravel())
    con_l = float(flat[int(0.99 * flat.size)] - flat[int(0.01 * flat.size)])
    sat = np.divide(chroma, lum, out=np.zeros_like(chroma), where=lum > 0)
    return sigma_c, con_l, float(sat.mean())


def uciqe(image) -> float:
    c1, c2, c3 = UCIQE_COEFFS
    s, con, sat = uciqe_components(image)
    return c1 * s + c2 * con + c3 * sat


def grayworld_score(image) -> float:
    """Standard deviation of the three channel means about the all-pixel mean (lower is better)."""
    rgb = as_chw(image)
    means = rgb.reshape(3, -1).mean(axis=1)
    overall = rgb.mean()
    return float(np.sqrt(np.mean((means - overall) ** 2)))


# ---------------------------------------------------------------------------
# reports


def evaluate_image(pred, ref=None) -> dict:
    rec = {}
    if ref is not None:
        rec.update(psnr=psnr(pred, ref), rmse=rmse(pred, ref), ssim=ssim_metric(pred, ref))
    rec.update(uiqm=uiqm(pred), uciqe=uciqe(pred), grayworld=grayworld_score(pred))
    return rec


@dataclass
class MetricReport:
    """Per-image metric records plus their arithmetic means."""

    columns: tuple = FULL_REFERENCE + NO_REFERENCE
    records: list = field(default_factory=list)

    def add(self, image_id: str, values: dict) -> None:
        self.records.append({"id": image_id, **{k: float(values[k]) for k in self.columns}})

    @property
    def count(self) -> int:
        return len(self.records)

    def aggregate(self) -> dict:
        if not self.records:
            return {k: math.nan for k in self.columns}
        return {k: float(np.mean([r[k] for r in self.records])) for k in self.columns}

    def sorted(self) -> "MetricReport":
        return MetricReport(self.columns, sorted(self.records, key=lambda r: r["id"]))

    def write_csv(self, fh) -> None:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", *self.columns])
        for rec in self.records:
            writer.writerow([rec["id"], *(_fmt(rec[k]) for k in self.columns)])
        agg = self.aggregate()
        writer.writerow(["mean", *(_fmt(agg[k]) for k in self.columns)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def read_report_csv(text: str) -> tuple[list[dict], dict]:
    """Parse a report written by :meth:`MetricReport.write_csv` into (rows, aggregate row)."""
    rows = list(csv.DictReader(io.StringIO(text)))
    parsed = [{k: (v if k == "id" else float(v)) for k, v in r.items()} for r in rows]
    return parsed[:-1], parsed[-1]
