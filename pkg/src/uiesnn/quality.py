"""Full-reference (PSNR, SSIM) and no-reference (UCIQE, UIQM) image quality metrics.

Images are float arrays in ``[0, P_max]`` shaped ``(3, H, W)`` (a leading batch
axis of 1 is accepted). UCIQE and UIQM work on the 8-bit scale internally, as
their published reference code does.

Weight defaults come from the metrics' original publications:
UCIQE (Yang & Sowmya 2015) and UIQM (Panetta et al. 2016).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import PreconditionError, ShapeError

IDENTICAL = math.inf
LUMA = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class MetricWeights:
    uciqe: tuple = (0.4680, 0.2745, 0.2576)
    uiqm: tuple = (0.0282, 0.2953, 3.5753)
    p_max: float = 1.0
    k1: float = 0.01
    k2: float = 0.03
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    block: int = 10

    def __post_init__(self):
        if not self.p_max > 0:
            raise ValueError("p_max must be positive")
        if not all(math.isfinite(w) for w in self.uciqe + self.uiqm):
            raise ValueError("metric weights must be finite")

    @property
    def c1(self):
        return (self.k1 * self.p_max) ** 2

    @property
    def c2(self):
        return (self.k2 * self.p_max) ** 2


DEFAULT_WEIGHTS = MetricWeights()


def _image(x, name="image"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4 and x.shape[0] == 1:
        x = x[0]
    return x


def _rgb(x, name="image"):
    x = _image(x, name)
    if x.ndim != 3 or x.shape[0] != 3:
        raise PreconditionError(f"{name} must be an RGB array shaped (3, H, W), got {x.shape}")
    return x


def psnr(reference, enhanced, p_max=1.0):
    """``10 log10(P_max**2 / MSE)`` in dB; ``IDENTICAL`` (inf) when the images match."""
    a, b = _image(reference), _image(enhanced)
    if a.shape != b.shape:
        raise ShapeError("psnr needs equal shapes", a.shape, b.shape)
    mse = float(np.mean(np.square(a - b)))
    if mse == 0.0:
        return IDENTICAL
    return 10.0 * math.log10(p_max * p_max / mse)


def to_gray(x):
    x = _image(x)
    if x.ndim == 3:
        if x.shape[0] != 3:
            raise PreconditionError(f"expected (3, H, W) or (H, W), got {x.shape}")
        return LUMA[0] * x[0] + LUMA[1] * x[1] + LUMA[2] * x[2]
    if x.ndim != 2:
        raise PreconditionError(f"expected (3, H, W) or (H, W), got {x.shape}")
    return x


def gaussian_window(size, sigma):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, win):
    n = win.size
    rows = np.lib.stride_tricks.sliding_window_view(img, n, axis=0) @ win
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=1) @ win


def ssim_map(reference, enhanced, weights=DEFAULT_WEIGHTS):
    """Local SSIM at every position where the Gaussian window fits inside the image."""
    a, b = to_gray(reference), to_gray(enhanced)
    if a.shape != b.shape:
        raise ShapeError("ssim needs equal shapes", a.shape, b.shape)
    size = weights.ssim_window
    if min(a.shape) < size:
        raise PreconditionError(f"image {a.shape} is smaller than the {size}x{size} SSIM window")
    win = gaussian_window(size, weights.ssim_sigma)
    mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a * mu_a
    var_b = _filter_valid(b * b, win) - mu_b * mu_b
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    c1, c2 = weights.c1, weights.c2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(reference, enhanced, weights=DEFAULT_WEIGHTS):
    return float(np.mean(ssim_map(reference, enhanced, weights)))


# ---------------------------------------------------------------------- UCIQE

_SRGB_TO_XYZ = np.array([[0.412453, 0.357580, 0.180423],
                         [0.212671, 0.715160, 0.072169],
                         [0.019334, 0.119193, 0.950227]])
# white point taken from the matrix itself so that any gray maps to a = b = 0 exactly
_WHITE = _SRGB_TO_XYZ.sum(axis=1)


def rgb_to_lab(image):
    """sRGB ``(3, H, W)`` in [0, 1] to CIELab ``(3, H, W)`` (L in [0, 100])."""
    x = np.clip(_rgb(image), 0.0, 1.0)
    lin = np.where(x > 0.04045, ((x + 0.055) / 1.055) ** 2.4, x / 12.92)
    xyz = np.tensordot(_SRGB_TO_XYZ / _WHITE[:, None], lin, axes=1)
    eps, kappa = 216.0 / 24389.0, 24389.0 / 27.0
    f = np.where(xyz > eps, np.cbrt(xyz), (kappa * xyz + 16.0) / 116.0)
    return np.stack([116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])])


def uciqe_components(image):
    """``(sigma_c, con_l, mu_s)``: chroma std, luminance contrast, mean saturation.

    CIELab is scaled the way the common 8-bit implementation sees it:
    L/100 in [0, 1] and signed a/255, b/255. ``con_l`` is the luminance at the
    99 % rank minus the luminance at the 1 % rank; saturation is chroma / L
    (0 where L is 0).
    """
    lab = rgb_to_lab(image)
    lum = lab[0] / 100.0
    chroma = np.hypot(lab[1], lab[2]) / 255.0
    sigma_c = float(np.std(chroma))
    flat = np.sort(lum, axis=None)
    n = flat.size
    con_l = float(flat[int(n * 0.99)] - flat[int(n * 0.01)])
    sat = np.divide(chroma, lum, out=np.zeros_like(chroma), where=lum > 0)
    return sigma_c, con_l, float(np.mean(sat))


def weighted_sum(components, weights):
    return float(sum(w * c for w, c in zip(weights, components)))


def uciqe(image, weights=DEFAULT_WEIGHTS):
    return weighted_sum(uciqe_components(image), weights.uciqe)


# ----------------------------------------------------------------------- UIQM

def trimmed_mean(values, alpha_low=0.1, alpha_high=0.1):
    """Asymmetric alpha-trimmed mean: drop ceil(a_lo*K) smallest and floor(a_hi*K) largest."""
    x = np.sort(np.ravel(values))
    k = x.size
    lo = math.ceil(alpha_low * k)
    hi = math.floor(alpha_high * k)
    return float(x[lo:k - hi].mean())


def uicm(image255):
    """Colorfulness from the opponent channels RG = R - G and YB = (R + G)/2 - B."""
    r, g, b = image255
    rg = (r - g).ravel()
    yb = ((r + g) / 2.0 - b).ravel()
    mu_rg, mu_yb = trimmed_mean(rg), trimmed_mean(yb)
    var_rg = float(np.mean((rg - mu_rg) ** 2))
    var_yb = float(np.mean((yb - mu_yb) ** 2))
    return -0.0268 * math.hypot(mu_rg, mu_yb) + 0.1586 * math.sqrt(var_rg + var_yb)


def _offsets(residual):
    lo = residual // 2
    return (lo,) if residual % 2 == 0 else (lo, lo + 1)


def _tilings(x, block):
    """Non-overlapping ``block x block`` tiles of a centred crop, shaped (k2, k1, ..., block, block).

    When the leftover margin along an axis is odd there are two equally centred
    crops; both are yielded so block statistics can be averaged over them,
    which keeps the metrics exactly invariant under flips.
    """
    h, w = x.shape[-2:]
    k2, k1 = h // block, w // block
    if k1 < 1 or k2 < 1:
        raise PreconditionError(f"image {h}x{w} is smaller than one {block}x{block} block")
    lead = x.shape[:-2]
    nd = len(lead)
    for top in _offsets(h - k2 * block):
        for left in _offsets(w - k1 * block):
            crop = x[..., top:top + k2 * block, left:left + k1 * block]
            tiles = crop.reshape(lead + (k2, block, k1, block))
            yield np.moveaxis(tiles, (nd, nd + 2), (0, 1))


def eme(channel, block):
    """Measure of enhancement: 2/(k1 k2) * sum over blocks of log(max/min); blocks with a zero extreme count 0."""
    vals = []
    for tiles in _tilings(channel, block):
        mx = tiles.max(axis=(-2, -1))
        mn = tiles.min(axis=(-2, -1))
        ok = (mx > 0) & (mn > 0)
        ratio = np.where(ok, mx / np.where(ok, mn, 1.0), 1.0)
        vals.append(2.0 / mx.size * np.log(ratio).sum())
    return float(np.mean(vals))


def sobel_magnitude(channel):
    mag = np.hypot(ndimage.sobel(channel, axis=0), ndimage.sobel(channel, axis=1))
    peak = mag.max()
    return mag * (255.0 / peak) if peak > 0 else mag


def uism(image255, block=10):
    """Sharpness: luma-weighted EME of each channel's Sobel edge map times the channel."""
    return float(sum(w * eme(sobel_magnitude(c) * c, block) for w, c in zip(LUMA, image255)))


def uiconm(image255, block=10):
    """Contrast: logAMEE over blocks, each block's extrema taken across all three channels."""
    vals = []
    for tiles in _tilings(image255, block):
        mx = tiles.max(axis=(-3, -2, -1))
        mn = tiles.min(axis=(-3, -2, -1))
        top, bot = mx - mn, mx + mn
        ok = (top > 0) & (bot > 0)
        r = np.where(ok, top / np.where(ok, bot, 1.0), 1.0)
        vals.append(-1.0 / mx.size * np.sum(r * np.log(r)))
    return float(np.mean(vals))


def uiqm_components(image, block=10):
    x = _rgb(image) * 255.0
    if min(x.shape[1:]) < block:
        raise PreconditionError(f"image {x.shape[1:]} is smaller than the {block}x{block} UIQM block")
    return uicm(x), uism(x, block), uiconm(x, block)


def uiqm(image, weights=DEFAULT_WEIGHTS):
    return weighted_sum(uiqm_components(image, weights.block), weights.uiqm)
