"""Image fidelity metrics on ``(H, W, C)`` float images in [0, 1]."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InvalidParameterError

WINDOW = 11
SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2
# JSON has no infinity; identical images serialise their PSNR as this value
PSNR_SENTINEL = 1e9


@dataclass(frozen=True)
class ImageMetrics:
    psnr: float
    ssim: float
    mae: float

    def as_dict(self) -> dict:
        psnr = PSNR_SENTINEL if math.isinf(self.psnr) else self.psnr
        return {"psnr": psnr, "ssim": self.ssim, "mae": self.mae}


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


@lru_cache(maxsize=16)
def _band(n: int, w_bytes: bytes) -> np.ndarray:
    """``(n, n)`` matrix applying the 1D window with zero padding ("same" size)."""
    w = np.frombuffer(w_bytes)
    r = w.size // 2
    m = np.zeros((n, n))
    for off in range(-r, r + 1):
        i = np.arange(max(0, -off), min(n, n - off))
        m[i, i + off] = w[off + r]
    m.setflags(write=False)
    return m


def _filter(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    # zero-padded "same" correlation over the two spatial axes of (S, H, W, C)
    s, h, wd, c = img.shape
    key = np.ascontiguousarray(w, dtype=np.float64).tobytes()
    out = np.matmul(_band(h, key), img.reshape(s, h, wd * c)).reshape(s, h, wd, c)
    return np.matmul(_band(wd, key), out)


def psnr(a, b) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((np.clip(a, 0, 1) - np.clip(b, 0, 1)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def mae(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean(np.abs(a - b)))


def ssim_with_grad(a, b, want_grad: bool = True):
    """Mean SSIM over pixels and channels, and its gradient with respect to ``a``.

    Gaussian window 11x11, sigma 1.5, zero padding at the borders.
    """
    a, b = _check_pair(a, b)
    if a.shape[0] < WINDOW or a.shape[1] < WINDOW:
        raise InvalidParameterError(f"images must be at least {WINDOW}x{WINDOW}")
    w = gaussian_window()
    mu_a, mu_b, e_aa, e_bb, e_ab = _filter(np.stack([a, b, a * a, b * b, a * b]), w)
    var_a = e_aa - mu_a**2
    var_b = e_bb - mu_b**2
    cov = e_ab - mu_a * mu_b
    num1 = 2 * mu_a * mu_b + C1
    num2 = 2 * cov + C2
    den1 = mu_a**2 + mu_b**2 + C1
    den2 = var_a + var_b + C2
    smap = num1 * num2 / (den1 * den2)
    value = float(smap.mean())
    if not want_grad:
        return value, None
    den = den1 * den2
    # partials of the SSIM map with respect to mu_a, E[a^2] and E[ab]
    d_mu = (2 * mu_b * num2 - 2 * mu_b * num1) / den - smap * (2 * mu_a / den1) + smap * (
        2 * mu_a / den2
    )
    d_eaa = -smap / den2
    d_eab = 2 * num1 / den
    scale = 1.0 / smap.size
    # the symmetric window makes the adjoint of the zero-padded filter the filter itself
    f_mu, f_aa, f_ab = _filter(np.stack([d_mu, d_eaa, d_eab]), w)
    grad = f_mu + 2 * a * f_aa + b * f_ab
    return value, grad * scale


def ssim(a, b) -> float:
    return ssim_with_grad(a, b, want_grad=False)[0]


def image_metrics(a, b) -> ImageMetrics:
    return ImageMetrics(psnr(a, b), ssim(a, b), mae(a, b))
