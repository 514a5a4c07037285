"""Structural similarity with an 11x11 Gaussian window and its gradient.

SSIM is averaged over every fully-contained window position and over
channels; no border padding is used.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from segfield.errors import InvalidInputError

WINDOW = 11
SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2
_HALF = WINDOW // 2


def _kernel() -> np.ndarray:
    x = np.arange(WINDOW) - _HALF
    k = np.exp(-(x**2) / (2 * SIGMA**2))
    return k / k.sum()


_K = _kernel()


def _filter(img: np.ndarray) -> np.ndarray:
    """Valid-window Gaussian filter over the first two axes."""
    out = correlate1d(img, _K, axis=0, mode="constant")
    out = correlate1d(out, _K, axis=1, mode="constant")
    return out[_HALF:-_HALF, _HALF:-_HALF]


def _filter_adjoint(grad: np.ndarray) -> np.ndarray:
    pad = [(_HALF, _HALF), (_HALF, _HALF)] + [(0, 0)] * (grad.ndim - 2)
    g = np.pad(grad, pad)
    g = correlate1d(g, _K, axis=0, mode="constant")
    return correlate1d(g, _K, axis=1, mode="constant")


def _as3d(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    return a[..., None] if a.ndim == 2 else a


def _check(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise InvalidInputError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.shape[0] < WINDOW or x.shape[1] < WINDOW:
        raise InvalidInputError(f"images must be at least {WINDOW}x{WINDOW} for SSIM")


def ssim_with_grad(img, ref) -> tuple[float, np.ndarray]:
    """SSIM of ``img`` against ``ref`` and its gradient with respect to ``img``."""
    x, y = _as3d(img), _as3d(ref)
    _check(x, y)
    mx, my = _filter(x), _filter(y)
    pxx, pyy, pxy = _filter(x * x), _filter(y * y), _filter(x * y)
    a1 = 2 * mx * my + C1
    a2 = 2 * (pxy - mx * my) + C2
    b1 = mx * mx + my * my + C1
    b2 = (pxx - mx * mx) + (pyy - my * my) + C2
    s = (a1 * a2) / (b1 * b2)
    n = s.size
    d_m = s * (2 * my / a1 - 2 * my / a2 - 2 * mx / b1 + 2 * mx / b2) / n
    d_p = -s / b2 / n
    d_q = 2 * s / a2 / n
    grad = _filter_adjoint(d_m) + 2 * x * _filter_adjoint(d_p) + y * _filter_adjoint(d_q)
    return float(s.mean()), grad.reshape(np.shape(img))


def ssim(img, ref) -> float:
    x, y = _as3d(img), _as3d(ref)
    _check(x, y)
    mx, my = _filter(x), _filter(y)
    vx = _filter(x * x) - mx * mx
    vy = _filter(y * y) - my * my
    cxy = _filter(x * y) - mx * my
    s = ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
    return float(s.mean())
