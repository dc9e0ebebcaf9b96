"""Structural-similarity loss and evaluation metrics.

The training objective is the negative of the Gaussian-windowed SSIM index;
PSNR, MAE and MSE support evaluation and the loss-choice comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ConvParams, ShapeError, Tensor

__all__ = [
    "SsimConfig",
    "ssim",
    "neg_ssim_loss",
    "psnr",
    "mae_loss",
    "mse_loss",
    "to_luma",
]


@dataclass
class SsimConfig:
    """Canonical settings: 11x11 Gaussian window (sigma 1.5), stabilizers
    c1=(0.01 L)^2 and c2=(0.03 L)^2 for dynamic range L."""

    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    @property
    def c1(self):
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self):
        return (self.k2 * self.dynamic_range) ** 2


def gaussian_window(size: int, sigma: float, dtype=np.float64) -> np.ndarray:
    """2-D Gaussian weights normalized to sum to one."""
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    win = np.outer(g, g)
    return (win / win.sum()).astype(dtype)


_window_cache: dict = {}


def _window_filter(channels: int, cfg: SsimConfig, dtype) -> ConvParams:
    """Per-channel Gaussian filtering expressed as a (C,C,k,k) convolution with
    the window on the channel diagonal; weights are constants, not trained."""
    key = (channels, cfg.window_size, cfg.sigma, np.dtype(dtype).name)
    p = _window_cache.get(key)
    if p is None:
        win = gaussian_window(cfg.window_size, cfg.sigma, dtype)
        w = np.zeros((channels, channels, cfg.window_size, cfg.window_size), dtype=dtype)
        for c in range(channels):
            w[c, c] = win
        p = ConvParams(weight=Tensor(w, dtype=dtype), bias=None, stride=1, padding=0)
        _window_cache[key] = p
    return p


def ssim(a: Tensor, b: Tensor, cfg: SsimConfig | None = None) -> Tensor:
    """Mean local SSIM index over valid window positions; 1 iff a equals b.

    Differentiable in both arguments; local means/variances/covariance come
    from Gaussian-windowed convolutions without padding.
    """
    cfg = cfg or SsimConfig()
    if a.shape != b.shape:
        raise ShapeError(f"ssim operand shapes differ: {a.shape} vs {b.shape}")
    n, c, h, w = a.shape
    if h < cfg.window_size or w < cfg.window_size:
        raise ShapeError(
            f"ssim window {cfg.window_size} exceeds image size {h}x{w}"
        )
    win = _window_filter(c, cfg, a.dtype)
    mu_a = T.conv2d(a, win)
    mu_b = T.conv2d(b, win)
    mu_aa = T.mul(mu_a, mu_a)
    mu_bb = T.mul(mu_b, mu_b)
    mu_ab = T.mul(mu_a, mu_b)
    var_a = T.sub(T.conv2d(T.mul(a, a), win), mu_aa)
    var_b = T.sub(T.conv2d(T.mul(b, b), win), mu_bb)
    cov = T.sub(T.conv2d(T.mul(a, b), win), mu_ab)
    num = T.mul(T.scale(mu_ab, 2.0, cfg.c1), T.scale(cov, 2.0, cfg.c2))
    den = T.mul(T.scale(T.add(mu_aa, mu_bb), 1.0, cfg.c1), T.scale(T.add(var_a, var_b), 1.0, cfg.c2))
    return T.mean_all(T.div(num, den))


def neg_ssim_loss(b_hat: Tensor, b: Tensor, cfg: SsimConfig | None = None) -> Tensor:
    """-SSIM(b_hat, b); minimizing drives the similarity toward 1."""
    return T.scale(ssim(b_hat, b, cfg), -1.0)


def mse_loss(b_hat: Tensor, b: Tensor) -> Tensor:
    d = T.sub(b_hat, b)
    return T.mean_all(T.mul(d, d))


def mae_loss(b_hat: Tensor, b: Tensor) -> Tensor:
    return T.mean_all(T.abs_val(T.sub(b_hat, b)))


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical inputs (text
    reports cap the sentinel at 100 dB)."""
    da = a.data if isinstance(a, Tensor) else np.asarray(a)
    db = b.data if isinstance(b, Tensor) else np.asarray(b)
    if da.shape != db.shape:
        raise ShapeError(f"psnr operand shapes differ: {da.shape} vs {db.shape}")
    mse = float(np.mean((da.astype(np.float64) - db.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def to_luma(img: np.ndarray) -> np.ndarray:
    """BT.601 luma from an (..., 3, H, W) channel-first RGB array."""
    if img.shape[-3] != 3:
        raise ShapeError(f"luma conversion expects 3 channels, got shape {img.shape}")
    r, g, b = img[..., 0, :, :], img[..., 1, :, :], img[..., 2, :, :]
    return (0.299 * r + 0.587 * g + 0.114 * b)[..., None, :, :]
