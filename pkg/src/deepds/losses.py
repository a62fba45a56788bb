"""Pixel-wise, structural and adversarial losses on ``(B, 1, Y, X)`` tensors.

Every supervised loss accepts an optional boolean ``mask``; invalid cells are
ignored (pixel losses) or neutralized to zero in both inputs (SSIM family).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F

LOSS_KINDS = ("mae", "mse", "dssim", "msdssim", "dssim_mae")
# standard MS-SSIM exponents, finest scale first
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossSpec:
    kind: str = "mae"
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03
    data_range: float = 1.0
    ms_scales: int = 5
    adversarial_lambda: float = 100.0

    def __post_init__(self):
        kind = {"dssim+mae": "dssim_mae", "ms_dssim": "msdssim", "msdssim+mae": "msdssim"}.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        if kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.kind!r}; expected one of {LOSS_KINDS}")
        if not self.data_range > 0:
            raise ValueError("data_range must be > 0")
        if self.ssim_window % 2 != 1:
            raise ValueError("ssim_window must be odd")
        if self.adversarial_lambda < 0:
            raise ValueError("adversarial_lambda must be >= 0")

    def but(self, **changes) -> "LossSpec":
        return replace(self, **changes)


def _masked_mean(values, mask):
    if mask is None:
        return values.mean()
    mask = mask.to(torch.bool)
    n = mask.sum()
    if n == 0:
        raise ValueError("no valid cells")
    return torch.where(mask, values, torch.zeros_like(values)).sum() / n


def mae(pred, target, mask=None):
    return _masked_mean((pred - target).abs(), mask)


def mse(pred, target, mask=None):
    return _masked_mean((pred - target) ** 2, mask)


def gaussian_window(size: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    r = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(r**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)[None, None]


def _as4d(x):
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[:, None]
    return x


def _ssim_terms(x, y, spec: LossSpec):
    """Per-window luminance and contrast-structure maps (``valid`` convolution)."""
    x, y = _as4d(x), _as4d(y)
    if min(x.shape[-2:]) < spec.ssim_window:
        raise ValueError(
            f"grid too small for SSIM window: {tuple(x.shape[-2:])} < {spec.ssim_window}"
        )
    c = x.shape[1]
    win = gaussian_window(spec.ssim_window, spec.ssim_sigma, x.dtype).to(x.device).repeat(c, 1, 1, 1)

    def filt(z):
        return F.conv2d(z, win, groups=c)

    c1 = (spec.ssim_k1 * spec.data_range) ** 2
    c2 = (spec.ssim_k2 * spec.data_range) ** 2
    mu_x, mu_y = filt(x), filt(y)
    # second moments on mean-shifted copies: same values, far less cancellation
    xs = x - x.mean(dim=(-2, -1), keepdim=True).detach()
    ys = y - y.mean(dim=(-2, -1), keepdim=True).detach()
    mx, my = filt(xs), filt(ys)
    sxx = filt(xs * xs) - mx**2
    syy = filt(ys * ys) - my**2
    sxy = filt(xs * ys) - mx * my
    lum = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return lum, cs


def _neutralize(x, y, mask):
    if mask is None:
        return x, y
    zero = torch.zeros_like(x)
    return torch.where(mask, x, zero), torch.where(mask, y, zero)


def ssim(x, y, spec: LossSpec | None = None, mask=None):
    """Mean SSIM over Gaussian windows."""
    spec = spec or LossSpec()
    x, y = _neutralize(x, y, mask)
    lum, cs = _ssim_terms(x, y, spec)
    return (lum * cs).mean()


def dssim(x, y, spec: LossSpec | None = None, mask=None):
    return (1 - ssim(x, y, spec, mask)) / 2


def max_scales(grid_min: int, window: int) -> int:
    """Largest n with ``window * 2**(n-1) <= grid_min``; 0 if even one scale does not fit."""
    n = 0
    while window * 2**n <= grid_min:
        n += 1
    return n


def ms_ssim(x, y, spec: LossSpec | None = None, scales: int | None = None, mask=None):
    """Multi-scale SSIM: contrast-structure at every scale, luminance at the coarsest.

    Scales are capped so the window fits the coarsest grid; exponents are the
    standard ones truncated and renormalized to sum to one.
    """
    spec = spec or LossSpec()
    x, y = _neutralize(_as4d(x), _as4d(y), None if mask is None else _as4d(mask))
    requested = spec.ms_scales if scales is None else scales
    n = min(requested, max_scales(min(x.shape[-2:]), spec.ssim_window))
    if n < 1:
        raise ValueError(f"insufficient scales: grid {tuple(x.shape[-2:])} smaller than window {spec.ssim_window}")
    weights = torch.tensor(MS_SSIM_WEIGHTS[:n], dtype=x.dtype)
    weights = weights / weights.sum()
    value = x.new_ones(())
    for i in range(n):
        lum, cs = _ssim_terms(x, y, spec)
        term = (lum * cs).mean() if i == n - 1 else cs.mean()
        w = float(weights[i])
        value = value * (term if w == 1.0 else term.clamp_min(1e-6) ** w)
        if i < n - 1:
            x, y = F.avg_pool2d(x, 2), F.avg_pool2d(y, 2)
    return value


def ms_dssim(x, y, spec: LossSpec | None = None, scales: int | None = None, mask=None):
    return (1 - ms_ssim(x, y, spec, scales, mask)) / 2


def supervised_loss(pred, target, mask, spec: LossSpec):
    if spec.kind == "mae":
        return mae(pred, target, mask)
    if spec.kind == "mse":
        return mse(pred, target, mask)
    if spec.kind == "dssim":
        return dssim(pred, target, spec, mask)
    if spec.kind == "msdssim":
        return ms_dssim(pred, target, spec, mask=mask)
    return dssim(pred, target, spec, mask) + mae(pred, target, mask)


def cgan_losses(d_real, d_fake, pred, target, mask, lam: float):
    """Generator and discriminator losses of the conditional adversarial objective.

    ``d_loss = -log D(real) - log(1 - D(fake))`` and
    ``g_loss = -log D(fake) + lam * mae(pred, target)``.
    Probabilities are clamped to ``[1e-7, 1 - 1e-7]``.
    """
    d_real = torch.as_tensor(d_real).clamp(PROB_EPS, 1 - PROB_EPS)
    d_fake = torch.as_tensor(d_fake).clamp(PROB_EPS, 1 - PROB_EPS)
    d_loss = (-torch.log(d_real) - torch.log(1 - d_fake)).mean()
    g_loss = -torch.log(d_fake).mean()
    if lam:
        g_loss = g_loss + lam * mae(pred, target, mask)
    return g_loss, d_loss


def psnr_from_mse(mse_value: float, data_range: float, cap: float = 99.0) -> float:
    if mse_value < data_range**2 * 10 ** (-cap / 10):
        return cap
    return 10.0 * math.log10(data_range**2 / mse_value)
