"""Training objectives: spatial, frequency, phase and amplitude losses.

Every loss takes ``(N, C, H, W)`` tensors and reduces with the arithmetic
mean over all elements, batch included.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import fourier
from .exceptions import DimensionError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1  # frequency
    beta: float = 0.1  # phase
    gamma: float = 0.1  # amplitude
    ssim_coeff: float = 0.5

    def to_dict(self):
        return asdict(self)


@dataclass
class LossReport:
    """Scalar loss tensors plus the weighted total.

    ``total = l_spa + alpha * l_fre + beta * l_pha + gamma * l_amp`` with
    ``l_spa = l_vgg + ssim_coeff * l_ssim + l_1``.
    """

    l_pha: torch.Tensor
    l_amp: torch.Tensor
    l_spa: torch.Tensor
    l_fre: torch.Tensor
    l_vgg: torch.Tensor
    l_ssim: torch.Tensor
    l_1: torch.Tensor
    total: torch.Tensor
    extractor_fallback: bool = False

    TERMS = ("l_pha", "l_amp", "l_spa", "l_fre", "l_vgg", "l_ssim", "l_1", "total")

    def as_dict(self):
        return {name: _scalar(getattr(self, name)) for name in self.TERMS}

    def first_non_finite(self):
        for name in self.TERMS:
            if not math.isfinite(_scalar(getattr(self, name))):
                return name
        return None


def _scalar(value):
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


def _check_pair(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def phase_loss(y_p, g):
    """Mean absolute difference of per-channel DFT phases (no 2*pi wrapping)."""
    _check_pair(y_p, g)
    return (fourier.decompose(y_p, False).phase - fourier.decompose(g, False).phase).abs().mean()


def amplitude_loss(y_a, g):
    _check_pair(y_a, g)
    return (fourier.decompose(y_a, False).amplitude - fourier.decompose(g, False).amplitude).abs().mean()


def frequency_loss(y, g):
    """Mean abs difference of real parts plus that of imaginary parts."""
    _check_pair(y, g)
    diff = fourier.spectrum(y, False) - fourier.spectrum(g, False)
    return diff.real.abs().mean() + diff.imag.abs().mean()


def l1_loss(y, g):
    _check_pair(y, g)
    return (y - g).abs().mean()


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA, dtype=torch.float64):
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_map(a, b, data_range=1.0):
    """Local SSIM over valid 11x11 Gaussian windows, per channel."""
    _check_pair(a, b)
    h, w = a.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise DimensionError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    c = a.shape[1]
    window = gaussian_window(dtype=a.dtype).to(a.device).expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)
    filt = lambda x: F.conv2d(x, window, groups=c)  # noqa: E731
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))


def ssim_loss(y, g):
    """``1 - SSIM(y, g)``."""
    return 1.0 - ssim_map(y, g).mean()


class RandomPyramidExtractor(nn.Module):
    """Fixed, seeded 5-level conv pyramid used when no pretrained weights are
    available. Each level is a 3x3 conv + ReLU followed by 2x average
    pooling (ceil mode, so tiny inputs still reach every level)."""

    widths = (16, 32, 64, 64, 64)

    def __init__(self, seed=0, layers=(0, 1, 2, 3, 4)):
        super().__init__()
        self.layers = tuple(layers)
        gen = torch.Generator().manual_seed(seed)
        convs, cin = [], 3
        for width in self.widths:
            conv = nn.Conv2d(cin, width, 3, padding=1)
            bound = 1.0 / math.sqrt(cin * 9)
            with torch.no_grad():
                conv.weight.uniform_(-bound, bound, generator=gen)
                conv.bias.uniform_(-bound, bound, generator=gen)
            convs.append(conv)
            cin = width
        self.convs = nn.ModuleList(convs)
        self.requires_grad_(False)

    def forward(self, x):
        feats = []
        for i, conv in enumerate(self.convs):
            x = F.relu(conv(x.to(conv.weight.dtype)))
            if i in self.layers:
                feats.append(x)
            if i < len(self.convs) - 1:
                x = F.avg_pool2d(x, 2, ceil_mode=True)
        return feats


class VGGExtractor(nn.Module):
    """VGG16 ``features`` loaded from a user-supplied state-dict file."""

    def __init__(self, weights_path, layers=(3, 8, 15, 22)):
        super().__init__()
        from torchvision.models import vgg16

        net = vgg16(weights=None).features
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        state = {k.removeprefix("features."): v for k, v in state.items() if not k.startswith("classifier")}
        net.load_state_dict(state)
        self.net = net[: max(layers) + 1].eval().requires_grad_(False)
        self.layers = tuple(layers)
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def forward(self, x):
        x = (x.to(self.mean.dtype) - self.mean) / self.std
        feats = []
        for i, layer in enumerate(self.net):
            x = layer(x)
            if i in self.layers:
                feats.append(x)
        return feats


def make_extractor(perceptual_weights=None, layers=None, seed=0):
    """Return ``(extractor, fallback)``.

    Loads VGG weights from ``perceptual_weights`` when the file exists;
    otherwise returns the seeded random pyramid with ``fallback=True``.
    """
    if perceptual_weights and Path(perceptual_weights).is_file():
        return (VGGExtractor(perceptual_weights, layers) if layers else VGGExtractor(perceptual_weights)), False
    if perceptual_weights:
        warnings.warn(f"perceptual weights {perceptual_weights} not found; using random extractor", stacklevel=2)
    return (RandomPyramidExtractor(seed, layers) if layers else RandomPyramidExtractor(seed)), True


def perceptual_loss(y, g, extractor):
    """Mean over layers of the mean absolute feature difference."""
    _check_pair(y, g)
    feats_y, feats_g = extractor(y), extractor(g)
    losses = [(fy - fg).abs().mean() for fy, fg in zip(feats_y, feats_g)]
    return torch.stack(losses).mean().to(y.dtype)


def total_loss(outputs, g, weights=LossWeights(), extractor=None, extractor_fallback=None):
    """Weighted sum of all terms for ``outputs = (y, y_p, y_a)``."""
    if extractor is None:
        extractor, fallback = make_extractor()
    else:
        fallback = isinstance(extractor, RandomPyramidExtractor)
    if extractor_fallback is not None:
        fallback = extractor_fallback
    y, y_p, y_a = outputs
    l_vgg = perceptual_loss(y, g, extractor)
    l_ssim = ssim_loss(y, g)
    l_1 = l1_loss(y, g)
    l_spa = l_vgg + weights.ssim_coeff * l_ssim + l_1
    l_fre = frequency_loss(y, g)
    l_pha = phase_loss(y_p, g)
    l_amp = amplitude_loss(y_a, g)
    total = l_spa + weights.alpha * l_fre + weights.beta * l_pha + weights.gamma * l_amp
    return LossReport(l_pha, l_amp, l_spa, l_fre, l_vgg, l_ssim, l_1, total, fallback)
