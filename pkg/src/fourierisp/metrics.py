"""Full-reference image quality metrics on ``(H, W, C)`` numpy images."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .exceptions import DimensionError

WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(peak**2 / mse))


def _gaussian_window():
    coords = np.arange(WINDOW) - (WINDOW - 1) / 2
    g = np.exp(-(coords**2) / (2 * SIGMA**2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_cs_maps(x, y, data_range, boundary="valid"):
    w = _gaussian_window()
    if boundary == "valid":
        filt = lambda img: convolve2d(img, w, mode="valid")  # noqa: E731  (window is symmetric)
    elif boundary == "wrap":
        filt = lambda img: convolve2d(img, w, mode="same", boundary="wrap")  # noqa: E731
    else:
        raise ValueError(f"boundary must be 'valid' or 'wrap', got {boundary!r}")
    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x**2
    syy = filt(y * y) - mu_y**2
    sxy = filt(x * y) - mu_x * mu_y
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    luminance = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    return luminance * cs, cs


def _check_window(shape):
    if shape[0] < WINDOW or shape[1] < WINDOW:
        raise DimensionError(f"image {shape[0]}x{shape[1]} smaller than the {WINDOW}x{WINDOW} SSIM window")


def ssim(a, b, data_range=1.0, boundary="valid"):
    """Mean SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels.

    ``boundary="valid"`` is the canonical definition (windows fully inside
    the image). ``"wrap"`` treats the image as periodic, which makes the
    score exactly invariant to circular translation of both inputs.
    """
    a, b = _pair(a, b)
    _check_window(a.shape)
    return float(np.mean([
        _ssim_cs_maps(a[..., c], b[..., c], data_range, boundary)[0].mean() for c in range(a.shape[-1])
    ]))


def _downsample(x):
    h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim_min_size(levels=5):
    return 2 ** (levels - 1) * WINDOW


def ms_ssim(a, b, levels=5, data_range=1.0, weights=MS_SSIM_WEIGHTS, boundary="valid"):
    """Multi-scale SSIM with 2x2 mean downsampling between scales.

    Contrast-structure terms of the coarser levels and the full SSIM of the
    last level are clipped at zero before exponentiation, so the result is
    in [0, 1].
    """
    a, b = _pair(a, b)
    if levels != len(weights):
        weights = np.asarray(weights[:levels]) / np.sum(weights[:levels])
    required = ms_ssim_min_size(levels)
    if min(a.shape[:2]) < required:
        raise DimensionError(
            f"MS-SSIM with {levels} levels needs at least {required}x{required}, got {a.shape[0]}x{a.shape[1]}"
        )
    per_channel = []
    for c in range(a.shape[-1]):
        x, y = a[..., c], b[..., c]
        value = 1.0
        for level in range(levels):
            s_map, cs_map = _ssim_cs_maps(x, y, data_range, boundary)
            term = s_map.mean() if level == levels - 1 else cs_map.mean()
            value *= max(term, 0.0) ** weights[level]
            x, y = _downsample(x), _downsample(y)
        per_channel.append(value)
    return float(np.mean(per_channel))


def lpips_hook(a, b, external_scorer=None):
    """Delegate to ``external_scorer(a, b)``; ``None`` without a scorer."""
    if external_scorer is None:
        return None
    return float(external_scorer(a, b))


def quantize8(img):
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    ms_ssim: float | None = None
    lpips: float | None = None

    def as_dict(self):
        return asdict(self)


def evaluate_pair(pred, gt, quantize=True, lpips_scorer=None, ms_ssim_levels=5):
    """Metrics of one prediction; MS-SSIM is ``None`` for images too small
    for the requested number of levels."""
    pred, gt = _pair(pred, gt)
    if quantize:
        pred, gt = quantize8(pred), quantize8(gt)
    msv = ms_ssim(pred, gt, ms_ssim_levels) if min(pred.shape[:2]) >= ms_ssim_min_size(ms_ssim_levels) else None
    return MetricReport(psnr(pred, gt), ssim(pred, gt), msv, lpips_hook(pred, gt, lpips_scorer))


FIELDS = ("psnr_db", "ssim", "ms_ssim", "lpips")


def aggregate(rows):
    """Arithmetic mean of each field over rows where it is present."""
    mean = {}
    for name in FIELDS:
        values = [getattr(r, name) for r in rows if getattr(r, name) is not None]
        mean[name] = float(sum(values) / len(values)) if values else None
    return MetricReport(**mean)


def _fmt(value):
    if value is None:
        return "-"
    if math.isinf(value):
        return "inf"
    return f"{value:.4f}"


def format_table(names, rows, mean):
    lines = [f"{'image':<24}{'PSNR':>10}{'SSIM':>10}{'MS-SSIM':>10}{'LPIPS':>10}"]
    for name, row in zip(names, rows):
        lines.append(f"{name:<24}" + "".join(f"{_fmt(getattr(row, f)):>10}" for f in FIELDS))
    lines.append(f"{'mean':<24}" + "".join(f"{_fmt(getattr(mean, f)):>10}" for f in FIELDS))
    return "\n".join(lines) + "\n"


def _toml_value(value):
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(value)


def write_report(out_dir, names, rows, mean, extra=None):
    """Write ``metrics.txt`` (table) and ``metrics.toml`` (key-value)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.txt").write_text(format_table(names, rows, mean))
    lines = []
    lines += [f"{k} = {_toml_value(v)}" for k, v in (extra or {}).items() if v is not None]
    sections = [("mean", mean)] + [(f'images."{name}"', row) for name, row in zip(names, rows)]
    for header, row in sections:
        lines.append(f"\n[{header}]")
        # absent metrics are omitted; TOML has no null
        lines += [f"{f} = {_toml_value(getattr(row, f))}" for f in FIELDS if getattr(row, f) is not None]
    (out_dir / "metrics.toml").write_text("\n".join(lines) + "\n")
    return out_dir / "metrics.txt", out_dir / "metrics.toml"
