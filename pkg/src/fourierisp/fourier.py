"""Unitary 2-D DFT amplitude/phase decomposition.

All functions accept either torch tensors or numpy arrays:

* torch tensors are transformed over the last two axes, so batched
  ``(N, C, H, W)`` feature maps work directly and stay differentiable;
* numpy arrays are treated as channels-last ``(H, W)`` or ``(H, W, C)``
  images and numpy arrays are returned.

The forward transform carries the ``1/sqrt(HW)`` factor (``norm="ortho"``),
DC sits at index ``(0, 0)`` and no frequency shift is applied.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
import torch

from .exceptions import DimensionError, NumericError

NORM = "ortho"


class SpectralPair(NamedTuple):
    amplitude: object
    phase: object
    norm: str = NORM


def _to_tensor(x):
    """Return ``(tensor with spatial dims last, restore callable)``."""
    if isinstance(x, torch.Tensor):
        return x, lambda t: t
    arr = np.asarray(x)
    if not (np.issubdtype(arr.dtype, np.floating) or np.issubdtype(arr.dtype, np.complexfloating)):
        arr = arr.astype(np.float64)
    if arr.ndim == 2:
        return torch.from_numpy(arr), lambda t: t.detach().numpy()
    if arr.ndim == 3:
        chw = torch.from_numpy(np.ascontiguousarray(np.moveaxis(arr, -1, 0)))
        return chw, lambda t: np.moveaxis(t.detach().numpy(), 0, -1)
    raise DimensionError(f"numpy input must be (H, W) or (H, W, C), got {arr.shape}")


def spectrum(x, check_finite=True):
    """Complex unitary DFT over the spatial axes."""
    t, restore = _to_tensor(x)
    if t.ndim < 2 or t.shape[-1] < 1 or t.shape[-2] < 1:
        raise DimensionError(f"need at least two non-empty spatial axes, got {tuple(t.shape)}")
    if check_finite and not t.is_complex() and not torch.isfinite(t).all():
        raise NumericError("non-finite values in Fourier input")
    return restore(torch.fft.fft2(t, norm=NORM))


def polar(z):
    """Amplitude and phase of a complex tensor.

    At exact zeros both are 0 with a zero gradient (no NaN).
    """
    amplitude = torch.abs(z)
    phase = torch.angle(z)
    # angle(-1 - 0j) is -pi; fold onto the half-open range (-pi, pi]
    phase = torch.where(phase <= -math.pi, phase + 2 * math.pi, phase)
    return amplitude, phase


def decompose(x, check_finite=True):
    """Per-channel amplitude and phase (in ``(-pi, pi]``) of ``x``."""
    t, restore = _to_tensor(x)
    z = spectrum(t, check_finite)
    amplitude, phase = polar(z)
    return SpectralPair(restore(amplitude), restore(phase))


def compose_spectrum(amplitude, phase):
    """``amplitude * exp(i * phase)``; amplitude may be negative."""
    return torch.complex(amplitude * torch.cos(phase), amplitude * torch.sin(phase))


def recompose_complex(sp):
    """Inverse unitary DFT of ``A * exp(i * phi)``, keeping the imaginary part."""
    amplitude, restore = _to_tensor(sp.amplitude)
    phase, _ = _to_tensor(sp.phase)
    return restore(torch.fft.ifft2(compose_spectrum(amplitude, phase), norm=NORM))


def recompose(sp, check_real=False, atol=1e-4):
    """Real part of the inverse transform of ``(amplitude, phase)``.

    With ``check_real`` the discarded imaginary residue must stay below
    ``atol``, which holds for Hermitian-symmetric spectra of real signals.
    """
    amplitude, restore = _to_tensor(sp.amplitude)
    if not isinstance(sp.amplitude, torch.Tensor) and np.any(np.asarray(sp.amplitude) < 0):
        raise NumericError("amplitude must be nonnegative")
    phase, _ = _to_tensor(sp.phase)
    z = torch.fft.ifft2(compose_spectrum(amplitude, phase), norm=NORM)
    if check_real:
        residue = z.imag.detach().abs().max().item() if z.numel() else 0.0
        if residue > atol:
            raise NumericError(f"imaginary residue {residue:.3g} exceeds {atol:g}")
    return restore(z.real)


def swap_amplitude(a, b):
    """Exchange amplitude spectra: ``(A(b) with P(a), A(a) with P(b))``."""
    if tuple(np.shape(a)) != tuple(np.shape(b)):
        raise DimensionError(f"shape mismatch: {tuple(np.shape(a))} vs {tuple(np.shape(b))}")
    sa, sb = decompose(a), decompose(b)
    return recompose(SpectralPair(sb.amplitude, sa.phase)), recompose(SpectralPair(sa.amplitude, sb.phase))


def log_amplitude_image(x):
    """Display mapping of ``log1p(amplitude)`` scaled per channel to [0, 1]."""
    amp = np.log1p(np.asarray(decompose(np.asarray(x, dtype=np.float64)).amplitude))
    peak = amp.reshape(-1, amp.shape[-1]).max(axis=0) if amp.ndim == 3 else amp.max()
    return amp / np.where(peak > 0, peak, 1.0)


def phase_image(x):
    """Display mapping of phase from ``(-pi, pi]`` to ``(0, 1]``."""
    phase = np.asarray(decompose(np.asarray(x, dtype=np.float64)).phase)
    return (phase + np.pi) / (2 * np.pi)
