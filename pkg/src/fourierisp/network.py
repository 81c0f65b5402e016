"""FourierISP network: phase-enhance, amplitude-refine and color-adaptation
subnets built from Fourier refine blocks.

Tensors are ``(N, C, H, W)``. The model consumes the packed RAW at half
resolution and the demosaiced RAW at full resolution and returns the final
image together with the two RGB projections used for supervision.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import fourier
from .exceptions import ConfigError, DimensionError
from .imaging import RawImage, demosaic, pack_bayer

ALLOWED_CHANNELS = (16, 24, 48)
PUBLISHED_PARAMS_M = {16: 2.75, 24: 6.17, 48: 24.6}
NEG_SLOPE = 0.2


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 24
    n_blocks_pes: int = 4
    n_blocks_ars: int = 4
    cas_scales: int = 4
    cas_blocks: int = 3
    enable_phase_branch: bool = True
    enable_amplitude_branch: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.base_channels not in ALLOWED_CHANNELS:
            raise ConfigError(f"base_channels must be one of {ALLOWED_CHANNELS}, got {self.base_channels}")
        for name in ("n_blocks_pes", "n_blocks_ars", "cas_blocks"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.cas_scales < 2:
            raise ConfigError(f"cas_scales must be >= 2, got {self.cas_scales}")

    @property
    def divisor(self):
        """Required divisibility of the full-resolution height and width."""
        return 2 ** (self.cas_scales - 1)

    def to_dict(self):
        return asdict(self)


class ModelOutputs(NamedTuple):
    y: torch.Tensor
    y_p: torch.Tensor
    y_a: torch.Tensor


def conv3x3(cin, cout):
    return nn.Conv2d(cin, cout, 3, padding=1)


def conv1x1(cin, cout):
    return nn.Conv2d(cin, cout, 1)


def _check_same(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"feature shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


class SpectralConv(nn.Sequential):
    """Two pointwise convs over an amplitude or phase map."""

    def __init__(self, channels):
        super().__init__(conv1x1(channels, channels), nn.LeakyReLU(NEG_SLOPE), conv1x1(channels, channels))


class SpatialConv(nn.Sequential):
    def __init__(self, channels):
        super().__init__(conv3x3(channels, channels), nn.LeakyReLU(NEG_SLOPE), conv3x3(channels, channels))


class FourierRefineBlock(nn.Module):
    """Residual block whose frequency path convolves only the amplitude
    (``component="amplitude"``) or only the phase (``component="phase"``).

    ``out = F2 + Conv(f_s) + f_s`` where ``F1 = Conv(f_f)`` and ``F2`` is
    ``F1`` with the chosen spectral component passed through a
    :class:`SpectralConv`. With ``frequency=False`` the spectral path is the
    identity (``F2 = F1``).
    """

    def __init__(self, channels, component, frequency=True):
        super().__init__()
        if component not in ("amplitude", "phase"):
            raise ValueError(f"component must be 'amplitude' or 'phase', got {component!r}")
        self.component = component
        self.frequency = frequency
        self.pre = conv1x1(channels, channels)
        self.freq_conv = SpectralConv(channels) if frequency else None
        self.spatial = SpatialConv(channels)

    def frequency_path(self, f1, keep_complex=False):
        if not self.frequency:
            return f1
        amplitude, phase = fourier.decompose(f1)[:2]
        if self.component == "amplitude":
            amplitude = self.freq_conv(amplitude)
        else:
            phase = self.freq_conv(phase)
        z = fourier.recompose_complex(fourier.SpectralPair(amplitude, phase))
        # modified spectra are not Hermitian; the real part is the projection
        return z if keep_complex else z.real

    def forward(self, f_f, f_s=None):
        if f_s is None:
            f_s = f_f
        _check_same(f_f, f_s)
        return self.frequency_path(self.pre(f_f)) + self.spatial(f_s) + f_s


class FARB(FourierRefineBlock):
    def __init__(self, channels, frequency=True):
        super().__init__(channels, "amplitude", frequency)


class FPRB(FourierRefineBlock):
    def __init__(self, channels, frequency=True):
        super().__init__(channels, "phase", frequency)


class PES(nn.Module):
    """Phase enhance subnet: FPRBs on the packed RAW, then PixelShuffle x2."""

    def __init__(self, base_channels, n_blocks, frequency=True):
        super().__init__()
        width = 4 * base_channels
        self.head = conv3x3(4, width)
        self.blocks = nn.ModuleList(FPRB(width, frequency) for _ in range(n_blocks))
        self.tail = conv3x3(width, width)
        self.upsample = nn.PixelShuffle(2)
        self.proj = conv1x1(base_channels, 3)

    def forward(self, r_pack):
        if r_pack.ndim != 4 or r_pack.shape[1] != 4:
            raise DimensionError(f"packed RAW must be (N, 4, H/2, W/2), got {tuple(r_pack.shape)}")
        x = self.head(r_pack)
        for block in self.blocks:
            x = block(x, x)
        f_p = self.upsample(self.tail(x))
        return f_p, self.proj(f_p)


class ARS(nn.Module):
    """Amplitude refine subnet: FARBs on the demosaiced RAW."""

    def __init__(self, base_channels, n_blocks, frequency=True):
        super().__init__()
        self.head = conv3x3(3, base_channels)
        self.blocks = nn.ModuleList(FARB(base_channels, frequency) for _ in range(n_blocks))
        self.proj = conv1x1(base_channels, 3)

    def forward(self, r_dem):
        if r_dem.ndim != 4 or r_dem.shape[1] != 3:
            raise DimensionError(f"demosaiced RAW must be (N, 3, H, W), got {tuple(r_dem.shape)}")
        x = self.head(r_dem)
        for block in self.blocks:
            x = block(x, x)
        return x, self.proj(x)


class HINBlock(nn.Module):
    """Two 3x3 convs; instance norm on the first half of the first conv's
    channels; residual connection."""

    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = conv3x3(cin, cout)
        self.conv2 = conv3x3(cout, cout)
        self.norm = nn.InstanceNorm2d(cout // 2, affine=True)
        self.identity = conv1x1(cin, cout) if cin != cout else nn.Identity()

    def forward(self, x):
        out = self.conv1(x)
        half = self.norm.num_features
        out = torch.cat([self.norm(out[:, :half]), out[:, half:]], dim=1)
        out = F.leaky_relu(out, NEG_SLOPE)
        out = F.leaky_relu(self.conv2(out), NEG_SLOPE)
        return out + self.identity(x)


class CAB(nn.Module):
    """Color adaptation block.

    Frequency branch: the log-compressed amplitude of ``f_a`` predicts an
    SFT scale (softplus, so positive) and shift for the amplitude of ``s_f``; the two
    phases are fused by a pointwise conv over their concatenation. The
    spatial branch is a :class:`HINBlock`; the block returns their sum.
    """

    def __init__(self, channels, frequency=True):
        super().__init__()
        self.frequency = frequency
        if frequency:
            self.sft_scale = SpectralConv(channels)
            self.sft_shift = SpectralConv(channels)
            self.phase_fuse = conv1x1(2 * channels, channels)
        self.spatial = HINBlock(channels, channels)

    def frequency_branch(self, s_f, f_a):
        amp_s, pha_s = fourier.decompose(s_f)[:2]
        amp_a, pha_a = fourier.decompose(f_a)[:2]
        # amplitudes grow with sqrt(HW) at DC; condition on a compressed range
        cond = torch.log1p(amp_a)
        amplitude = F.softplus(self.sft_scale(cond)) * amp_s + self.sft_shift(cond)
        phase = self.phase_fuse(torch.cat([pha_s, pha_a], dim=1))
        return fourier.recompose(fourier.SpectralPair(amplitude, phase))

    def forward(self, s_f, f_a=None):
        out = self.spatial(s_f)
        if self.frequency:
            _check_same(s_f, f_a)
            out = out + self.frequency_branch(s_f, f_a)
        return out


def _down(cin, cout):
    return nn.Conv2d(cin, cout, 4, stride=2, padding=1)


class CAS(nn.Module):
    """Color adaptation subnet: a U-Net whose encoder levels inject the
    amplitude feature through CABs.

    At level ``k`` the stream and amplitude feature have ``C * 2**k``
    channels. The adapted map, downsampled, becomes both the next stream
    and the next level's amplitude feature. Without the amplitude branch
    ``f_a`` is concatenated with ``f_p`` at the input instead.
    """

    def __init__(self, base_channels, scales, blocks_per_level=1, amplitude=True):
        super().__init__()
        self.scales = scales
        self.amplitude = amplitude
        widths = [base_channels * 2**k for k in range(scales)]
        self.fuse_in = None if amplitude else conv1x1(2 * base_channels, base_channels)
        self.encoder = nn.ModuleList(
            nn.ModuleList(CAB(w, amplitude) for _ in range(blocks_per_level)) for w in widths
        )
        self.down_stream = nn.ModuleList(_down(widths[k], widths[k + 1]) for k in range(scales - 1))
        self.down_amp = nn.ModuleList(
            _down(widths[k], widths[k + 1]) for k in range(scales - 1)
        ) if amplitude else None
        self.up = nn.ModuleList(nn.ConvTranspose2d(widths[k + 1], widths[k], 2, stride=2) for k in range(scales - 1))
        self.merge = nn.ModuleList(conv1x1(2 * widths[k], widths[k]) for k in range(scales - 1))
        self.decoder = nn.ModuleList(HINBlock(widths[k], widths[k]) for k in range(scales - 1))
        self.out = conv1x1(base_channels, 3)

    def forward(self, f_p, f_a):
        _check_same(f_p, f_a)
        divisor = 2 ** (self.scales - 1)
        h, w = f_p.shape[-2:]
        if h % divisor or w % divisor:
            raise DimensionError(f"input {h}x{w} not divisible by {divisor} (cas_scales={self.scales})")

        s = f_p if self.amplitude else self.fuse_in(torch.cat([f_p, f_a], dim=1))
        skips = []
        for k, cabs in enumerate(self.encoder):
            for cab in cabs:
                s = cab(s, f_a)
            if k < self.scales - 1:
                skips.append(s)
                if self.amplitude:
                    f_a = self.down_amp[k](s)
                s = self.down_stream[k](s)
        for k in reversed(range(self.scales - 1)):
            s = self.merge[k](torch.cat([self.up[k](s), skips[k]], dim=1))
            s = self.decoder[k](s)
        return self.out(s)


class FourierISPNet(nn.Module):
    def __init__(self, config=ModelConfig()):
        super().__init__()
        self.config = config
        c = config.base_channels
        self.pes = PES(c, config.n_blocks_pes, frequency=config.enable_phase_branch)
        self.ars = ARS(c, config.n_blocks_ars, frequency=config.enable_amplitude_branch)
        self.cas = CAS(c, config.cas_scales, config.cas_blocks, amplitude=config.enable_amplitude_branch)

    def forward(self, r_pack, r_dem):
        n, _, h, w = r_dem.shape
        if r_pack.shape[-2:] != (h // 2, w // 2) or h % 2 or w % 2:
            raise DimensionError(
                f"packed {tuple(r_pack.shape)} is not half of demosaiced {tuple(r_dem.shape)}"
            )
        divisor = self.config.divisor
        if h % divisor or w % divisor:
            raise DimensionError(
                f"image {h}x{w} must be divisible by {divisor} for cas_scales={self.config.cas_scales}"
            )
        f_p, y_p = self.pes(r_pack)
        f_a, y_a = self.ars(r_dem)
        return ModelOutputs(self.cas(f_p, f_a), y_p, y_a)

    def features(self, r_pack, r_dem):
        """Return ``(F_P, F_A)`` for visualization."""
        return self.pes(r_pack)[0], self.ars(r_dem)[0]

    def num_parameters(self):
        return sum(p.numel() for p in self.parameters())


def project_rgb(f, weight, bias=None):
    """Pointwise linear map of a ``(N, C, H, W)`` feature to RGB.

    ``weight`` is ``(3, C)``; no activation is applied.
    """
    if f.shape[1] < 3:
        raise DimensionError(f"need at least 3 channels, got {f.shape[1]}")
    return F.conv2d(f, weight.reshape(3, -1, 1, 1), bias)


def init_parameters(model, seed):
    """Fan-in scaled uniform initialization from a private generator."""
    gen = torch.Generator().manual_seed(int(seed))
    for name, module in model.named_modules():
        if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
            fan_in = module.weight[0].numel() if isinstance(module, nn.Conv2d) else (
                module.weight.shape[0] * module.weight[0, 0].numel()
            )
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                module.weight.uniform_(-bound, bound, generator=gen)
                if module.bias is not None:
                    module.bias.uniform_(-bound, bound, generator=gen)
        elif isinstance(module, nn.InstanceNorm2d) and module.affine:
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)
    return model


class ParameterReport(NamedTuple):
    total: int
    pes: int
    ars: int
    cas: int
    published_millions: float

    def __str__(self):
        return (
            f"{self.total / 1e6:.2f}M parameters (PES {self.pes:,}, ARS {self.ars:,}, CAS {self.cas:,}); "
            f"published model at this width: {self.published_millions}M"
        )


def build_model(config=ModelConfig(), dtype=torch.float32):
    """Build and deterministically initialize a model.

    Returns ``(model, ParameterReport)``.
    """
    if not isinstance(config, ModelConfig):
        config = ModelConfig(**config)
    model = init_parameters(FourierISPNet(config), config.seed).to(dtype)
    count = lambda m: sum(p.numel() for p in m.parameters())  # noqa: E731
    report = ParameterReport(
        count(model), count(model.pes), count(model.ars), count(model.cas),
        PUBLISHED_PARAMS_M[config.base_channels],
    )
    return model, report


def raw_to_inputs(raws, dtype=torch.float32):
    """Pack and demosaic RAW images into ``(r_pack, r_dem)`` batches."""
    if isinstance(raws, RawImage):
        raws = [raws]
    packed = np.stack([pack_bayer(r) for r in raws]).transpose(0, 3, 1, 2)
    dem = np.stack([demosaic(r) for r in raws]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(packed)).to(dtype), torch.from_numpy(np.ascontiguousarray(dem)).to(dtype)


def fourierisp_forward(raw, model):
    """Run ``model`` on a single :class:`RawImage`; returns HxWx3 numpy arrays."""
    dtype = next(model.parameters()).dtype
    r_pack, r_dem = raw_to_inputs([raw], dtype)
    with torch.no_grad():
        out = model(r_pack, r_dem)
    return ModelOutputs(*(t[0].permute(1, 2, 0).double().numpy() for t in out))
