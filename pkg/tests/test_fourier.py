import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fourierisp.exceptions import DimensionError, NumericError
from fourierisp.fourier import SpectralPair, decompose, recompose, swap_amplitude


def naive_dft(x):
    """Unitary DFT of an (H, W, C) array by explicit double sums."""
    h, w, c = x.shape
    out = np.zeros((h, w, c), dtype=complex)
    for u in range(h):
        for v in range(w):
            acc = np.zeros(c, dtype=complex)
            for yy in range(h):
                for xx in range(w):
                    acc += x[yy, xx] * np.exp(-2j * math.pi * (yy * u / h + xx * v / w))
            out[u, v] = acc / math.sqrt(h * w)
    return out


def test_constant_image():
    sp = decompose(np.full((4, 4, 1), 0.7))
    expected = np.zeros((4, 4))
    expected[0, 0] = 4 * 0.7
    np.testing.assert_allclose(sp.amplitude[..., 0], expected, atol=1e-12)
    assert sp.phase[0, 0, 0] == 0


def test_impulse():
    x = np.zeros((4, 4, 1))
    x[0, 0] = 1
    sp = decompose(x)
    np.testing.assert_allclose(sp.amplitude, 0.25, atol=1e-12)
    np.testing.assert_allclose(sp.phase, 0, atol=1e-12)


def test_matches_naive_dft():
    x = np.random.default_rng(0).random((8, 8, 3))
    ref = naive_dft(x)
    sp = decompose(x)
    np.testing.assert_allclose(sp.amplitude, np.abs(ref), atol=1e-6)
    # compare phases on the unit circle to avoid the +-pi seam
    np.testing.assert_allclose(np.exp(1j * sp.phase), np.exp(1j * np.angle(ref)), atol=1e-6)


def test_round_trip():
    x = np.random.default_rng(1).uniform(-10, 10, (64, 64, 3))
    np.testing.assert_allclose(recompose(decompose(x), check_real=True), x, atol=1e-5)


def test_dc_only_recompose():
    amp = np.zeros((6, 4, 1))
    amp[0, 0] = math.sqrt(24) * 0.3
    np.testing.assert_allclose(recompose(SpectralPair(amp, np.zeros_like(amp))), 0.3, atol=1e-12)


def test_amplitude_scaling_is_linear():
    x = np.random.default_rng(2).normal(size=(8, 6, 2))
    sp = decompose(x)
    np.testing.assert_allclose(recompose(SpectralPair(2 * sp.amplitude, sp.phase)), 2 * x, atol=1e-10)


def test_torch_batched_layout():
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    sp = decompose(x)
    ref = decompose(x[1].permute(1, 2, 0).numpy())
    np.testing.assert_allclose(sp.amplitude[1].permute(1, 2, 0).numpy(), ref.amplitude, atol=1e-12)


def test_hermitian_amplitude():
    x = np.random.default_rng(3).random((6, 10, 2))
    a = decompose(x).amplitude
    flipped = np.roll(a[::-1, ::-1], (1, 1), axis=(0, 1))
    np.testing.assert_allclose(a, flipped, atol=1e-12)


def test_parseval():
    x = np.random.default_rng(4).normal(size=(16, 12, 3))
    assert (decompose(x).amplitude ** 2).sum() == pytest.approx((x**2).sum(), rel=1e-4)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9), st.integers(1, 3)),
              elements=st.floats(-10, 10)))
def test_properties(x):
    sp = decompose(x)
    assert (sp.amplitude >= 0).all()
    assert (sp.phase > -math.pi).all() and (sp.phase <= math.pi).all()
    np.testing.assert_allclose(recompose(sp), x, atol=1e-5)


def test_non_finite():
    x = np.zeros((4, 4, 1))
    x[1, 1] = np.nan
    with pytest.raises(NumericError):
        decompose(x)


def test_imaginary_residue_check():
    amp = np.ones((4, 4, 1))
    phase = np.random.default_rng(0).uniform(-3, 3, (4, 4, 1))
    with pytest.raises(NumericError):
        recompose(SpectralPair(amp, phase), check_real=True)


def test_gradient_of_round_trip_is_one():
    x = torch.rand(1, 2, 6, 6, dtype=torch.float64, requires_grad=True)
    recompose(decompose(x)).sum().backward()
    np.testing.assert_allclose(x.grad.numpy(), 1.0, atol=1e-4)

    # and by central differences
    x0 = x.detach().numpy()[0].transpose(1, 2, 0)
    eps = 1e-6
    for idx in [(0, 0, 0), (2, 3, 1), (5, 1, 0)]:
        xp, xm = x0.copy(), x0.copy()
        xp[idx] += eps
        xm[idx] -= eps
        fd = (recompose(decompose(xp)).sum() - recompose(decompose(xm)).sum()) / (2 * eps)
        assert fd == pytest.approx(1.0, abs=1e-4)


class TestSwap:
    def test_self_swap(self):
        x = np.random.default_rng(0).random((8, 8, 3))
        a, b = swap_amplitude(x, x)
        np.testing.assert_allclose(a, x, atol=1e-5)
        np.testing.assert_allclose(b, x, atol=1e-5)

    def test_involution(self):
        rng = np.random.default_rng(1)
        x, y = rng.random((8, 8, 3)), rng.random((8, 8, 3))
        a, b = swap_amplitude(*swap_amplitude(x, y))
        np.testing.assert_allclose(a, x, atol=1e-5)
        np.testing.assert_allclose(b, y, atol=1e-5)

    def test_constants(self):
        a, b = swap_amplitude(np.full((4, 4, 3), 0.2), np.full((4, 4, 3), 0.9))
        np.testing.assert_allclose(a, 0.9, atol=1e-12)
        np.testing.assert_allclose(b, 0.2, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            swap_amplitude(np.zeros((4, 4, 3)), np.zeros((4, 6, 3)))
