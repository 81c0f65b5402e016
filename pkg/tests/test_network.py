import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from _oracles import autograd_gradient, central_difference, relative_error
from fourierisp import fourier
from fourierisp.exceptions import ConfigError, DimensionError
from fourierisp.imaging import RawImage, random_scene, synthesize_raw
from fourierisp.network import (
    ARS,
    CAB,
    CAS,
    FARB,
    FPRB,
    PES,
    ModelConfig,
    build_model,
    fourierisp_forward,
    init_parameters,
    project_rgb,
    raw_to_inputs,
)

TOY = ModelConfig(base_channels=16, n_blocks_pes=1, n_blocks_ars=1, cas_scales=2, cas_blocks=1, seed=3)


def seeded(module, seed=0):
    return init_parameters(module, seed).double()


def set_identity(seq):
    """Make a two-layer pointwise SpectralConv compute the identity on
    nonnegative input."""
    with torch.no_grad():
        for conv in (seq[0], seq[2]):
            conv.weight.copy_(torch.eye(conv.weight.shape[0]).reshape(conv.weight.shape))
            conv.bias.zero_()


def phase_distance(a, b):
    return torch.angle(torch.exp(1j * (a - b))).abs()


class TestRefineBlocks:
    @pytest.mark.parametrize("cls", [FARB, FPRB])
    def test_shape(self, cls):
        block = seeded(cls(8))
        x = torch.randn(2, 8, 16, 16, dtype=torch.float64)
        assert block(x, x).shape == x.shape

    def test_farb_identity_amplitude_conv(self):
        block = seeded(FARB(4))
        set_identity(block.freq_conv)
        f1 = torch.randn(1, 4, 8, 8, dtype=torch.float64)
        torch.testing.assert_close(block.frequency_path(f1), f1, atol=1e-5, rtol=0)

    def test_fprb_identity_phase_conv(self):
        block = seeded(FPRB(4))
        block.freq_conv = nn.Identity()
        f1 = torch.randn(1, 4, 8, 8, dtype=torch.float64)
        torch.testing.assert_close(block.frequency_path(f1), f1, atol=1e-5, rtol=0)

    def test_disabled_frequency_path_is_identity(self):
        block = seeded(FARB(4, frequency=False))
        f1 = torch.randn(1, 4, 8, 8, dtype=torch.float64)
        assert block.frequency_path(f1) is f1

    def test_farb_preserves_phase(self):
        torch.manual_seed(0)
        for seed in range(20):
            block = seeded(FARB(4), seed)
            f1 = block.pre(torch.randn(1, 4, 8, 8, dtype=torch.float64))
            z = block.frequency_path(f1, keep_complex=True)
            phase = fourier.polar(fourier.spectrum(z))[1]
            # the amplitude conv output is signed; where it is negative the phase flips by pi
            mask = block.freq_conv(fourier.decompose(f1).amplitude) > 1e-6
            assert phase_distance(phase, fourier.decompose(f1).phase)[mask].max() < 1e-4

    def test_fprb_preserves_amplitude(self):
        torch.manual_seed(0)
        for seed in range(20):
            block = seeded(FPRB(4), seed)
            f1 = block.pre(torch.randn(1, 4, 8, 8, dtype=torch.float64))
            z = block.frequency_path(f1, keep_complex=True)
            amp = fourier.polar(fourier.spectrum(z))[0]
            torch.testing.assert_close(amp, fourier.decompose(f1).amplitude, atol=1e-4, rtol=0)

    @pytest.mark.parametrize("cls", [FARB, FPRB])
    def test_gradient_matches_central_differences(self, cls):
        block = seeded(cls(2), 1)
        f_s = torch.randn(1, 2, 6, 6, dtype=torch.float64)
        fn = lambda f_f: block(f_f, f_s).mean()  # noqa: E731
        x = torch.randn(1, 2, 6, 6, dtype=torch.float64)
        assert relative_error(autograd_gradient(fn, x), central_difference(fn, x)) < 1e-3

    def test_shape_mismatch(self):
        block = seeded(FARB(2))
        with pytest.raises(DimensionError):
            block(torch.zeros(1, 2, 6, 6, dtype=torch.float64), torch.zeros(1, 2, 4, 6, dtype=torch.float64))


class TestSubnets:
    def test_pes_shapes(self):
        pes = seeded(PES(16, 2))
        f_p, y_p = pes(torch.rand(1, 4, 8, 12, dtype=torch.float64))
        assert f_p.shape == (1, 16, 16, 24)
        assert y_p.shape == (1, 3, 16, 24)

    def test_pixel_shuffle_layout(self):
        x = torch.tensor([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1)
        np.testing.assert_array_equal(nn.PixelShuffle(2)(x)[0, 0].numpy(), [[1, 2], [3, 4]])

    def test_pes_deterministic(self):
        pes = seeded(PES(16, 2))
        x = torch.rand(1, 4, 8, 8, dtype=torch.float64)
        a, b = pes(x)[0], pes(x)[0]
        assert torch.equal(a, b)

    @pytest.mark.parametrize("frequency", [True, False])
    def test_ars_shapes(self, frequency):
        ars = seeded(ARS(16, 2, frequency))
        f_a, y_a = ars(torch.rand(2, 3, 12, 8, dtype=torch.float64))
        assert f_a.shape == (2, 16, 12, 8) and y_a.shape == (2, 3, 12, 8)

    def test_ars_gradient(self):
        ars = seeded(ARS(16, 1), 2)
        fn = lambda x: ars(x)[1].mean()  # noqa: E731
        x = torch.rand(1, 3, 6, 6, dtype=torch.float64)
        assert relative_error(autograd_gradient(fn, x), central_difference(fn, x)) < 1e-3

    def test_pes_gradient(self):
        pes = seeded(PES(16, 1), 2)
        fn = lambda x: pes(x)[1].mean()  # noqa: E731
        x = torch.rand(1, 4, 3, 3, dtype=torch.float64)
        assert relative_error(autograd_gradient(fn, x), central_difference(fn, x)) < 1e-3


class TestProjection:
    def test_identity_embedding(self):
        f = torch.randn(1, 5, 4, 4)
        weight = torch.zeros(3, 5)
        weight[:, :3] = torch.eye(3)
        torch.testing.assert_close(project_rgb(f, weight), f[:, :3])

    def test_zero(self):
        out = project_rgb(torch.randn(1, 4, 3, 3), torch.zeros(3, 4), torch.zeros(3))
        assert torch.count_nonzero(out) == 0

    def test_linear(self):
        f, w = torch.randn(1, 4, 3, 3, dtype=torch.float64), torch.randn(3, 4, dtype=torch.float64)
        torch.testing.assert_close(project_rgb(2.5 * f, w), 2.5 * project_rgb(f, w))

    def test_too_few_channels(self):
        with pytest.raises(DimensionError):
            project_rgb(torch.randn(1, 2, 3, 3), torch.zeros(3, 2))


class TestCAB:
    def passthrough(self, channels=4):
        cab = seeded(CAB(channels))
        with torch.no_grad():
            cab.sft_scale[2].weight.zero_()
            cab.sft_scale[2].bias.fill_(math.log(math.e - 1))  # softplus -> 1
            cab.sft_shift[2].weight.zero_()
            cab.sft_shift[2].bias.zero_()
            fuse = torch.zeros(channels, 2 * channels, 1, 1, dtype=torch.float64)
            fuse[:, :channels, 0, 0] = torch.eye(channels)
            cab.phase_fuse.weight.copy_(fuse)
            cab.phase_fuse.bias.zero_()
        return cab

    def test_passthrough_frequency_branch(self):
        cab = self.passthrough()
        s_f, f_a = torch.randn(2, 1, 4, 8, 8, dtype=torch.float64)
        torch.testing.assert_close(cab.frequency_branch(s_f, f_a), s_f, atol=1e-5, rtol=0)

    def test_shape(self):
        cab = seeded(CAB(4))
        s_f, f_a = torch.randn(2, 1, 4, 8, 8, dtype=torch.float64)
        assert cab(s_f, f_a).shape == s_f.shape

    def test_gradient_both_inputs(self):
        cab = seeded(CAB(4), 5)
        s_f, f_a = torch.randn(2, 1, 4, 6, 6, dtype=torch.float64)
        fn_s = lambda x: cab(x, f_a).mean()  # noqa: E731
        fn_a = lambda x: cab(s_f, x).mean()  # noqa: E731
        assert relative_error(autograd_gradient(fn_s, s_f), central_difference(fn_s, s_f)) < 1e-3
        assert relative_error(autograd_gradient(fn_a, f_a), central_difference(fn_a, f_a)) < 1e-3

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            seeded(CAB(4))(torch.zeros(1, 4, 8, 8, dtype=torch.float64), torch.zeros(1, 4, 4, 8, dtype=torch.float64))


class TestCAS:
    def test_output_shape(self):
        cas = seeded(CAS(16, 3))
        f = torch.randn(1, 16, 64, 64, dtype=torch.float64)
        assert cas(f, f).shape == (1, 3, 64, 64)

    def test_indivisible(self):
        cas = seeded(CAS(16, 3))
        f = torch.randn(1, 16, 50, 50, dtype=torch.float64)
        with pytest.raises(DimensionError, match="divisible by 4"):
            cas(f, f)

    def test_gradient_reaches_both_inputs_and_all_parameters(self):
        cas = seeded(CAS(16, 2), 4)
        f_p, f_a = (t.requires_grad_(True) for t in torch.randn(2, 1, 16, 8, 8, dtype=torch.float64))
        cas(f_p, f_a).square().mean().backward()
        assert f_p.grad.abs().sum() > 0 and f_a.grad.abs().sum() > 0
        for name, p in cas.named_parameters():
            assert p.grad is not None and p.grad.abs().sum() > 0, name

        # spot-check one coordinate of each input by central differences
        for which in (0, 1):
            inputs = [f_p.detach().clone(), f_a.detach().clone()]
            idx = (0, 3, 2, 5)
            eps = 1e-6
            vals = []
            for sign in (1, -1):
                x = [t.clone() for t in inputs]
                x[which][idx] += sign * eps
                with torch.no_grad():
                    vals.append(cas(*x).square().mean().item())
            fd = (vals[0] - vals[1]) / (2 * eps)
            grad = (f_p if which == 0 else f_a).grad[idx].item()
            assert fd == pytest.approx(grad, rel=1e-3, abs=1e-9)


class TestModel:
    def test_forward_shapes(self):
        model, _ = build_model(ModelConfig(base_channels=16, n_blocks_pes=1, n_blocks_ars=1))
        raw = synthesize_raw(random_scene(64, 0))
        out = fourierisp_forward(raw, model)
        assert all(o.shape == (64, 64, 3) for o in out)

    @pytest.mark.parametrize("flags", [(False, True), (True, False), (False, False)])
    def test_ablation_shapes(self, flags):
        config = ModelConfig(base_channels=16, n_blocks_pes=1, n_blocks_ars=1,
                             enable_phase_branch=flags[0], enable_amplitude_branch=flags[1])
        model, _ = build_model(config)
        out = fourierisp_forward(synthesize_raw(random_scene(32, 1)), model)
        assert all(o.shape == (32, 32, 3) for o in out)

    def test_same_seed_same_parameters(self):
        a, _ = build_model(TOY)
        b, _ = build_model(TOY)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and torch.equal(pa, pb)
        c, _ = build_model(ModelConfig(**{**TOY.to_dict(), "seed": 4}))
        assert not torch.equal(next(a.parameters()), next(c.parameters()))

    def test_forward_deterministic(self):
        model, _ = build_model(TOY)
        raw = synthesize_raw(random_scene(16, 2))
        a, b = fourierisp_forward(raw, model), fourierisp_forward(raw, model)
        for x, y in zip(a, b):
            assert x.tobytes() == y.tobytes()

    def test_parameter_counts_monotone(self):
        totals = [build_model(ModelConfig(base_channels=c))[1].total for c in (16, 24, 48)]
        assert totals[0] < totals[1] < totals[2]

    def test_default_report_mentions_published_count(self):
        _, report = build_model(ModelConfig())
        assert report.published_millions == 6.17
        assert 4.5e6 < report.total < 7.5e6
        assert "6.17M" in str(report)

    def test_invalid_channels(self):
        with pytest.raises(ConfigError):
            ModelConfig(base_channels=32)
        with pytest.raises(ConfigError):
            ModelConfig(cas_scales=1)

    def test_indivisible_input(self):
        model, _ = build_model(ModelConfig(base_channels=16, n_blocks_pes=1, n_blocks_ars=1, cas_scales=3))
        r_pack, r_dem = raw_to_inputs([RawImage(np.zeros((6, 6)))])
        with pytest.raises(DimensionError, match="divisible by 4"):
            model(r_pack, r_dem)

    def test_full_model_jvp_matches_central_differences(self):
        model, _ = build_model(TOY, dtype=torch.float64)
        gen = torch.Generator().manual_seed(0)
        r_pack = torch.rand(1, 4, 3, 3, dtype=torch.float64, generator=gen)
        r_dem = torch.rand(1, 3, 6, 6, dtype=torch.float64, generator=gen)
        d_pack = torch.randn(r_pack.shape, dtype=torch.float64, generator=gen)
        d_dem = torch.randn(r_dem.shape, dtype=torch.float64, generator=gen)

        def flat(p, d):
            return torch.cat([o.reshape(-1) for o in model(p, d)])

        _, jvp = torch.autograd.functional.jvp(flat, (r_pack, r_dem), (d_pack, d_dem))
        eps = 1e-6
        with torch.no_grad():
            fd = (flat(r_pack + eps * d_pack, r_dem + eps * d_dem)
                  - flat(r_pack - eps * d_pack, r_dem - eps * d_dem)) / (2 * eps)
        assert relative_error(jvp, fd) < 1e-3
