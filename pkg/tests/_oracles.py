"""Independent reference computations shared by the tests."""

import math

import numpy as np
import torch


def central_difference(fn, x, eps=1e-6):
    """Gradient of scalar ``fn`` at tensor ``x`` by central differences."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(fn(x))
            flat[i] = orig - eps
            down = float(fn(x))
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
    return grad


def autograd_gradient(fn, x):
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    return x.grad.detach()


def relative_error(a, b):
    return float((a - b).norm() / max(b.norm(), 1e-12))


def naive_dft2(x):
    """Unitary DFT over the last two axes by explicit summation (numpy)."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    rows = np.exp(-2j * math.pi * np.outer(np.arange(h), np.arange(h)) / h)
    cols = np.exp(-2j * math.pi * np.outer(np.arange(w), np.arange(w)) / w)
    out = np.zeros(x.shape, dtype=complex)
    for u in range(h):
        for v in range(w):
            acc = 0
            for yy in range(h):
                for xx in range(w):
                    acc = acc + x[..., yy, xx] * rows[u, yy] * cols[v, xx]
            out[..., u, v] = acc / math.sqrt(h * w)
    return out


def gaussian_weights(size=11, sigma=1.5):
    w = np.array([[math.exp(-((i - size // 2) ** 2 + (j - size // 2) ** 2) / (2 * sigma**2))
                   for j in range(size)] for i in range(size)])
    return w / w.sum()


def ssim_windows(x, y, data_range=1.0):
    """SSIM and contrast-structure maps of 2-D arrays by explicit windows."""
    w = gaussian_weights()
    n = w.shape[0]
    wx = np.lib.stride_tricks.sliding_window_view(x, (n, n))
    wy = np.lib.stride_tricks.sliding_window_view(y, (n, n))
    mx = (wx * w).sum(axis=(-1, -2))
    my = (wy * w).sum(axis=(-1, -2))
    dx = wx - mx[..., None, None]
    dy = wy - my[..., None, None]
    vx = (w * dx * dx).sum(axis=(-1, -2))
    vy = (w * dy * dy).sum(axis=(-1, -2))
    cxy = (w * dx * dy).sum(axis=(-1, -2))
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    cs = (2 * cxy + c2) / (vx + vy + c2)
    lum = (2 * mx * my + c1) / (mx**2 + my**2 + c1)
    return lum * cs, cs


def ssim_oracle(a, b):
    return float(np.mean([ssim_windows(a[..., c], b[..., c])[0].mean() for c in range(a.shape[-1])]))


def ms_ssim_oracle(a, b, weights=(0.0448, 0.2856, 0.3001, 0.2363, 0.1333)):
    values = []
    for c in range(a.shape[-1]):
        x, y = a[..., c], b[..., c]
        terms = []
        for level in range(len(weights)):
            s, cs = ssim_windows(x, y)
            terms.append(max(s.mean() if level == len(weights) - 1 else cs.mean(), 0.0))
            h, w = x.shape[0] // 2, x.shape[1] // 2
            x = x[: 2 * h, : 2 * w].reshape(h, 2, w, 2).mean(axis=(1, 3))
            y = y[: 2 * h, : 2 * w].reshape(h, 2, w, 2).mean(axis=(1, 3))
        values.append(math.prod(t**wt for t, wt in zip(terms, weights)))
    return float(np.mean(values))
