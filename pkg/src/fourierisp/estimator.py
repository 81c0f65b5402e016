"""scikit-learn style wrappers.

``X`` is a batch of Bayer mosaics ``(N, H, W)`` with values in [0, 1] (a
single ``(H, W)`` mosaic is accepted), ``y`` a batch of RGB targets
``(N, H, W, 3)``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import imaging, metrics
from .exceptions import DimensionError
from .losses import LossWeights
from .network import ModelConfig
from .training import Checkpoint, TrainConfig, Trainer, predict


def check_raw_batch(X, bit_depth=10, cfa="RGGB"):
    """Validate a mosaic batch and wrap each item as a RawImage."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise DimensionError(f"expected (N, H, W) mosaics, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("mosaics contain non-finite values")
    return [imaging.RawImage(np.clip(x, 0.0, 1.0), bit_depth, cfa) for x in X]


def check_rgb_batch(y, n, shape):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 3:
        y = y[None]
    if y.shape != (n, *shape, 3):
        raise DimensionError(f"expected targets of shape {(n, *shape, 3)}, got {y.shape}")
    return y


class BayerPacker(TransformerMixin, BaseEstimator):
    """Stateless ``(N, H, W) -> (N, H/2, W/2, 4)`` packing."""

    def __init__(self, cfa="RGGB"):
        self.cfa = cfa

    def fit(self, X, y=None):
        check_raw_batch(X, cfa=self.cfa)
        return self

    def transform(self, X):
        return np.stack([imaging.pack_bayer(r) for r in check_raw_batch(X, cfa=self.cfa)])


class BilinearDemosaicer(TransformerMixin, BaseEstimator):
    """Stateless ``(N, H, W) -> (N, H, W, 3)`` bilinear demosaicing."""

    def __init__(self, cfa="RGGB"):
        self.cfa = cfa

    def fit(self, X, y=None):
        check_raw_batch(X, cfa=self.cfa)
        return self

    def transform(self, X):
        return np.stack([imaging.demosaic(r) for r in check_raw_batch(X, cfa=self.cfa)])


class FourierISPRegressor(RegressorMixin, BaseEstimator):
    """Trains the RAW-to-RGB network on in-memory arrays.

    ``score`` is the mean PSNR in dB (higher is better), not R^2.
    """

    def __init__(self, base_channels=16, n_blocks_pes=4, n_blocks_ars=4, cas_scales=3, cas_blocks=2,
                 enable_phase_branch=True, enable_amplitude_branch=True, n_iter=1000, lr=2e-4,
                 lr_halve_every=10000, batch_size=4, patch_size=None, loss_weights=None, seed=0,
                 bit_depth=10, cfa="RGGB"):
        self.base_channels = base_channels
        self.n_blocks_pes = n_blocks_pes
        self.n_blocks_ars = n_blocks_ars
        self.cas_scales = cas_scales
        self.cas_blocks = cas_blocks
        self.enable_phase_branch = enable_phase_branch
        self.enable_amplitude_branch = enable_amplitude_branch
        self.n_iter = n_iter
        self.lr = lr
        self.lr_halve_every = lr_halve_every
        self.batch_size = batch_size
        self.patch_size = patch_size
        self.loss_weights = loss_weights
        self.seed = seed
        self.bit_depth = bit_depth
        self.cfa = cfa

    def _train_config(self):
        model = ModelConfig(self.base_channels, self.n_blocks_pes, self.n_blocks_ars, self.cas_scales,
                            self.cas_blocks, self.enable_phase_branch, self.enable_amplitude_branch, self.seed)
        return TrainConfig(total_iters=self.n_iter, lr_init=self.lr, lr_halve_every=self.lr_halve_every,
                           batch_size=self.batch_size, patch_size=self.patch_size, seed=self.seed,
                           loss_weights=self.loss_weights or LossWeights(), model=model, log_every=0)

    def fit(self, X, y):
        raws = check_raw_batch(X, self.bit_depth, self.cfa)
        y = check_rgb_batch(y, len(raws), raws[0].shape)
        trainer = Trainer(self._train_config(), list(zip(raws, y)))
        self.history_ = trainer.run()
        self.checkpoint_ = trainer.checkpoint()
        self.model_ = trainer.model.eval()
        self.n_parameters_ = trainer.param_report.total
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return np.stack([predict(self.model_, r)[0] for r in check_raw_batch(X, self.bit_depth, self.cfa)])

    def score(self, X, y, sample_weight=None):
        pred = self.predict(X)
        y = check_rgb_batch(y, len(pred), pred.shape[1:3])
        values = [metrics.psnr(metrics.quantize8(p), metrics.quantize8(t)) for p, t in zip(pred, y)]
        return float(np.average(values, weights=sample_weight))

    def save(self, path):
        check_is_fitted(self, "checkpoint_")
        return self.checkpoint_.save(path)

    @classmethod
    def from_checkpoint(cls, path, **kwargs):
        ckpt = Checkpoint.load(path)
        m, t = ckpt.config.model, ckpt.config
        est = cls(m.base_channels, m.n_blocks_pes, m.n_blocks_ars, m.cas_scales, m.cas_blocks,
                  m.enable_phase_branch, m.enable_amplitude_branch, t.total_iters, t.lr_init, t.lr_halve_every,
                  t.batch_size, t.patch_size, t.loss_weights, m.seed, **kwargs)
        est.checkpoint_ = ckpt
        est.model_ = ckpt.build_model()
        est.history_ = []
        est.n_parameters_ = sum(p.numel() for p in est.model_.parameters())
        return est
