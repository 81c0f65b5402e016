"""Training loop, learning-rate schedule, checkpoints, evaluation and
inference drivers."""

from __future__ import annotations

import io
import json
import logging
import zipfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import fourier, imaging, metrics
from .exceptions import ConfigError, DatasetError, DimensionError, NonFiniteLossError, NumericError
from .imaging import extract_patch_pair
from .losses import SSIM_WINDOW, LossWeights, make_extractor, total_loss
from .network import ModelConfig, build_model, raw_to_inputs

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "fourierisp-checkpoint"
CHECKPOINT_VERSION = 1
DATASET_ROOT_ENV = "FOURIERISP_DATASET_ROOT"
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 30000
    lr_init: float = 2e-4
    lr_halve_every: int = 10000
    batch_size: int = 4
    patch_size: int | None = 448
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset_root: str | None = None
    checkpoint_every: int = 0
    grad_clip: float | None = None
    perceptual_weights: str | None = None
    perceptual_layers: tuple | None = None
    log_every: int = 100

    def __post_init__(self):
        if self.patch_size == 0:  # TOML has no null; 0 means whole images
            object.__setattr__(self, "patch_size", None)
        if self.total_iters < 0 or self.batch_size < 1 or self.lr_halve_every < 1:
            raise ConfigError("total_iters >= 0, batch_size >= 1 and lr_halve_every >= 1 are required")
        if self.patch_size is not None and self.patch_size % 2:
            raise ConfigError(f"patch_size must be even, got {self.patch_size}")
        if isinstance(self.loss_weights, dict):
            object.__setattr__(self, "loss_weights", LossWeights(**self.loss_weights))
        if isinstance(self.model, dict):
            object.__setattr__(self, "model", ModelConfig(**self.model))
        if isinstance(self.perceptual_layers, list):
            object.__setattr__(self, "perceptual_layers", tuple(self.perceptual_layers))

    def to_dict(self):
        d = asdict(self)
        if d["perceptual_layers"] is not None:
            d["perceptual_layers"] = list(d["perceptual_layers"])
        return d

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path, overrides=None):
        """Load a TOML config; ``[model]`` and ``[loss_weights]`` are tables.

        ``overrides`` maps dotted keys (``model.base_channels``) to values.
        """
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(apply_overrides(data, overrides or {}))


def apply_overrides(data, overrides):
    data = json.loads(json.dumps(data))
    for key, value in overrides.items():
        target = data
        *parents, leaf = key.split(".")
        for p in parents:
            target = target.setdefault(p, {})
        target[leaf] = value
    return data


def lr_at(t, config=TrainConfig()):
    """``lr_init * 0.5 ** floor(t / lr_halve_every)``."""
    return config.lr_init * 0.5 ** (t // config.lr_halve_every)


def effective_weights(config):
    """Loss weights with the supervision of a removed branch switched off."""
    w = config.loss_weights
    if not config.model.enable_phase_branch:
        w = replace(w, beta=0.0)
    if not config.model.enable_amplitude_branch:
        w = replace(w, gamma=0.0)
    return w


# --------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    model_state: dict
    optimizer_state: dict | None
    iteration: int
    config: TrainConfig
    numpy_rng: dict | None = None
    torch_rng: torch.Tensor | None = None
    sampler_queue: list | None = None

    def build_model(self):
        model, _ = build_model(self.config.model)
        model.load_state_dict(self.model_state)
        return model.eval()

    def save(self, path):
        """Write a zip archive with fixed timestamps and sorted members.

        Members: ``manifest.json``, ``model/<param>.npy``,
        ``optim/<index>/<key>.npy`` and ``rng/torch.npy``.
        """
        tensors = {f"model/{k}.npy": v for k, v in self.model_state.items()}
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "iteration": int(self.iteration),
            "config": self.config.to_dict(),
            "numpy_rng": self.numpy_rng,
            "sampler_queue": self.sampler_queue,
            "optimizer": None,
        }
        if self.optimizer_state is not None:
            state = self.optimizer_state["state"]
            manifest["optimizer"] = {
                "param_groups": self.optimizer_state["param_groups"],
                "state": {str(i): sorted(state[i]) for i in sorted(state)},
            }
            for i in sorted(state):
                for key, value in state[i].items():
                    tensors[f"optim/{i}/{key}.npy"] = value
        if self.torch_rng is not None:
            tensors["rng/torch.npy"] = self.torch_rng

        members = {"manifest.json": json.dumps(manifest, sort_keys=True, indent=1).encode()}
        for name, tensor in tensors.items():
            buf = io.BytesIO()
            np.save(buf, tensor.detach().cpu().numpy(), allow_pickle=False)
            members[name] = buf.getvalue()
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
            for name in sorted(members):
                info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
                info.external_attr = 0o644 << 16
                zf.writestr(info, members[name])
        return Path(path)

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
                raise ConfigError(f"{path}: unsupported checkpoint format {manifest.get('format')!r} "
                                  f"v{manifest.get('version')}")

            def read(name):
                return torch.from_numpy(np.load(io.BytesIO(zf.read(name)), allow_pickle=False))

            model_state = {
                n[len("model/"):-len(".npy")]: read(n) for n in sorted(zf.namelist()) if n.startswith("model/")
            }
            optimizer_state = None
            if manifest["optimizer"] is not None:
                opt = manifest["optimizer"]
                optimizer_state = {
                    "param_groups": opt["param_groups"],
                    "state": {int(i): {k: read(f"optim/{i}/{k}.npy") for k in keys} for i, keys in opt["state"].items()},
                }
            torch_rng = read("rng/torch.npy") if "rng/torch.npy" in zf.namelist() else None
        return cls(model_state, optimizer_state, manifest["iteration"],
                   TrainConfig.from_dict(manifest["config"]), manifest["numpy_rng"], torch_rng,
                   manifest.get("sampler_queue"))


# --------------------------------------------------------------------------
# Training


def _to_tensor_batch(rgbs, dtype):
    return torch.from_numpy(np.ascontiguousarray(np.stack(rgbs).transpose(0, 3, 1, 2))).to(dtype)


def load_pairs(config, split="train"):
    """Load all pairs of ``split`` from ``config.dataset_root``."""
    if not config.dataset_root:
        raise ConfigError("dataset_root is not set (config key or $" + DATASET_ROOT_ENV + ")")
    index = imaging.load_dataset(config.dataset_root, split, config.patch_size or 448)
    return index.load_all()


class Trainer:
    """Single-writer Adam trainer over an in-memory list of (RawImage, RGB)
    pairs. Pairs are visited in seeded shuffled passes (each pair once per
    pass) and crops come from the same generator, so a run is reproducible
    and resumable from a :class:`Checkpoint`."""

    def __init__(self, config, pairs, dtype=torch.float32):
        if not pairs:
            raise DatasetError("training set is empty")
        self.config = config
        self.pairs = list(pairs)
        self.dtype = dtype
        self._check_dims()
        self.model, self.param_report = build_model(config.model, dtype)
        self.model.train()
        self.optimizer = torch.optim.Adam(
            self.model.parameters(), lr=config.lr_init, betas=(0.9, 0.999), eps=1e-8
        )
        self.rng = np.random.default_rng(config.seed)
        # private stream for any torch-side sampling; the global one is left alone
        self.generator = torch.Generator().manual_seed(config.seed)
        self.extractor, self.extractor_fallback = make_extractor(
            config.perceptual_weights, config.perceptual_layers, seed=config.seed
        )
        self.extractor = self.extractor.to(dtype)
        self.weights = effective_weights(config)
        self.iteration = 0
        self.queue = []

    def _check_dims(self):
        divisor = self.config.model.divisor
        for raw, rgb in self.pairs:
            size = self.config.patch_size
            h, w = raw.shape
            if rgb.shape[:2] != (h, w):
                raise DimensionError(f"RAW {raw.shape} and RGB {rgb.shape[:2]} differ")
            ph, pw = (size, size) if size else (h, w)
            if ph > h or pw > w:
                raise DimensionError(f"patch {size} larger than image {h}x{w}")
            if min(ph, pw) < SSIM_WINDOW:
                raise DimensionError(f"patch {ph}x{pw} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
            if ph % divisor or pw % divisor:
                raise DimensionError(f"patch {ph}x{pw} not divisible by {divisor}")
        if not self.config.patch_size and len({p[0].shape for p in self.pairs}) > 1:
            raise DimensionError("images differ in size; set patch_size")

    def sample_batch(self):
        raws, rgbs = [], []
        for _ in range(self.config.batch_size):
            if not self.queue:
                self.queue = [int(i) for i in self.rng.permutation(len(self.pairs))]
            pair = self.pairs[self.queue.pop(0)]
            size = self.config.patch_size or pair[0].shape[0]
            crop_seed = int(self.rng.integers(2**31))
            if size == pair[0].shape[0] == pair[0].shape[1]:
                raw, rgb = pair
            else:
                raw, rgb = extract_patch_pair(pair, size, seed=crop_seed)
            raws.append(raw)
            rgbs.append(rgb)
        r_pack, r_dem = raw_to_inputs(raws, self.dtype)
        return r_pack, r_dem, _to_tensor_batch(rgbs, self.dtype)

    def step(self):
        """One Adam update; returns the pre-update :class:`LossReport`."""
        lr = lr_at(self.iteration, self.config)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        r_pack, r_dem, gt = self.sample_batch()
        self.optimizer.zero_grad(set_to_none=True)
        try:
            outputs = self.model(r_pack, r_dem)
        except NumericError:
            raise NonFiniteLossError("model output", self.iteration) from None
        report = total_loss(outputs, gt, self.weights, self.extractor, self.extractor_fallback)
        bad = report.first_non_finite()
        if bad:
            raise NonFiniteLossError(bad, self.iteration)
        report.total.backward()
        if self.config.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.grad_clip)
        self.optimizer.step()
        self.iteration += 1
        return report

    def checkpoint(self):
        return Checkpoint(
            {k: v.detach().clone() for k, v in self.model.state_dict().items()},
            self._optimizer_state(),
            self.iteration,
            self.config,
            self.rng.bit_generator.state,
            self.generator.get_state(),
            list(self.queue),
        )

    def _optimizer_state(self):
        state = self.optimizer.state_dict()
        return {
            "param_groups": json.loads(json.dumps(state["param_groups"])),
            "state": {i: {k: v.detach().clone() for k, v in s.items()} for i, s in state["state"].items()},
        }

    @classmethod
    def from_checkpoint(cls, checkpoint, pairs, dtype=torch.float32):
        trainer = cls(checkpoint.config, pairs, dtype)
        trainer.model.load_state_dict(checkpoint.model_state)
        if checkpoint.optimizer_state is not None:
            trainer.optimizer.load_state_dict(checkpoint.optimizer_state)
        if checkpoint.numpy_rng is not None:
            trainer.rng.bit_generator.state = checkpoint.numpy_rng
        if checkpoint.torch_rng is not None:
            trainer.generator.set_state(checkpoint.torch_rng)
        trainer.iteration = checkpoint.iteration
        trainer.queue = list(checkpoint.sampler_queue or [])
        return trainer

    def run(self, until=None, checkpoint_dir=None, callback=None):
        """Train up to iteration ``until`` (default ``total_iters``).

        Returns the list of per-iteration loss dicts (with ``iteration`` and
        ``lr`` keys).
        """
        until = self.config.total_iters if until is None else until
        history = []
        every = self.config.checkpoint_every
        while self.iteration < until:
            lr = lr_at(self.iteration, self.config)
            report = self.step()
            row = {"iteration": self.iteration - 1, "lr": lr, **report.as_dict()}
            history.append(row)
            if callback is not None:
                callback(row)
            if self.config.log_every and row["iteration"] % self.config.log_every == 0:
                log.info("iter %d lr %.3g total %.5f", row["iteration"], lr, row["total"])
            if checkpoint_dir and every and self.iteration % every == 0:
                self.checkpoint().save(Path(checkpoint_dir) / f"iter_{self.iteration:07d}.ckpt")
        if checkpoint_dir:
            self.checkpoint().save(Path(checkpoint_dir) / "last.ckpt")
        return history


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list


def train(config, pairs=None, checkpoint_dir=None, resume=None, callback=None):
    """Train from scratch, or continue from ``resume`` (a checkpoint or path).

    A resumed run keeps the checkpoint's settings and trains until
    ``config.total_iters``; pass ``config=None`` to use the checkpoint's own.
    """
    if resume is not None and not isinstance(resume, Checkpoint):
        resume = Checkpoint.load(resume)
    if pairs is None:
        source = config if config is not None and config.dataset_root else (resume.config if resume else config)
        pairs = load_pairs(source)
    if resume is not None:
        trainer = Trainer.from_checkpoint(resume, pairs)
    else:
        trainer = Trainer(config, pairs)
    until = config.total_iters if config is not None else None
    history = trainer.run(until=until, checkpoint_dir=checkpoint_dir, callback=callback)
    return TrainResult(trainer.checkpoint(), history)


# --------------------------------------------------------------------------
# Evaluation and inference


@dataclass
class EvaluationResult:
    names: list
    rows: list
    mean: metrics.MetricReport
    skipped: list

    def write(self, out_dir):
        return metrics.write_report(out_dir, self.names, self.rows, self.mean,
                                    {"count": len(self.rows), "skipped": len(self.skipped)})


def predict(model, raw):
    """Model outputs ``(y, y_p, y_a)`` for one RawImage as HxWx3 arrays."""
    dtype = next(model.parameters()).dtype
    divisor = model.config.divisor
    h, w = raw.shape
    if h % divisor or w % divisor:
        raise DimensionError(f"RAW {h}x{w} must have height and width divisible by {divisor}")
    r_pack, r_dem = raw_to_inputs([raw], dtype)
    with torch.no_grad():
        out = model(r_pack, r_dem)
    return [t[0].permute(1, 2, 0).double().numpy() for t in out]


def evaluate(checkpoint, pairs, names=None, quantize=True, lpips_scorer=None):
    """Per-image and mean metrics of ``checkpoint`` on (RawImage, RGB) pairs.

    ``checkpoint`` may be a :class:`Checkpoint`, a path, or a callable
    mapping a RawImage to an RGB prediction. Pairs with inconsistent or
    incompatible dimensions are skipped and listed in ``skipped``.
    """
    if isinstance(checkpoint, (str, Path)):
        checkpoint = Checkpoint.load(checkpoint)
    if isinstance(checkpoint, Checkpoint):
        model = checkpoint.build_model()
        predictor = lambda raw: predict(model, raw)[0]  # noqa: E731
    else:
        predictor = checkpoint
    if not pairs:
        raise DatasetError("evaluation split is empty")
    names = list(names) if names else [f"{i:05d}" for i in range(len(pairs))]
    kept, rows, skipped = [], [], []
    for name, (raw, gt) in zip(names, pairs):
        try:
            if raw.shape != gt.shape[:2]:
                raise DimensionError(f"RAW {raw.shape} vs RGB {gt.shape[:2]}")
            pred = predictor(raw)
        except DimensionError as exc:
            log.warning("skipping %s: %s", name, exc)
            skipped.append(name)
            continue
        kept.append(name)
        rows.append(metrics.evaluate_pair(pred, gt, quantize, lpips_scorer))
    return EvaluationResult(kept, rows, metrics.aggregate(rows), skipped)


INFER_SUFFIXES = {
    "y": "_y.png",
    "y_p": "_yp.png",
    "y_a": "_ya.png",
    "log_amplitude": "_log_amplitude.png",
    "phase": "_phase.png",
}


def infer(checkpoint, raw_path, out_dir, emit_intermediates=False, bit_depth=None, cfa=None):
    """Run the model on a RAW PNG and write PNG outputs; returns their paths.

    Writes ``<stem>_y.png``; with ``emit_intermediates`` also the two branch
    projections and the log-amplitude and phase visualizations of the output.
    Bit depth and CFA come from the arguments, else from a ``meta.toml``
    found next to the file or in its parents, else 10-bit RGGB.
    """
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = Checkpoint.load(checkpoint)
    raw_path = Path(raw_path)
    meta = imaging.find_meta(raw_path.parent) or {"bit_depth": 10, "cfa": "RGGB"}
    raw = imaging.read_raw_png(raw_path, bit_depth or meta["bit_depth"], cfa or meta["cfa"])
    model = checkpoint.build_model()
    y, y_p, y_a = predict(model, raw)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = {"y": y}
    if emit_intermediates:
        images.update(y_p=y_p, y_a=y_a,
                      log_amplitude=fourier.log_amplitude_image(y), phase=fourier.phase_image(y))
    written = []
    for key, img in images.items():
        path = out_dir / f"{raw_path.stem}{INFER_SUFFIXES[key]}"
        imaging.write_rgb(path, img)
        written.append(path)
    return written
