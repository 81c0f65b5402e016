"""RAW mosaics, Bayer packing, bilinear demosaicing, synthetic RAW data and
paired dataset ingestion.

Images are numpy arrays. RAW mosaics are ``(H, W)``; RGB images and packed
RAW are channels-last ``(H, W, C)``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import correlate

from .exceptions import DimensionError, PairingError, ParameterError

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

CFA_PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")
PACKED_ORDER = ("R", "Gr", "Gb", "B")
SPLITS = ("train", "val", "test")
BIT_DEPTHS = (10, 12, 14, 16)
META_FILENAME = "meta.toml"

# (row, col) offset inside the 2x2 tile of each packed channel (R, Gr, Gb, B).
# Gr shares its row with R, Gb shares its row with B.
_CFA_OFFSETS = {
    "RGGB": ((0, 0), (0, 1), (1, 0), (1, 1)),
    "BGGR": ((1, 1), (1, 0), (0, 1), (0, 0)),
    "GRBG": ((0, 1), (0, 0), (1, 1), (1, 0)),
    "GBRG": ((1, 0), (1, 1), (0, 0), (0, 1)),
}


def cfa_offsets(cfa):
    """Return the 2x2-tile offsets of the (R, Gr, Gb, B) sites for ``cfa``."""
    try:
        return _CFA_OFFSETS[cfa.upper()]
    except (KeyError, AttributeError):
        raise ParameterError(f"unknown CFA pattern {cfa!r}; expected one of {CFA_PATTERNS}") from None


def cfa_color_map(height, width, cfa):
    """Per-pixel RGB channel index (0, 1, 2) of the sensor site."""
    colors = np.empty((height, width), dtype=np.int64)
    for (dy, dx), rgb_index in zip(cfa_offsets(cfa), (0, 1, 1, 2)):
        colors[dy::2, dx::2] = rgb_index
    return colors


def max_code(bit_depth):
    return 2 ** int(bit_depth) - 1


@dataclass(frozen=True)
class RawImage:
    """Single-channel Bayer mosaic normalized to [0, 1]."""

    data: np.ndarray
    bit_depth: int = 10
    cfa: str = "RGGB"

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise DimensionError(f"RAW data must be 2-D, got shape {data.shape}")
        if data.shape[0] % 2 or data.shape[1] % 2:
            raise DimensionError(f"RAW dimensions must be even, got {data.shape}")
        if self.bit_depth not in BIT_DEPTHS:
            raise ParameterError(f"unsupported bit depth {self.bit_depth}")
        cfa_offsets(self.cfa)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "cfa", self.cfa.upper())

    @property
    def shape(self):
        return self.data.shape

    def codes(self):
        """Integer sensor codes in ``[0, 2**bit_depth - 1]``."""
        return np.rint(np.clip(self.data, 0.0, 1.0) * max_code(self.bit_depth)).astype(np.uint16)


def _even_dims(raw):
    if raw.ndim != 2 or raw.shape[0] % 2 or raw.shape[1] % 2:
        raise DimensionError(f"RAW dimensions must be even 2-D, got {raw.shape}")


def _as_raw_array(raw):
    data = raw.data if isinstance(raw, RawImage) else np.asarray(raw, dtype=np.float64)
    _even_dims(data)
    return data


def pack_bayer(raw, cfa=None):
    """Pack an ``(H, W)`` mosaic into ``(H/2, W/2, 4)`` ordered (R, Gr, Gb, B).

    ``cfa`` defaults to ``raw.cfa`` for :class:`RawImage` input and to RGGB
    for plain arrays.
    """
    if cfa is None:
        cfa = raw.cfa if isinstance(raw, RawImage) else "RGGB"
    data = _as_raw_array(raw)
    return np.stack([data[dy::2, dx::2] for dy, dx in cfa_offsets(cfa)], axis=-1)


def unpack_bayer(packed, cfa="RGGB"):
    """Inverse of :func:`pack_bayer`."""
    packed = np.asarray(packed)
    if packed.ndim != 3 or packed.shape[-1] != 4:
        raise DimensionError(f"packed RAW must be (H/2, W/2, 4), got {packed.shape}")
    h, w = packed.shape[:2]
    raw = np.empty((2 * h, 2 * w), dtype=packed.dtype)
    for c, (dy, dx) in enumerate(cfa_offsets(cfa)):
        raw[dy::2, dx::2] = packed[..., c]
    return raw


_KERNEL_RB = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64) / 4.0
_KERNEL_G = np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]], dtype=np.float64) / 4.0


def demosaic(raw, cfa=None):
    """Bilinear demosaic with mirror padding; native samples are kept exactly."""
    if cfa is None:
        cfa = raw.cfa if isinstance(raw, RawImage) else "RGGB"
    data = _as_raw_array(raw)
    colors = cfa_color_map(*data.shape, cfa)
    out = np.empty(data.shape + (3,), dtype=np.float64)
    for channel, kernel in zip(range(3), (_KERNEL_RB, _KERNEL_G, _KERNEL_RB)):
        mask = colors == channel
        # scipy "mirror" reflects about the edge sample, preserving CFA parity
        interp = correlate(np.where(mask, data, 0.0), kernel, mode="mirror")
        out[..., channel] = np.where(mask, data, interp)
    return out


@dataclass(frozen=True)
class DegradationParams:
    """Parameters of the sRGB -> RAW simulation."""

    inverse_gamma: float = 2.2
    wb_gains: tuple = (2.0, 1.0, 1.6)
    noise_read_sigma: float = 0.0
    noise_shot_gain: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.inverse_gamma > 0:
            raise ParameterError(f"inverse_gamma must be positive, got {self.inverse_gamma}")
        gains = tuple(float(g) for g in self.wb_gains)
        if len(gains) != 3 or min(gains) <= 0:
            raise ParameterError(f"wb_gains must be 3 positive values, got {self.wb_gains}")
        if self.noise_read_sigma < 0 or self.noise_shot_gain < 0:
            raise ParameterError("noise parameters must be nonnegative")
        object.__setattr__(self, "wb_gains", gains)


def synthesize_raw(rgb, params=DegradationParams(), bit_depth=10, cfa="RGGB"):
    """Simulate a quantized Bayer RAW from an sRGB image in [0, 1].

    Applies ``x ** inverse_gamma``, divides by the white-balance gains,
    samples the CFA, adds Gaussian noise with variance
    ``read_sigma**2 + shot_gain * signal``, clamps and quantizes.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[-1] != 3:
        raise DimensionError(f"RGB image must be (H, W, 3), got {rgb.shape}")
    _even_dims(rgb[..., 0])
    if rgb.min() < 0 or rgb.max() > 1:
        raise ParameterError("RGB values must lie in [0, 1]")

    linear = rgb ** params.inverse_gamma / np.asarray(params.wb_gains)
    colors = cfa_color_map(*rgb.shape[:2], cfa)
    mosaic = np.take_along_axis(linear, colors[..., None], axis=-1)[..., 0]

    if params.noise_read_sigma > 0 or params.noise_shot_gain > 0:
        rng = np.random.default_rng(params.seed)
        sigma = np.sqrt(params.noise_read_sigma**2 + params.noise_shot_gain * mosaic)
        mosaic = mosaic + sigma * rng.standard_normal(mosaic.shape)

    levels = max_code(bit_depth)
    mosaic = np.rint(np.clip(mosaic, 0.0, 1.0) * levels) / levels
    return RawImage(mosaic, bit_depth=bit_depth, cfa=cfa)


def random_scene(size, seed):
    """Procedural smooth RGB scene in [0, 1] (gradient, blobs, soft-edged boxes)."""
    if isinstance(size, int):
        size = (size, size)
    h, w = size
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")

    base = rng.uniform(0.2, 0.6, 3)
    tilt = rng.uniform(-0.25, 0.25, (2, 3))
    img = base + yy[..., None] * tilt[0] + xx[..., None] * tilt[1]
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0, 1, 2)
        radius = rng.uniform(0.1, 0.3)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))
        img = img + blob[..., None] * rng.uniform(-0.3, 0.3, 3)
    for _ in range(rng.integers(1, 3)):
        y0, x0 = rng.uniform(0, 0.7, 2)
        extent = rng.uniform(0.15, 0.35, 2)
        soft = 0.03
        box = (
            _smoothstep((yy - y0) / soft) * _smoothstep((y0 + extent[0] - yy) / soft)
            * _smoothstep((xx - x0) / soft) * _smoothstep((x0 + extent[1] - xx) / soft)
        )
        img = img * (1 - box[..., None]) + box[..., None] * rng.uniform(0.1, 0.9, 3)
    return np.clip(img, 0.0, 1.0)


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3 - 2 * t)


# --------------------------------------------------------------------------
# File IO


def read_rgb(path):
    """Read an 8-bit RGB PNG as float64 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_rgb(path, rgb):
    """Write an RGB image as an 8-bit PNG, clamping to [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim == 2:
        rgb = np.repeat(rgb[..., None], 3, axis=-1)
    codes = np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(codes).save(path, optimize=False)


def write_raw_png(path, raw):
    """Write a :class:`RawImage` as a 16-bit grayscale PNG of integer codes."""
    Image.fromarray(raw.codes()).save(path)  # uint16 maps to I;16


def read_raw_png(path, bit_depth=10, cfa="RGGB"):
    with Image.open(path) as im:
        codes = np.asarray(im, dtype=np.float64)
    if codes.ndim != 2:
        raise DimensionError(f"{path}: RAW PNG must be single-channel, got {codes.shape}")
    return RawImage(codes / max_code(bit_depth), bit_depth=bit_depth, cfa=cfa)


def write_meta(root, bit_depth, cfa):
    text = f'bit_depth = {int(bit_depth)}\ncfa = "{cfa.upper()}"\n'
    Path(root, META_FILENAME).write_text(text)


def read_meta(root):
    path = Path(root, META_FILENAME)
    if not path.exists():
        return {"bit_depth": 10, "cfa": "RGGB"}
    with open(path, "rb") as fh:
        meta = tomllib.load(fh)
    return {"bit_depth": int(meta.get("bit_depth", 10)), "cfa": str(meta.get("cfa", "RGGB")).upper()}


def find_meta(path, max_depth=4):
    """Search ``path`` and its parents for a dataset metadata file."""
    path = Path(path).resolve()
    for parent in [path, *path.parents][: max_depth + 1]:
        if (parent / META_FILENAME).is_file():
            return read_meta(parent)
    return None


# --------------------------------------------------------------------------
# Datasets


@dataclass(frozen=True)
class DatasetIndex:
    """Immutable list of aligned (raw_path, rgb_path) pairs of one split."""

    pairs: tuple = ()
    patch_size: int = 448
    split: str = "train"
    bit_depth: int = 10
    cfa: str = "RGGB"
    root: Path = field(default=None, compare=False)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def load_pair(self, i):
        raw_path, rgb_path = self.pairs[i]
        return read_raw_png(raw_path, self.bit_depth, self.cfa), read_rgb(rgb_path)

    def load_all(self):
        return [self.load_pair(i) for i in range(len(self))]


def load_dataset(root_dir, split="train", patch_size=448):
    """Index ``<root>/<split>/{raw,rgb}/<name>.png`` pairs sorted by name."""
    if split not in SPLITS:
        raise ParameterError(f"split must be one of {SPLITS}, got {split!r}")
    if patch_size % 2:
        raise ParameterError(f"patch_size must be even, got {patch_size}")
    root = Path(root_dir)
    meta = read_meta(root)
    raw_dir, rgb_dir = root / split / "raw", root / split / "rgb"
    raw_names = {p.stem: p for p in raw_dir.glob("*.png")} if raw_dir.is_dir() else {}
    rgb_names = {p.stem: p for p in rgb_dir.glob("*.png")} if rgb_dir.is_dir() else {}

    orphans = sorted(
        [str(raw_names[n]) for n in raw_names.keys() - rgb_names.keys()]
        + [str(rgb_names[n]) for n in rgb_names.keys() - raw_names.keys()]
    )
    if orphans:
        raise PairingError(f"files without counterpart: {', '.join(orphans)}", orphans)

    pairs = []
    for name in sorted(raw_names):
        raw_path, rgb_path = raw_names[name], rgb_names[name]
        with Image.open(raw_path) as a, Image.open(rgb_path) as b:
            if a.size != b.size:
                raise DimensionError(f"{name}: RAW size {a.size[::-1]} != RGB size {b.size[::-1]}")
        pairs.append((raw_path, rgb_path))
    return DatasetIndex(tuple(pairs), patch_size, split, meta["bit_depth"], meta["cfa"], root)


def extract_patch_pair(pair, patch_size, seed=None, top_left=None):
    """Co-located crops of a (RawImage, RGB) pair.

    The top-left corner is drawn from ``seed`` unless given explicitly, and
    is always rounded down to even coordinates so the CFA phase is kept.
    """
    raw, rgb = pair
    h, w = raw.shape
    if patch_size % 2:
        raise DimensionError(f"patch_size must be even, got {patch_size}")
    if patch_size > h or patch_size > w:
        raise DimensionError(f"patch {patch_size} larger than image {h}x{w}")
    if rgb.shape[:2] != (h, w):
        raise DimensionError(f"RAW {raw.shape} and RGB {rgb.shape[:2]} differ")
    if top_left is None:
        rng = np.random.default_rng(seed)
        top_left = (rng.integers(0, h - patch_size + 1), rng.integers(0, w - patch_size + 1))
    y0, x0 = (int(v) - int(v) % 2 for v in top_left)
    window = (slice(y0, y0 + patch_size), slice(x0, x0 + patch_size))
    return RawImage(raw.data[window], raw.bit_depth, raw.cfa), rgb[window]


def write_dataset(root, rgb_images, params=DegradationParams(), split="train",
                  bit_depth=10, cfa="RGGB", names=None):
    """Synthesize RAW counterparts for ``rgb_images`` and write the layout."""
    root = Path(root)
    raw_dir, rgb_dir = root / split / "raw", root / split / "rgb"
    os.makedirs(raw_dir, exist_ok=True)
    os.makedirs(rgb_dir, exist_ok=True)
    write_meta(root, bit_depth, cfa)
    for i, rgb in enumerate(rgb_images):
        name = names[i] if names else f"{i:05d}"
        h, w = rgb.shape[:2]
        rgb = rgb[: h - h % 2, : w - w % 2]
        # quantize first so the stored GT is exactly what the RAW was made from
        rgb = np.rint(np.clip(rgb, 0, 1) * 255) / 255
        sample_params = DegradationParams(
            params.inverse_gamma, params.wb_gains, params.noise_read_sigma,
            params.noise_shot_gain, params.seed + i,
        )
        write_raw_png(raw_dir / f"{name}.png", synthesize_raw(rgb, sample_params, bit_depth, cfa))
        write_rgb(rgb_dir / f"{name}.png", rgb)
    return root
