"""Paired rainy/clean image ingestion, procedural rain synthesis, and
randomized training crops.

Images are float32 RGB arrays in [0,1], shape (H, W, 3). Batches convert to
channel-first tensors. Synthetic rain is additive anti-aliased line streaks,
deterministic under a fixed seed, which makes rainy >= clean pixelwise.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import ShapeError, Tensor, interp_matrix

__all__ = [
    "DataError",
    "ImagePair",
    "RainSynthConfig",
    "DatasetManifest",
    "load_image",
    "save_image",
    "load_manifest",
    "synthesize_rain",
    "random_crop",
    "to_tensor",
    "tensor_to_images",
    "generate_clean_image",
    "make_synthetic_dataset",
]

DEFAULT_PAIR_PATTERN = "rain-{id}.png,norain-{id}.png"


class DataError(RuntimeError):
    """Raised on unreadable, unpaired or malformed dataset inputs."""


@dataclass
class ImagePair:
    """A rainy image and its rain-free ground truth, same size, values in [0,1]."""

    rainy: np.ndarray
    clean: np.ndarray
    id: str = ""

    def __post_init__(self):
        if self.rainy.shape != self.clean.shape:
            raise DataError(
                f"pair {self.id!r}: rainy {self.rainy.shape} vs clean {self.clean.shape}"
            )


@dataclass
class RainSynthConfig:
    """Ranges for procedural streaks; angles are degrees from the x-axis, so
    the default 60-120 band gives near-vertical rain."""

    streak_count: tuple = (40, 80)
    angle: tuple = (60.0, 120.0)
    length: tuple = (8.0, 24.0)
    width: tuple = (1.0, 2.5)
    intensity: tuple = (0.10, 0.40)
    seed: int = 0

    def __post_init__(self):
        for name in ("streak_count", "angle", "length", "width", "intensity"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ValueError(f"{name} range ({lo}, {hi}) is empty")
        if self.intensity[0] < 0:
            raise ValueError("streak intensity cannot be negative")


@dataclass
class DatasetManifest:
    root: Path
    pairs: list  # of (id, rainy_path, clean_path)
    split: str = "train"
    unpaired: list = field(default_factory=list)

    def __len__(self):
        return len(self.pairs)


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    return arr


def save_image(path, img: np.ndarray):
    """Write an (H,W,3) [0,1] array as an 8-bit PNG."""
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def _pattern_regex(template: str) -> re.Pattern:
    if "{id}" not in template:
        raise DataError(f"pair pattern piece {template!r} lacks an {{id}} placeholder")
    head, tail = template.split("{id}", 1)
    return re.compile(re.escape(head) + r"(?P<id>.+)" + re.escape(tail) + r"$")


def load_manifest(root, pattern: str = DEFAULT_PAIR_PATTERN, split: str = "train") -> DatasetManifest:
    """Pair files under `root` by the comma-separated rainy,clean templates.

    Pairs are ordered lexicographically by id; files matching only one side
    are reported in the manifest's unpaired list. No pairs at all is an error.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    parts = pattern.split(",")
    if len(parts) != 2:
        raise DataError(f"pair pattern must be 'rainy-template,clean-template', got {pattern!r}")
    rx_rain, rx_clean = (_pattern_regex(p.strip()) for p in parts)
    rainy, clean = {}, {}
    for name in sorted(p.name for p in root.iterdir() if p.is_file()):
        m = rx_rain.match(name)
        if m:
            rainy[m.group("id")] = root / name
            continue
        m = rx_clean.match(name)
        if m:
            clean[m.group("id")] = root / name
    ids = sorted(rainy.keys() & clean.keys())
    unpaired = sorted(
        [str(rainy[i]) for i in rainy.keys() - clean.keys()]
        + [str(clean[i]) for i in clean.keys() - rainy.keys()]
    )
    if not ids:
        raise DataError(f"no pairs found under {root} with pattern {pattern!r}")
    pairs = [(i, rainy[i], clean[i]) for i in ids]
    return DatasetManifest(root=root, pairs=pairs, split=split, unpaired=unpaired)


def load_pair(entry) -> ImagePair:
    pid, rainy_path, clean_path = entry
    return ImagePair(rainy=load_image(rainy_path), clean=load_image(clean_path), id=pid)


# ---------------------------------------------------------------------------
# synthesis


def _draw_streak(rain, y0, x0, angle_deg, length, width, intensity):
    h, w = rain.shape
    theta = math.radians(angle_deg)
    dy, dx = math.sin(theta), math.cos(theta)
    ay, ax = y0 - dy * length / 2.0, x0 - dx * length / 2.0
    by, bx = y0 + dy * length / 2.0, x0 + dx * length / 2.0
    margin = width / 2.0 + 1.0
    lo_y = max(0, int(math.floor(min(ay, by) - margin)))
    hi_y = min(h, int(math.ceil(max(ay, by) + margin)) + 1)
    lo_x = max(0, int(math.floor(min(ax, bx) - margin)))
    hi_x = min(w, int(math.ceil(max(ax, bx) + margin)) + 1)
    if lo_y >= hi_y or lo_x >= hi_x:
        return
    yy, xx = np.mgrid[lo_y:hi_y, lo_x:hi_x]
    vy, vx = by - ay, bx - ax
    seg_sq = vy * vy + vx * vx
    if seg_sq == 0:
        t = np.zeros_like(yy, dtype=np.float64)
    else:
        t = np.clip(((yy - ay) * vy + (xx - ax) * vx) / seg_sq, 0.0, 1.0)
    dist = np.hypot(yy - (ay + t * vy), xx - (ax + t * vx))
    alpha = np.clip(width / 2.0 + 0.5 - dist, 0.0, 1.0)
    rain[lo_y:hi_y, lo_x:hi_x] += (intensity * alpha).astype(rain.dtype)


def synthesize_rain(clean: np.ndarray, cfg: RainSynthConfig, rng=None, pair_id="") -> ImagePair:
    """Composite sampled streaks additively over `clean` and clamp to [0,1]."""
    if clean.min() < 0 or clean.max() > 1:
        raise DataError("clean image values must lie in [0,1]")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    h, w = clean.shape[:2]
    rain = np.zeros((h, w), dtype=np.float32)
    count = int(rng.integers(cfg.streak_count[0], cfg.streak_count[1] + 1))
    for _ in range(count):
        y0 = rng.uniform(0, h)
        x0 = rng.uniform(0, w)
        _draw_streak(
            rain,
            y0,
            x0,
            rng.uniform(*cfg.angle),
            rng.uniform(*cfg.length),
            rng.uniform(*cfg.width),
            rng.uniform(*cfg.intensity),
        )
    rainy = np.clip(clean + rain[:, :, None], 0.0, 1.0).astype(np.float32)
    return ImagePair(rainy=rainy, clean=clean.astype(np.float32), id=pair_id)


def generate_clean_image(rng, h=64, w=64) -> np.ndarray:
    """Smooth procedural 'scene': upsampled low-frequency noise plus a global
    gradient, kept inside [0.05, 0.95] so additive rain stays clampable."""
    ch, cw = max(2, h // 8), max(2, w // 8)
    coarse = rng.uniform(0.0, 1.0, size=(ch, cw, 3))
    my = interp_matrix(h, ch, np.float64)
    mx = interp_matrix(w, cw, np.float64)
    img = np.einsum("hc,cwk->hwk", my, np.einsum("cek,we->cwk", coarse, mx))
    gy = rng.uniform(-0.3, 0.3)
    gx = rng.uniform(-0.3, 0.3)
    ramp = (
        gy * np.linspace(-0.5, 0.5, h)[:, None] + gx * np.linspace(-0.5, 0.5, w)[None, :]
    )[:, :, None]
    img = 0.5 + 0.45 * (img - 0.5) * 2.0 + ramp
    return np.clip(img, 0.05, 0.95).astype(np.float32)


def make_synthetic_dataset(cfg: RainSynthConfig, count=8, size=64, seed=None) -> list:
    """Deterministic list of rain/clean pairs on procedural clean scenes."""
    seed = cfg.seed if seed is None else seed
    streams = np.random.SeedSequence(seed).spawn(count)
    pairs = []
    for k, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        clean = generate_clean_image(rng, size, size)
        pairs.append(synthesize_rain(clean, cfg, rng=rng, pair_id=f"{k:03d}"))
    return pairs


# ---------------------------------------------------------------------------
# cropping and batching


def random_crop(pair: ImagePair, size: int, rng) -> ImagePair:
    """One crop window, uniform over valid offsets, applied to both images."""
    h, w = pair.rainy.shape[:2]
    if h < size or w < size:
        raise DataError(f"pair {pair.id!r} is {h}x{w}, smaller than crop size {size}")
    y0 = int(rng.integers(0, h - size + 1))
    x0 = int(rng.integers(0, w - size + 1))
    return ImagePair(
        rainy=pair.rainy[y0 : y0 + size, x0 : x0 + size],
        clean=pair.clean[y0 : y0 + size, x0 : x0 + size],
        id=pair.id,
    )


def to_tensor(pairs) -> tuple:
    """Stack pairs into channel-first (rainy, clean) tensors, values unchanged."""
    pairs = list(pairs)
    if not pairs:
        raise DataError("empty batch")
    shape = pairs[0].rainy.shape
    for p in pairs:
        if p.rainy.shape != shape:
            raise DataError(f"mixed sizes in batch: {shape} vs {p.rainy.shape} ({p.id!r})")
    rainy = np.stack([p.rainy for p in pairs]).transpose(0, 3, 1, 2)
    clean = np.stack([p.clean for p in pairs]).transpose(0, 3, 1, 2)
    return (
        Tensor(np.ascontiguousarray(rainy, dtype=np.float32)),
        Tensor(np.ascontiguousarray(clean, dtype=np.float32)),
    )


def tensor_to_images(t) -> np.ndarray:
    """(N,3,H,W) tensor or array back to (N,H,W,3) float arrays."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ShapeError(f"expected an (N,3,H,W) batch, got shape {arr.shape}")
    return arr.transpose(0, 2, 3, 1)
