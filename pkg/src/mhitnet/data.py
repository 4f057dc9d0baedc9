"""Synthetic CT-like ellipse data and binary PGM (P5) image I/O."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError
from .training import Dataset

BACKGROUND = 0.2


@dataclass
class SyntheticSpec:
    image_size: int = 64
    n_train: int = 200
    n_val: int = 50
    min_shapes: int = 1
    max_shapes: int = 3
    min_radius: float = 0.08  # fraction of image size
    max_radius: float = 0.22
    noise_sigma: float = 0.05
    contrast: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 16 or self.image_size % 16:
            raise ConfigurationError(f"image_size must be a positive multiple of 16, got {self.image_size}")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ConfigurationError("need 1 <= min_shapes <= max_shapes")
        if not 0 < self.min_radius <= self.max_radius < 0.5:
            raise ConfigurationError("need 0 < min_radius <= max_radius < 0.5")
        if self.noise_sigma < 0 or self.contrast <= 0:
            raise ConfigurationError("noise_sigma must be >= 0 and contrast > 0")
        if self.n_train < 0 or self.n_val < 0:
            raise ConfigurationError("sample counts must be non-negative")


def _ellipse_fields(size: int, cy: float, cx: float, a: float, b: float, theta: float):
    """Normalised radius and approximate signed distance (pixels, >0 inside)
    of every pixel centre for one rotated ellipse."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (c * dx + s * dy) / a
    v = (-s * dx + c * dy) / b
    r = np.sqrt(u * u + v * v)
    grad = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        sd = np.where(r > 0, (1.0 - r) * r / np.maximum(grad, 1e-12), np.inf)
    return r, sd


def render_sample(spec: SyntheticSpec, rng: np.random.Generator):
    """One (image, mask, shapes) triple. Mask pixels are those whose centre
    lies inside an ellipse; intensity ramps linearly across one pixel of the
    boundary (coverage 0.5 exactly at the boundary)."""
    n = spec.image_size
    count = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    coverage = np.zeros((n, n))
    mask = np.zeros((n, n), dtype=bool)
    shapes = []
    for _ in range(count):
        a, b = rng.uniform(spec.min_radius, spec.max_radius, size=2) * n
        reach = max(a, b)
        cy, cx = rng.uniform(reach, n - reach, size=2)
        theta = rng.uniform(0, np.pi)
        r, sd = _ellipse_fields(n, cy, cx, a, b, theta)
        mask |= r <= 1.0
        coverage = np.maximum(coverage, np.clip(0.5 + sd, 0.0, 1.0))
        shapes.append((cy, cx, a, b, theta))
    image = BACKGROUND + spec.contrast * coverage
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return image.astype(np.float32), mask.astype(np.float32), shapes


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Deterministic (train, val) datasets of shape (N, 1, S, S)."""
    rng = np.random.default_rng(spec.seed)

    def make(count):
        n = spec.image_size
        images = np.zeros((count, 1, n, n), dtype=np.float32)
        masks = np.zeros((count, 1, n, n), dtype=np.float32)
        for i in range(count):
            images[i, 0], masks[i, 0], _ = render_sample(spec, rng)
        return Dataset(images, masks)

    return make(spec.n_train), make(spec.n_val)


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------

def quantize(image: np.ndarray) -> np.ndarray:
    """Float image in [0, 1] to bytes with round-half-up: 0.5 -> 128."""
    x = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(255.0 * x + 0.5).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    """Write a 2-D image as binary PGM, maxval 255. Non-uint8 input is quantized."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise FormatError(f"PGM needs a 2-D image, got shape {img.shape}")
    if img.dtype != np.uint8:
        img = quantize(img)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


_TOKEN = re.compile(rb"\s*((?:#[^\n]*\n\s*)*)(\S+)")


def parse_pgm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P5":
        raise FormatError(f"not a binary PGM: magic {buf[:2]!r}", 0)
    pos = 2
    fields, starts = [], []
    for what in ("width", "height", "maxval"):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise FormatError(f"truncated header while reading {what}", pos)
        tok = m.group(2)
        if not tok.isdigit():
            raise FormatError(f"invalid {what} {tok!r}", m.start(2))
        fields.append(int(tok))
        starts.append(m.start(2))
        pos = m.end(2)
    if pos >= len(buf) or buf[pos:pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise FormatError("missing whitespace after maxval", pos)
    pos += 1
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise FormatError(f"invalid dimensions {w}x{h}", starts[0] if w < 1 else starts[1])
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", starts[2])
    need = w * h
    if len(buf) - pos < need:
        raise FormatError(f"truncated pixel data: need {need} bytes, have {len(buf) - pos}", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w).copy()


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_pgm(fh.read())


def save_dataset(data: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, (img, msk) in enumerate(zip(data.images, data.masks)):
        write_pgm(directory / f"image_{i:04d}.pgm", img[0])
        write_pgm(directory / f"mask_{i:04d}.pgm", msk[0])


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    names = sorted(p.name for p in directory.glob("image_*.pgm"))
    if not names:
        raise FileNotFoundError(f"no image_*.pgm files in {directory}")
    images, masks = [], []
    for name in names:
        images.append(read_pgm(directory / name).astype(np.float32) / 255.0)
        mask_path = directory / name.replace("image_", "mask_")
        masks.append((read_pgm(mask_path) > 127).astype(np.float32))
    return Dataset(np.stack(images)[:, None], np.stack(masks)[:, None])


def minmax_normalize(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    if hi - lo <= 0:
        return np.zeros_like(a, dtype=np.float64)
    return (a - lo) / (hi - lo)

