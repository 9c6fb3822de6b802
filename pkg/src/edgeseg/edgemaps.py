"""Canny edge maps as proxy targets for unlabelled images.

The detector is written from scratch on top of numpy. Per-pixel arithmetic
is organized as a fixed-order accumulation over kernel taps so that a
scalar (loop-based) re-implementation of the same pipeline produces
bitwise-identical floats; the test suite exploits this for exact
equivalence checks.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

# tan(22.5 deg) and tan(67.5 deg): sector boundaries for gradient angle
# quantization, computed once so both directions of a flip agree exactly.
_TAN_22_5 = math.tan(math.pi / 8.0)
_TAN_67_5 = math.tan(3.0 * math.pi / 8.0)


@dataclass(frozen=True)
class CannyConfig:
    """Detector parameters. Thresholds are fractions of the per-image
    maximum gradient magnitude, not absolute values."""

    sigma: float = 1.0
    low_fraction: float = 0.1
    high_fraction: float = 0.2

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if not (0 < self.low_fraction < self.high_fraction <= 1):
            raise ValueError(
                "need 0 < low_fraction < high_fraction <= 1, got "
                f"low={self.low_fraction}, high={self.high_fraction}"
            )

    def cache_key(self) -> str:
        payload = json.dumps(
            {"sigma": self.sigma, "low": self.low_fraction, "high": self.high_fraction},
            sort_keys=True,
        )
        return hashlib.sha1(payload.encode()).hexdigest()[:8]


@dataclass
class EdgeMap:
    values: np.ndarray  # binary {0,1}, uint8, H x W
    params: CannyConfig = field(default_factory=CannyConfig)

    def __post_init__(self):
        uniq = np.unique(self.values)
        if not np.all(np.isin(uniq, [0, 1])):
            raise ValueError("edge map must be binary {0,1}")


def reflect_index(i: int, n: int) -> int:
    """Mirror an out-of-range index back into [0, n) without repeating the
    edge sample (reflect-101 style for n > 1)."""
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i = i % period
    if i < 0:
        i += period
    return i if i < n else period - i


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return k / k.sum()


def _reflect_take(image: np.ndarray, axis: int, offsets: np.ndarray) -> np.ndarray:
    n = image.shape[axis]
    idx = np.array([reflect_index(i, n) for i in offsets])
    return np.take(image, idx, axis=axis)


def gaussian_smooth(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflected borders.

    Rows then columns; within each pass, taps accumulate left to right so
    a per-pixel scalar loop reproduces the floats exactly.
    """
    k = gaussian_kernel(sigma)
    r = (len(k) - 1) // 2
    out = image.astype(np.float64)
    for axis in (1, 0):
        acc = None
        for j in range(len(k)):
            offs = np.arange(out.shape[axis]) + (j - r)
            term = k[j] * _reflect_take(out, axis, offs)
            acc = term if acc is None else acc + term
        out = acc
    return out


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = np.array([[-1, -2, -1], [0, 0, 0], [1, 2, 1]], dtype=np.float64)


def sobel_gradients(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sobel filtering (correlation) with reflected borders.

    Taps accumulate in row-major kernel order for exact reproducibility.
    """
    h, w = image.shape
    gx = np.zeros((h, w), dtype=np.float64)
    gy = np.zeros((h, w), dtype=np.float64)
    for dy in (-1, 0, 1):
        rows = _reflect_take(image, 0, np.arange(h) + dy)
        for dx in (-1, 0, 1):
            shifted = _reflect_take(rows, 1, np.arange(w) + dx)
            gx = gx + _SOBEL_X[dy + 1, dx + 1] * shifted
            gy = gy + _SOBEL_Y[dy + 1, dx + 1] * shifted
    return gx, gy


def quantize_sectors(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Quantize gradient direction into 4 sectors.

    0: horizontal gradient (compare E/W neighbours), 1: down-right
    diagonal, 2: vertical gradient (compare N/S), 3: down-left diagonal.
    The boundaries are symmetric under flips so the whole detector is
    flip-equivariant.
    """
    ax, ay = np.abs(gx), np.abs(gy)
    sectors = np.zeros(gx.shape, dtype=np.int8)
    diag = (ay > _TAN_22_5 * ax) & (ay < _TAN_67_5 * ax)
    sectors[ay >= _TAN_67_5 * ax] = 2
    sectors[diag & (gx * gy > 0)] = 1
    sectors[diag & (gx * gy <= 0)] = 3
    return sectors


_SECTOR_OFFSETS = {
    0: ((0, 1), (0, -1)),
    1: ((1, 1), (-1, -1)),
    2: ((1, 0), (-1, 0)),
    3: ((1, -1), (-1, 1)),
}


def non_maximum_suppression(mag: np.ndarray, sectors: np.ndarray) -> np.ndarray:
    """Keep pixels whose magnitude is >= both neighbours along the
    quantized gradient direction (ties survive on both sides). Out-of-range
    neighbours count as 0."""
    h, w = mag.shape
    out = np.zeros_like(mag)
    for s, ((dy1, dx1), (dy2, dx2)) in _SECTOR_OFFSETS.items():
        n1 = _shift_zero(mag, dy1, dx1)
        n2 = _shift_zero(mag, dy2, dx2)
        keep = (sectors == s) & (mag > 0) & (mag >= n1) & (mag >= n2)
        out[keep] = mag[keep]
    return out


def _shift_zero(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """a shifted so that out[y, x] = a[y + dy, x + dx], zero outside."""
    h, w = a.shape
    out = np.zeros_like(a)
    ys = slice(max(0, -dy), min(h, h - dy))
    xs = slice(max(0, -dx), min(w, w - dx))
    ys_src = slice(max(0, dy), min(h, h + dy))
    xs_src = slice(max(0, dx), min(w, w + dx))
    out[ys, xs] = a[ys_src, xs_src]
    return out


def hysteresis(nms_mag: np.ndarray, low: float, high: float) -> np.ndarray:
    """Double-threshold hysteresis: strong pixels (>= high) seed a BFS over
    8-connected weak pixels (>= low)."""
    strong = nms_mag >= high
    weak = nms_mag >= low
    out = strong.copy()
    queue = deque(zip(*np.nonzero(strong)))
    h, w = nms_mag.shape
    while queue:
        y, x = queue.popleft()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and weak[ny, nx] and not out[ny, nx]:
                    out[ny, nx] = True
                    queue.append((ny, nx))
    return out.astype(np.uint8)


def canny_edges(image: np.ndarray, config: CannyConfig | None = None) -> EdgeMap:
    """Full pipeline: Gaussian smoothing -> Sobel gradients -> NMS ->
    hysteresis. A constant image yields an all-zero map."""
    config = config or CannyConfig()
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] < 3 or image.shape[1] < 3:
        raise ValueError(f"image must be at least 3x3, got shape {image.shape}")
    smoothed = gaussian_smooth(image, config.sigma)
    gx, gy = sobel_gradients(smoothed)
    mag = np.hypot(gx, gy)
    max_mag = mag.max()
    if max_mag == 0.0:
        return EdgeMap(np.zeros(image.shape, dtype=np.uint8), config)
    nms = non_maximum_suppression(mag, quantize_sectors(gx, gy))
    edges = hysteresis(nms, config.low_fraction * max_mag, config.high_fraction * max_mag)
    return EdgeMap(edges, config)


def foreground_weight(target: np.ndarray) -> float:
    """Background-to-foreground pixel ratio of a binary target; 1.0 when
    there is no foreground so the weighted loss degrades to plain BCE."""
    target = np.asarray(target)
    if not np.all(np.isin(np.unique(target), [0, 1])):
        raise ValueError("target must be binary {0,1}")
    ones = int(np.count_nonzero(target))
    if ones == 0:
        return 1.0
    return (target.size - ones) / ones


def edge_cache_path(cache_dir: Path, sample_id: str, config: CannyConfig) -> Path:
    return Path(cache_dir) / f"{sample_id}.edge.{config.cache_key()}.png"


def precompute_edge_targets(
    manifest,
    dataset_root: Path,
    config: CannyConfig,
    cache_dir: Path,
    target_size: tuple[int, int] | None = None,
) -> int:
    """Cache one 1-bit PNG edge map per unlabelled id. Skips entries whose
    cache file for this config already exists; returns the number written."""
    from .corpus import load_sample  # local import to avoid a cycle

    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    if not cache_dir.is_dir():
        raise OSError(f"cache dir not writable: {cache_dir}")
    written = 0
    for sample_id in manifest.unlabelled_ids:
        out_path = edge_cache_path(cache_dir, sample_id, config)
        if out_path.exists():
            continue
        sample = load_sample(sample_id, "unlabelled", dataset_root, target_size)
        edge = canny_edges(sample.image, config)
        tmp = out_path.with_suffix(".tmp")
        Image.fromarray((edge.values * 255).astype(np.uint8)).convert("1").save(tmp, format="PNG")
        tmp.replace(out_path)
        written += 1
    return written


def load_cached_edge_target(cache_dir: Path, sample_id: str, config: CannyConfig) -> np.ndarray:
    path = edge_cache_path(Path(cache_dir), sample_id, config)
    if not path.exists():
        raise FileNotFoundError(f"no cached edge map for id '{sample_id}' at {path}")
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr > 127).astype(np.uint8)
