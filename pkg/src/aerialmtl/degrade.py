"""Input degradations: uniform sparsification, distance-dependent noise, box masking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataio import BoundingBox, DepthMap, SparseDepthMap

DEFAULT_DENSITY = 0.007
NOISE_FLOOR = 1e-3

Rect = tuple[int, int, int, int]  # x, y, w, h in pixels


@dataclass
class CorruptionSpec:
    density: float = DEFAULT_DENSITY
    noise_level: float = 0.0
    mask_rects: list[Rect] = field(default_factory=list)
    # random masks: count, side range in pixels, placement "structures" | "uniform"
    mask_random: int = 0
    mask_size: tuple[int, int] = (24, 64)
    mask_placement: str = "structures"
    resparsify: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.density <= 1.0:
            raise ValueError(f"density must lie in (0, 1], got {self.density}")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if self.mask_placement not in ("structures", "uniform"):
            raise ValueError(f"unknown mask placement {self.mask_placement!r}")


def sample_count(density: float, h: int, w: int) -> int:
    # round half up; Python's round() would send 0.5 to 0
    return int(np.floor(density * h * w + 0.5))


def sparsify(dense: DepthMap, density: float = DEFAULT_DENSITY, seed: int = 0) -> SparseDepthMap:
    if not dense.valid_mask.all():
        raise ValueError("sparsify expects a fully valid dense map")
    h, w = dense.shape
    n = sample_count(density, h, w)
    if n == 0:
        raise ValueError(f"density {density} keeps no pixels of a {w}x{h} map")
    idx = np.random.default_rng(seed).permutation(h * w)[:n]
    out = np.zeros(h * w, dtype=np.float32)
    out[idx] = dense.values.reshape(-1)[idx]
    return SparseDepthMap(out.reshape(h, w), density)


def add_distance_noise(sparse: SparseDepthMap, level: float, seed: int = 0) -> SparseDepthMap:
    """d -> max(d + level * d * z, 1e-3) on valid pixels, z ~ N(0, 1) drawn per pixel.

    The normal draws depend only on (seed, shape), so different levels with one seed
    scale the same perturbation.
    """
    if level < 0:
        raise ValueError("noise level must be >= 0")
    if level == 0:
        return SparseDepthMap(sparse.values.copy(), sparse.density)
    d = sparse.values.astype(np.float64)
    z = np.random.default_rng(seed).standard_normal(d.shape)
    noisy = np.maximum(d + level * d * z, NOISE_FLOOR)
    out = np.where(sparse.valid_mask, noisy, 0.0).astype(np.float32)
    return SparseDepthMap(out, sparse.density)


def check_rect(rect: Rect, width: int, height: int) -> None:
    x, y, w, h = rect
    if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > width or y + h > height:
        raise ValueError(f"mask box {rect} outside {width}x{height} image")


def rect_mask(rects: Sequence[Rect], height: int, width: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    for rect in rects:
        check_rect(rect, width, height)
        x, y, w, h = rect
        mask[y:y + h, x:x + w] = True
    return mask


def mask_boxes(sparse: SparseDepthMap, rects: Sequence[Rect]) -> SparseDepthMap:
    h, w = sparse.shape
    mask = rect_mask(rects, h, w)
    return SparseDepthMap(np.where(mask, 0.0, sparse.values).astype(np.float32), sparse.density)


def random_rects(width: int, height: int, k: int, size: tuple[int, int], seed: int,
                 over: Sequence[BoundingBox] = ()) -> list[Rect]:
    """k random rectangles inside the image; centred on random ``over`` boxes when given."""
    rng = np.random.default_rng(seed)
    rects = []
    for _ in range(k):
        rw = int(min(rng.integers(size[0], size[1] + 1), width))
        rh = int(min(rng.integers(size[0], size[1] + 1), height))
        if over:
            b = over[int(rng.integers(len(over)))]
            cx = rng.uniform(b.x_min, b.x_max)
            cy = rng.uniform(b.y_min, b.y_max)
            x = int(np.clip(round(cx - rw / 2), 0, width - rw))
            y = int(np.clip(round(cy - rh / 2), 0, height - rh))
        else:
            x = int(rng.integers(0, width - rw + 1))
            y = int(rng.integers(0, height - rh + 1))
        rects.append((x, y, rw, rh))
    return rects


def corrupt(dense: DepthMap, sparse: SparseDepthMap | None, spec: CorruptionSpec,
            boxes: Sequence[BoundingBox] = ()) -> tuple[SparseDepthMap, list[Rect]]:
    """Apply a CorruptionSpec. Returns the degraded map and the masked rectangles.

    Sub-steps draw from independent streams derived from ``spec.seed``.
    """
    h, w = dense.shape
    if sparse is None or spec.resparsify:
        sparse = sparsify(dense, spec.density, seed=spec.seed)
    if spec.noise_level > 0:
        sparse = add_distance_noise(sparse, spec.noise_level, seed=spec.seed + 1_000_003)
    rects = list(spec.mask_rects)
    if spec.mask_random:
        over = boxes if spec.mask_placement == "structures" else ()
        rects += random_rects(w, h, spec.mask_random, spec.mask_size, spec.seed + 2_000_003, over)
    if rects:
        sparse = mask_boxes(sparse, rects)
    return sparse, rects
