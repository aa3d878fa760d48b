"""Monte-Carlo dropout: per-pixel predictive mean and variance of the depth output."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .dataio import BoundingBox
from .model import MultiTaskNet, to_tensors


@dataclass
class UncertaintyMap:
    mean: np.ndarray      # meters
    variance: np.ndarray  # meters^2
    n_passes: int


@torch.no_grad()
def mc_dropout_predict(net: MultiTaskNet, rgb, sparse, n_passes: int = 20, seed: int = 0) -> UncertaintyMap:
    """Run ``n_passes`` depth passes with dropout active; pass i draws from seed + i.

    Fits a Gaussian per pixel: sample mean and maximum-likelihood (divide-by-n) variance.
    Dropout only lives in the decoder, so the encoder runs once.
    """
    if n_passes < 1:
        raise ValueError("n_passes must be >= 1")
    if not isinstance(rgb, torch.Tensor):
        rgb, sparse = to_tensors(rgb, sparse)
    was_training = net.training
    net.eval()
    try:
        feats = net.encode(rgb, sparse)
        for m in net.dropout_layers():
            m.train()
        passes = []
        with torch.random.fork_rng():
            for i in range(n_passes):
                torch.manual_seed(seed + i)
                passes.append(net.decode_depth(feats)[0, 0].numpy().astype(np.float64))
    finally:
        net.train(was_training)
    stack = np.stack(passes)
    mean = stack.mean(axis=0)
    var = ((stack - mean) ** 2).mean(axis=0)
    return UncertaintyMap(mean=mean, variance=var, n_passes=n_passes)


def box_region(boxes: Sequence[BoundingBox], height: int, width: int) -> np.ndarray:
    """Pixels whose centres fall inside any box."""
    mask = np.zeros((height, width), dtype=bool)
    for b in boxes:
        x0, y0 = int(np.ceil(b.x_min - 0.5)), int(np.ceil(b.y_min - 0.5))
        x1, y1 = int(np.ceil(b.x_max - 0.5)), int(np.ceil(b.y_max - 0.5))
        mask[max(y0, 0):min(y1, height), max(x0, 0):min(x1, width)] = True
    return mask


def summarize_uncertainty(umap: UncertaintyMap, boxes: Sequence[BoundingBox]) -> dict:
    """Mean variance inside vs outside the boxes; ``ratio`` = inside / outside (None if outside is 0)."""
    h, w = umap.variance.shape
    for b in boxes:
        if not b.inside(w, h):
            raise ValueError(f"box {b} outside {w}x{h} map")
    inside = box_region(boxes, h, w)
    if not inside.any():
        raise ValueError("no pixels inside the boxes")
    if inside.all():
        raise ValueError("no pixels outside the boxes")
    v_in = float(umap.variance[inside].mean())
    v_out = float(umap.variance[~inside].mean())
    return {"inside": v_in, "outside": v_out, "ratio": v_in / v_out if v_out > 0 else None}
