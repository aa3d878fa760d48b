"""Training objectives: depth consistency, depth smoothness, detection, weighted total."""
from __future__ import annotations

from dataclasses import dataclass

import torch

PROPOSAL_TERMS = ("rpn_objectness", "rpn_box")
FINAL_TERMS = ("roi_classifier", "roi_box")


@dataclass
class LossWeights:
    w_consistency: float = 1.0
    w_smoothness: float = 0.1
    w_detection: float = 1.0
    lam: float = 1.0  # relative weight of the final-detection term
    consistency_mode: str = "rmse"  # or "literal": mean per-pixel |error|

    def __post_init__(self):
        if min(self.w_consistency, self.w_smoothness, self.w_detection, self.lam) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.consistency_mode not in ("rmse", "literal"):
            raise ValueError(f"unknown consistency mode {self.consistency_mode!r}")

    @classmethod
    def parse(cls, text: str) -> "LossWeights":
        """``"w_c,w_s,w_d,lambda"`` as given on the command line."""
        vals = [float(v) for v in text.split(",")]
        if len(vals) != 4:
            raise ValueError("expected four comma-separated weights")
        return cls(*vals)


def consistency_loss(pred: torch.Tensor, gt: torch.Tensor, mode: str = "rmse") -> torch.Tensor:
    """Error over pixels where gt > 0.

    "rmse": sqrt(mean squared error). "literal": mean of per-pixel absolute error.
    """
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    valid = gt > 0
    n = int(valid.sum())
    if n == 0:
        raise ValueError("no valid ground-truth pixels")
    diff = (pred - gt)[valid]
    if mode == "rmse":
        return torch.sqrt((diff * diff).sum() / n)
    if mode == "literal":
        return diff.abs().sum() / n
    raise ValueError(f"unknown consistency mode {mode!r}")


def smoothness_loss(pred: torch.Tensor) -> torch.Tensor:
    """Mean over interior pixels of |d2/dx2| + |d2/dy2| (second differences)."""
    pred = torch.as_tensor(pred)
    h, w = pred.shape[-2:]
    if h < 3 or w < 3:
        raise ValueError(f"smoothness needs at least 3x3, got {w}x{h}")
    dxx = pred[..., 1:-1, :-2] - 2 * pred[..., 1:-1, 1:-1] + pred[..., 1:-1, 2:]
    dyy = pred[..., :-2, 1:-1] - 2 * pred[..., 1:-1, 1:-1] + pred[..., 2:, 1:-1]
    return (dxx.abs() + dyy.abs()).mean()


def proposal_and_final(terms: dict) -> tuple[torch.Tensor, torch.Tensor]:
    proposal = sum((terms[k] for k in PROPOSAL_TERMS), torch.tensor(0.0))
    final = sum((terms[k] for k in FINAL_TERMS), torch.tensor(0.0))
    return proposal, final


def detection_loss(terms, lam: float = 1.0) -> torch.Tensor:
    """l_proposal + lam * l_final.

    ``terms`` is either the loss dict from the detection pathway or a
    (proposal, final) pair.
    """
    if isinstance(terms, dict):
        proposal, final = proposal_and_final(terms)
    else:
        proposal, final = (torch.as_tensor(t, dtype=torch.float32) for t in terms)
    return proposal + lam * final


def total_loss(consistency, smoothness, detection, weights: LossWeights, multitask: bool) -> torch.Tensor:
    total = weights.w_consistency * torch.as_tensor(consistency) + weights.w_smoothness * torch.as_tensor(smoothness)
    if multitask:
        total = total + weights.w_detection * torch.as_tensor(detection)
    return total
