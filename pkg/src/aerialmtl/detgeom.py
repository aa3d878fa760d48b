"""Box geometry under the detection pathway.

Boxes are (x1, y1, x2, y2) in continuous pixel coordinates, area = (x2-x1)*(y2-y1).
Tensor functions work on torch tensors; the list-of-BoundingBox wrappers are for
evaluation code and tests.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch

from .dataio import BoundingBox

BBOX_CLIP = math.log(1000.0 / 16)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a.x_max - a.x_min) * (a.y_max - a.y_min) + (b.x_max - b.x_min) * (b.y_max - b.y_min) - inter
    return inter / union


def box_area(boxes: torch.Tensor) -> torch.Tensor:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU matrix (N, M)."""
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


# --------------------------------------------------------------------------- NMS

def nms_order(boxes: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Priority order: score descending, then x1, y1, x2, y2 ascending."""
    return np.lexsort((boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], -scores))


def nms_indices(boxes: torch.Tensor, scores: torch.Tensor, iou_threshold: float) -> torch.Tensor:
    """Greedy NMS for one class. Returns kept indices in priority order."""
    if boxes.numel() == 0:
        return torch.zeros(0, dtype=torch.long)
    b = boxes.detach().cpu().double()
    order = nms_order(b.numpy(), scores.detach().cpu().double().numpy())
    b = b[torch.from_numpy(order)]
    over = (box_iou(b, b) > iou_threshold).numpy()
    n = len(order)
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for i in range(n):
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed[i + 1:] |= over[i, i + 1:]
    return torch.from_numpy(order[keep]).long()


def batched_nms(boxes: torch.Tensor, scores: torch.Tensor, groups: torch.Tensor, iou_threshold: float) -> torch.Tensor:
    """NMS run independently inside each group id; kept indices sorted by score."""
    keep = []
    for g in torch.unique(groups):
        idx = torch.nonzero(groups == g).flatten()
        keep.append(idx[nms_indices(boxes[idx], scores[idx], iou_threshold)])
    if not keep:
        return torch.zeros(0, dtype=torch.long)
    keep = torch.cat(keep)
    order = nms_order(boxes[keep].detach().cpu().double().numpy(), scores[keep].detach().cpu().double().numpy())
    return keep[torch.from_numpy(order)]


def nms(dets: Sequence[BoundingBox], iou_threshold: float = 0.5) -> list[BoundingBox]:
    """Per-class greedy NMS over a DetectionSet."""
    if not dets:
        return []
    boxes = torch.tensor([d.as_tuple() for d in dets], dtype=torch.float64)
    scores = torch.tensor([d.score for d in dets], dtype=torch.float64)
    classes = torch.tensor([d.class_id for d in dets])
    keep = batched_nms(boxes, scores, classes, iou_threshold)
    return [dets[i] for i in keep.tolist()]


# --------------------------------------------------------------------------- anchors

def level_anchors(feat_h: int, feat_w: int, stride: int, size: float,
                  ratios: Sequence[float] = (0.5, 1.0, 2.0)) -> torch.Tensor:
    """Anchors (feat_h * feat_w * len(ratios), 4) centred at ((j + .5) * stride, (i + .5) * stride).

    Order is location-major, ratio-minor, matching a conv head with len(ratios) outputs
    per location.
    """
    r = torch.tensor(ratios, dtype=torch.float32)
    ws = size / torch.sqrt(r)
    hs = size * torch.sqrt(r)
    base = torch.stack([-ws, -hs, ws, hs], dim=1) / 2
    cy = (torch.arange(feat_h, dtype=torch.float32) + 0.5) * stride
    cx = (torch.arange(feat_w, dtype=torch.float32) + 0.5) * stride
    yy, xx = torch.meshgrid(cy, cx, indexing="ij")
    shifts = torch.stack([xx, yy, xx, yy], dim=-1).reshape(-1, 1, 4)
    return (shifts + base[None]).reshape(-1, 4)


def anchor_grid(feature_sizes: Sequence[tuple[int, int]], strides: Sequence[int], sizes: Sequence[float],
                ratios: Sequence[float] = (0.5, 1.0, 2.0)) -> list[torch.Tensor]:
    return [level_anchors(h, w, s, size, ratios) for (h, w), s, size in zip(feature_sizes, strides, sizes)]


# --------------------------------------------------------------------------- box coding

def encode(reference: torch.Tensor, targets: torch.Tensor, weights=(1.0, 1.0, 1.0, 1.0)) -> torch.Tensor:
    """Centre/size log deltas that move ``reference`` boxes onto ``targets``."""
    wx, wy, ww, wh = weights
    rw = reference[:, 2] - reference[:, 0]
    rh = reference[:, 3] - reference[:, 1]
    rx = reference[:, 0] + 0.5 * rw
    ry = reference[:, 1] + 0.5 * rh
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tx = targets[:, 0] + 0.5 * tw
    ty = targets[:, 1] + 0.5 * th
    return torch.stack([wx * (tx - rx) / rw, wy * (ty - ry) / rh,
                        ww * torch.log(tw / rw), wh * torch.log(th / rh)], dim=1)


def decode(reference: torch.Tensor, deltas: torch.Tensor, weights=(1.0, 1.0, 1.0, 1.0)) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw = reference[:, 2] - reference[:, 0]
    rh = reference[:, 3] - reference[:, 1]
    rx = reference[:, 0] + 0.5 * rw
    ry = reference[:, 1] + 0.5 * rh
    dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
    dw = (deltas[:, 2] / ww).clamp(max=BBOX_CLIP)
    dh = (deltas[:, 3] / wh).clamp(max=BBOX_CLIP)
    cx = dx * rw + rx
    cy = dy * rh + ry
    w = torch.exp(dw) * rw
    h = torch.exp(dh) * rh
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def clip_boxes(boxes: torch.Tensor, width: int, height: int) -> torch.Tensor:
    x = boxes[:, 0::2].clamp(0, width)
    y = boxes[:, 1::2].clamp(0, height)
    return torch.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], dim=1)


# --------------------------------------------------------------------------- assignment

def match(iou_matrix: torch.Tensor, pos_thr: float, neg_thr: float, allow_low_quality: bool = True):
    """Match rows (ground truth) to columns (anchors / proposals).

    Returns (labels, matched_gt): labels 1 positive, 0 negative, -1 ignored.
    """
    n = iou_matrix.shape[1]
    if iou_matrix.shape[0] == 0:
        return torch.zeros(n, dtype=torch.long), torch.zeros(n, dtype=torch.long)
    best, matched = iou_matrix.max(dim=0)
    labels = torch.full((n,), -1, dtype=torch.long)
    labels[best < neg_thr] = 0
    labels[best >= pos_thr] = 1
    if allow_low_quality:
        gt_best = iou_matrix.max(dim=1).values
        for g in range(iou_matrix.shape[0]):
            if gt_best[g] <= 0:
                continue
            cols = torch.nonzero(iou_matrix[g] == gt_best[g]).flatten()
            labels[cols] = 1
            matched[cols] = g
    return labels, matched


def assign_targets(anchors: torch.Tensor, gt: torch.Tensor, pos_thr: float = 0.7, neg_thr: float = 0.3,
                   weights=(1.0, 1.0, 1.0, 1.0)):
    """Per-anchor label (1/0/-1), matched gt index and regression target.

    Positive: IoU >= pos_thr with some gt, or the best anchor of a gt.
    Negative: max IoU < neg_thr (and not positive). Everything else is ignored.
    """
    if isinstance(anchors, (list, tuple)):
        anchors = torch.cat(list(anchors))
    gt = gt.reshape(-1, 4).to(anchors.dtype)
    labels, matched = match(box_iou(gt, anchors), pos_thr, neg_thr)
    if gt.shape[0] == 0:
        targets = torch.zeros_like(anchors)
    else:
        targets = encode(anchors, gt[matched], weights)
    return labels, matched, targets


# --------------------------------------------------------------------------- average precision

def _match_image(dets, gts, iou_thr):
    """Greedy by score: each detection takes the highest-IoU unmatched gt at or above iou_thr."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    taken = [False] * len(gts)
    out = []
    for i in order:
        best, best_j = -1.0, -1
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            v = iou(dets[i], g)
            if v >= iou_thr and v > best:
                best, best_j = v, j
        if best_j >= 0:
            taken[best_j] = True
        out.append((dets[i].score, best_j >= 0))
    return out


def average_precision_multi(pairs: Sequence[tuple[Sequence[BoundingBox], Sequence[BoundingBox]]],
                            iou_thr: float = 0.5) -> float | None:
    """All-point interpolated AP over (detections, ground truth) pairs, one pair per image.

    Classes are ignored; filter by class before calling. None when there is no ground truth.
    """
    n_gt = sum(len(g) for _, g in pairs)
    if n_gt == 0:
        return None
    hits = []
    for dets, gts in pairs:
        hits.extend(_match_image(list(dets), list(gts), iou_thr))
    if not hits:
        return 0.0
    hits.sort(key=lambda t: -t[0])
    tp = np.cumsum([h for _, h in hits], dtype=float)
    fp = np.cumsum([not h for _, h in hits], dtype=float)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision envelope, then area under the step curve
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(dets: Sequence[BoundingBox], gt: Sequence[BoundingBox], iou_thr: float = 0.5) -> float:
    ap = average_precision_multi([(dets, gt)], iou_thr)
    return 0.0 if ap is None else ap


def mean_average_precision(pairs, iou_thr: float = 0.5) -> float | None:
    """Class-aware mAP: AP per class that has ground truth, averaged."""
    classes = sorted({g.class_id for _, gts in pairs for g in gts})
    if not classes:
        return None
    aps = []
    for c in classes:
        sub = [([d for d in dets if d.class_id == c], [g for g in gts if g.class_id == c]) for dets, gts in pairs]
        aps.append(average_precision_multi(sub, iou_thr))
    return float(np.mean(aps))
