"""Shared fused encoder with a depth-completion decoder and an FPN two-stage detector.

Parameter keys under ``detection.`` belong to the detection pathway; every other key
is shared with (and identical in) a single-task network.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import roi_align

from . import detgeom
from .dataio import BoundingBox, DepthMap, Sample, SparseDepthMap

DETECTION_PREFIX = "detection."
PAD_MULTIPLE = 32
FPN_STRIDES = (4, 8, 16, 32, 64)
RGB_MEAN, RGB_STD = 0.5, 0.25


@dataclass
class ModelConfig:
    input_size: list[int] = field(default_factory=lambda: [320, 240])  # W, H
    depth_stem: int = 16
    rgb_stem: int = 48
    encoder_channels: list[int] = field(default_factory=lambda: [64, 64, 128, 256, 512])
    encoder_blocks: list[int] = field(default_factory=lambda: [1, 3, 4, 6, 3])
    bottleneck: int = 512
    decoder_channels: list[int] = field(default_factory=lambda: [256, 128, 64, 64, 64])
    fpn_channels: int = 64
    anchor_sizes: list[float] = field(default_factory=lambda: [16.0, 32.0, 64.0, 128.0, 256.0])
    anchor_ratios: list[float] = field(default_factory=lambda: [0.5, 1.0, 2.0])
    num_classes: int = 2
    dropout: float = 0.2
    multitask: bool = True
    gn_groups: int = 8
    fallback_depth_scale: float = 50.0
    rpn_pre_nms_train: int = 1000
    rpn_pre_nms_test: int = 500
    rpn_post_nms_train: int = 500
    rpn_post_nms_test: int = 300
    rpn_nms: float = 0.7
    rpn_fg_iou: float = 0.7
    rpn_bg_iou: float = 0.3
    rpn_batch: int = 256
    rpn_pos_fraction: float = 0.5
    roi_fg_iou: float = 0.5
    roi_batch: int = 256
    roi_pos_fraction: float = 0.25
    roi_output: int = 7
    roi_hidden: int = 256
    box_score_thresh: float = 0.05
    box_nms: float = 0.5
    detections_per_image: int = 100

    def __post_init__(self):
        if len(self.encoder_channels) != 5 or len(self.encoder_blocks) != 5:
            raise ValueError("the encoder has exactly 5 stages")
        if len(self.decoder_channels) != 5:
            raise ValueError("the decoder has exactly 5 stages")
        if len(self.anchor_sizes) != len(FPN_STRIDES):
            raise ValueError("one anchor size per FPN level")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        """Narrow network for fast tests; same topology."""
        base = dict(depth_stem=4, rgb_stem=12, encoder_channels=[16, 16, 32, 32, 64], encoder_blocks=[1, 1, 1, 1, 1],
                    bottleneck=64, decoder_channels=[32, 32, 16, 16, 16], fpn_channels=16, roi_hidden=32,
                    gn_groups=4, input_size=[64, 64], rpn_pre_nms_train=200, rpn_pre_nms_test=100,
                    rpn_post_nms_train=100, rpn_post_nms_test=50, rpn_batch=64, roi_batch=64)
        base.update(kw)
        return cls(**base)


@dataclass
class EncoderFeatures:
    stem: torch.Tensor                # fused stem output at stride 1
    stages: list[torch.Tensor]        # strides 2, 4, 8, 16, 32
    bottleneck: torch.Tensor          # stride 32
    scale: torch.Tensor               # (B,) per-sample depth normaliser in meters
    input_hw: tuple[int, int]
    padded_hw: tuple[int, int]


def padded_size(h: int, w: int, multiple: int = PAD_MULTIPLE) -> tuple[int, int]:
    return -(-h // multiple) * multiple, -(-w // multiple) * multiple


def _gn(groups: int, channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(groups, channels), channels)


class BasicBlock(nn.Module):
    """ResNet basic block with group norm."""

    def __init__(self, cin: int, cout: int, stride: int, groups: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.norm1 = _gn(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.norm2 = _gn(groups, cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _gn(groups, cout))

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


def _stage(cin: int, cout: int, blocks: int, groups: int) -> nn.Sequential:
    layers = [BasicBlock(cin, cout, 2, groups)]
    layers += [BasicBlock(cout, cout, 1, groups) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


class UpStage(nn.Module):
    def __init__(self, cin: int, cout: int, groups: int, dropout: float):
        super().__init__()
        self.deconv = nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1, output_padding=1, bias=False)
        self.norm = _gn(groups, cout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.drop(F.relu(self.norm(self.deconv(x))))


class FPN(nn.Module):
    def __init__(self, in_channels: Sequence[int], out_channels: int):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, out_channels, 1) for c in in_channels)
        self.output = nn.ModuleList(nn.Conv2d(out_channels, out_channels, 3, padding=1) for _ in in_channels)

    def forward(self, feats: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        last = self.lateral[-1](feats[-1])
        outs = [self.output[-1](last)]
        for i in range(len(feats) - 2, -1, -1):
            lat = self.lateral[i](feats[i])
            last = lat + F.interpolate(last, size=lat.shape[-2:], mode="nearest")
            outs.insert(0, self.output[i](last))
        # extra coarsest level: stride-2 subsampling of the top output
        outs.append(F.max_pool2d(outs[-1], kernel_size=1, stride=2))
        return outs


class RPNHead(nn.Module):
    def __init__(self, channels: int, num_anchors: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.cls_logits = nn.Conv2d(channels, num_anchors, 1)
        self.bbox_pred = nn.Conv2d(channels, 4 * num_anchors, 1)
        for layer in (self.conv, self.cls_logits, self.bbox_pred):
            nn.init.normal_(layer.weight, std=0.01)
            nn.init.zeros_(layer.bias)

    def forward(self, feats):
        logits, deltas = [], []
        for f in feats:
            t = F.relu(self.conv(f))
            a = self.cls_logits(t)
            b = self.bbox_pred(t)
            n, na, h, w = a.shape
            logits.append(a.permute(0, 2, 3, 1).reshape(n, -1))
            deltas.append(b.view(n, na, 4, h, w).permute(0, 3, 4, 1, 2).reshape(n, -1, 4))
        return logits, deltas


class BoxHead(nn.Module):
    def __init__(self, channels: int, resolution: int, hidden: int, num_classes: int):
        super().__init__()
        self.fc6 = nn.Linear(channels * resolution * resolution, hidden)
        self.fc7 = nn.Linear(hidden, hidden)
        self.cls_score = nn.Linear(hidden, num_classes + 1)
        self.bbox_pred = nn.Linear(hidden, 4 * (num_classes + 1))
        nn.init.normal_(self.cls_score.weight, std=0.01)
        nn.init.normal_(self.bbox_pred.weight, std=0.001)
        nn.init.zeros_(self.cls_score.bias)
        nn.init.zeros_(self.bbox_pred.bias)

    def forward(self, x):
        x = F.relu(self.fc7(F.relu(self.fc6(x.flatten(1)))))
        return self.cls_score(x), self.bbox_pred(x)


ROI_BOX_WEIGHTS = (10.0, 10.0, 5.0, 5.0)


class DetectionPathway(nn.Module):
    """FPN over encoder stages 2-5, RPN, multi-scale ROI pooling, box head, per-class NMS."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.fpn = FPN(cfg.encoder_channels[1:], cfg.fpn_channels)
        self.rpn = RPNHead(cfg.fpn_channels, len(cfg.anchor_ratios))
        self.box_head = BoxHead(cfg.fpn_channels, cfg.roi_output, cfg.roi_hidden, cfg.num_classes)

    # -- anchors / proposals
    def anchors(self, pyramid) -> list[torch.Tensor]:
        return detgeom.anchor_grid([tuple(p.shape[-2:]) for p in pyramid], FPN_STRIDES,
                                   self.cfg.anchor_sizes, self.cfg.anchor_ratios)

    @torch.no_grad()
    def proposals(self, anchors, logits, deltas, image_hw, training: bool) -> torch.Tensor:
        cfg = self.cfg
        pre = cfg.rpn_pre_nms_train if training else cfg.rpn_pre_nms_test
        post = cfg.rpn_post_nms_train if training else cfg.rpn_post_nms_test
        boxes, scores, levels = [], [], []
        for lvl, (anc, lg, dl) in enumerate(zip(anchors, logits, deltas)):
            k = min(pre, lg.numel())
            top = lg.topk(k).indices
            b = detgeom.clip_boxes(detgeom.decode(anc[top], dl[top].detach()), image_hw[1], image_hw[0])
            boxes.append(b)
            scores.append(lg[top].detach())
            levels.append(torch.full((k,), lvl))
        boxes, scores, levels = torch.cat(boxes), torch.cat(scores), torch.cat(levels)
        ok = ((boxes[:, 2] - boxes[:, 0]) >= 1e-3) & ((boxes[:, 3] - boxes[:, 1]) >= 1e-3)
        boxes, scores, levels = boxes[ok], scores[ok], levels[ok]
        keep = detgeom.batched_nms(boxes, scores, levels, cfg.rpn_nms)[:post]
        return boxes[keep]

    # -- ROI pooling
    def roi_features(self, pyramid, rois: torch.Tensor, padded_hw) -> torch.Tensor:
        """Pool each roi from the P2-P5 level matching its scale (k = 4 + log2(sqrt(area) / 224))."""
        out_size = self.cfg.roi_output
        feats = torch.zeros(rois.shape[0], pyramid[0].shape[1], out_size, out_size)
        if rois.shape[0] == 0:
            return feats
        size = torch.sqrt(detgeom.box_area(rois).clamp(min=1e-6))
        lvl = torch.floor(4 + torch.log2(size / 224) + 1e-6).clamp(2, 5).long() - 2
        for i in range(4):
            idx = torch.nonzero(lvl == i).flatten()
            if idx.numel() == 0:
                continue
            r = torch.cat([torch.zeros(idx.numel(), 1), rois[idx]], dim=1)
            feats[idx] = roi_align(pyramid[i], r, out_size, spatial_scale=1.0 / FPN_STRIDES[i], sampling_ratio=2)
        return feats

    # -- losses
    def rpn_loss(self, anchors, logits, deltas, gt: torch.Tensor):
        cfg = self.cfg
        anchors = torch.cat(anchors)
        labels, _, targets = detgeom.assign_targets(anchors, gt, cfg.rpn_fg_iou, cfg.rpn_bg_iou)
        pos = torch.nonzero(labels == 1).flatten()
        neg = torch.nonzero(labels == 0).flatten()
        n_pos = min(pos.numel(), int(cfg.rpn_batch * cfg.rpn_pos_fraction))
        n_neg = min(neg.numel(), cfg.rpn_batch - n_pos)
        pos = pos[torch.randperm(pos.numel())[:n_pos]]
        neg = neg[torch.randperm(neg.numel())[:n_neg]]
        sampled = torch.cat([pos, neg])
        logits = torch.cat(logits)
        deltas = torch.cat(deltas)
        obj = F.binary_cross_entropy_with_logits(logits[sampled], (labels[sampled] == 1).float())
        box = F.smooth_l1_loss(deltas[pos], targets[pos], beta=1 / 9, reduction="sum") / max(sampled.numel(), 1)
        return obj, box

    def roi_loss(self, pyramid, proposals, gt, gt_labels, padded_hw):
        cfg = self.cfg
        proposals = torch.cat([proposals, gt])
        if gt.shape[0] == 0:
            labels = torch.zeros(proposals.shape[0], dtype=torch.long)
            matched = torch.zeros(proposals.shape[0], dtype=torch.long)
        else:
            best, matched = detgeom.box_iou(gt, proposals).max(dim=0)
            labels = torch.where(best >= cfg.roi_fg_iou, gt_labels[matched], torch.zeros_like(matched))
        pos = torch.nonzero(labels > 0).flatten()
        neg = torch.nonzero(labels == 0).flatten()
        n_pos = min(pos.numel(), int(cfg.roi_batch * cfg.roi_pos_fraction))
        n_neg = min(neg.numel(), cfg.roi_batch - n_pos)
        pos = pos[torch.randperm(pos.numel())[:n_pos]]
        neg = neg[torch.randperm(neg.numel())[:n_neg]]
        sampled = torch.cat([pos, neg])
        rois = proposals[sampled]
        labels = labels[sampled]
        cls_logits, box_reg = self.box_head(self.roi_features(pyramid, rois, padded_hw))
        cls_loss = F.cross_entropy(cls_logits, labels)
        npos = pos.numel()
        if npos:
            targets = detgeom.encode(rois[:npos], gt[matched[sampled[:npos]]], ROI_BOX_WEIGHTS)
            reg = box_reg.view(box_reg.shape[0], -1, 4)[torch.arange(npos), labels[:npos]]
            box_loss = F.smooth_l1_loss(reg, targets, beta=1 / 9, reduction="sum") / labels.numel()
        else:
            box_loss = box_reg.sum() * 0.0
        return cls_loss, box_loss

    # -- inference
    @torch.no_grad()
    def postprocess(self, pyramid, proposals, image_hw, padded_hw) -> list[BoundingBox]:
        cfg = self.cfg
        cls_logits, box_reg = self.box_head(self.roi_features(pyramid, proposals, padded_hw))
        probs = F.softmax(cls_logits, dim=-1)
        n, k = probs.shape
        boxes = detgeom.decode(proposals.repeat_interleave(k, 0), box_reg.reshape(-1, 4), ROI_BOX_WEIGHTS)
        boxes = detgeom.clip_boxes(boxes, image_hw[1], image_hw[0]).view(n, k, 4)[:, 1:].reshape(-1, 4)
        scores = probs[:, 1:].reshape(-1)
        labels = torch.arange(1, k).repeat(n)
        ok = (scores > cfg.box_score_thresh) & ((boxes[:, 2] - boxes[:, 0]) >= 1e-2) & \
             ((boxes[:, 3] - boxes[:, 1]) >= 1e-2)
        boxes, scores, labels = boxes[ok], scores[ok], labels[ok]
        keep = detgeom.batched_nms(boxes, scores, labels, cfg.box_nms)[: cfg.detections_per_image]
        return [BoundingBox(*map(float, boxes[i].tolist()), class_id=int(labels[i]), score=float(scores[i]))
                for i in keep.tolist()]

    def forward(self, stages, image_hw, padded_hw, targets=None):
        """``stages`` are encoder outputs at strides 4, 8, 16, 32.

        Returns (pyramid, detections per image, loss dict). Detections are only
        produced in inference (targets is None); losses only in training.
        """
        pyramid = self.fpn(stages)
        logits, deltas = self.rpn(pyramid)
        anchors = self.anchors(pyramid)
        training = targets is not None
        batch = pyramid[0].shape[0]
        detections, losses = [], {}
        for i in range(batch):
            lg = [x[i] for x in logits]
            dl = [x[i] for x in deltas]
            props = self.proposals(anchors, lg, dl, image_hw, training)
            level_i = [p[i:i + 1] for p in pyramid]
            if training:
                gt_boxes, gt_labels = targets[i]
                obj, rbox = self.rpn_loss(anchors, lg, dl, gt_boxes)
                cls, box = self.roi_loss(level_i, props, gt_boxes, gt_labels, padded_hw)
                for name, v in (("rpn_objectness", obj), ("rpn_box", rbox), ("roi_classifier", cls), ("roi_box", box)):
                    losses[name] = losses.get(name, 0.0) + v / batch
            else:
                detections.append(self.postprocess(level_i, props, image_hw, padded_hw))
        return pyramid, detections, losses


class MultiTaskNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        g = cfg.gn_groups
        self.depth_stem = nn.Conv2d(1, cfg.depth_stem, 3, padding=1)
        self.rgb_stem = nn.Conv2d(3, cfg.rgb_stem, 3, padding=1)
        stem_ch = cfg.depth_stem + cfg.rgb_stem
        chans = [stem_ch] + list(cfg.encoder_channels)
        self.encoder = nn.ModuleList(_stage(chans[i], chans[i + 1], cfg.encoder_blocks[i], g) for i in range(5))
        self.bottleneck = nn.Sequential(nn.Conv2d(chans[5], cfg.bottleneck, 3, padding=1, bias=False),
                                        _gn(g, cfg.bottleneck), nn.ReLU())
        dec_in = cfg.bottleneck
        ups = []
        for i, cout in enumerate(cfg.decoder_channels):
            ups.append(UpStage(dec_in + chans[5 - i], cout, g, cfg.dropout))
            dec_in = cout
        self.decoder = nn.ModuleList(ups)
        self.depth_head = nn.Conv2d(dec_in + stem_ch, 1, 3, padding=1)
        self.detection = DetectionPathway(cfg)
        self._init_weights()

    def _init_weights(self):
        for name, m in self.named_modules():
            if name.startswith("detection.rpn") or name.startswith("detection.box_head"):
                continue
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        nn.init.normal_(self.depth_head.weight, std=1e-3)
        nn.init.zeros_(self.depth_head.bias)

    # -- encoder
    def encode(self, rgb: torch.Tensor, sparse: torch.Tensor) -> EncoderFeatures:
        """rgb (B,3,H,W) in [0, 255]; sparse (B,1,H,W) meters with 0 = missing."""
        if rgb.shape[-2:] != sparse.shape[-2:]:
            raise ValueError(f"rgb {tuple(rgb.shape)} and sparse {tuple(sparse.shape)} differ in size")
        h, w = rgb.shape[-2:]
        ph, pw = padded_size(h, w)
        valid = sparse > 0
        count = valid.flatten(1).sum(1)
        total = (sparse * valid).flatten(1).sum(1)
        scale = torch.where(count > 0, total / count.clamp(min=1), torch.full_like(total, self.cfg.fallback_depth_scale))
        d = sparse / scale.view(-1, 1, 1, 1)
        x = (rgb / 255.0 - RGB_MEAN) / RGB_STD
        if (ph, pw) != (h, w):
            pad = (0, pw - w, 0, ph - h)
            d = F.pad(d, pad, mode="reflect")
            x = F.pad(x, pad, mode="reflect")
        stem = torch.cat([F.relu(self.depth_stem(d)), F.relu(self.rgb_stem(x))], dim=1)
        stages, t = [], stem
        for stage in self.encoder:
            t = stage(t)
            stages.append(t)
        return EncoderFeatures(stem, stages, self.bottleneck(t), scale, (h, w), (ph, pw))

    # -- depth pathway
    def decode_depth(self, f: EncoderFeatures) -> torch.Tensor:
        t = f.bottleneck
        for i, up in enumerate(self.decoder):
            t = up(torch.cat([t, f.stages[4 - i]], dim=1))
        z = self.depth_head(torch.cat([t, f.stem], dim=1))
        h, w = f.input_hw
        return F.softplus(z[..., :h, :w]) * f.scale.view(-1, 1, 1, 1)

    # -- detection pathway
    def detect(self, f: EncoderFeatures, targets=None):
        return self.detection(f.stages[1:], f.input_hw, f.padded_hw, targets)

    def forward(self, rgb, sparse, targets=None):
        f = self.encode(rgb, sparse)
        out = {"depth": self.decode_depth(f), "detections": [], "losses": {}}
        if self.cfg.multitask:
            _, out["detections"], out["losses"] = self.detect(f, targets)
        return out

    def dropout_layers(self) -> list[nn.Module]:
        return [m for m in self.modules() if isinstance(m, nn.Dropout)]

    def shared_state(self) -> dict:
        return {k: v for k, v in self.state_dict().items() if not k.startswith(DETECTION_PREFIX)}


# --------------------------------------------------------------------------- functional API

def to_tensors(rgb: np.ndarray, sparse: np.ndarray | SparseDepthMap) -> tuple[torch.Tensor, torch.Tensor]:
    values = sparse.values if isinstance(sparse, DepthMap) else np.asarray(sparse)
    r = torch.from_numpy(np.ascontiguousarray(rgb, dtype=np.float32)).permute(2, 0, 1)[None]
    s = torch.from_numpy(np.ascontiguousarray(values, dtype=np.float32))[None, None]
    return r, s


def boxes_to_target(boxes: Sequence[BoundingBox]) -> tuple[torch.Tensor, torch.Tensor]:
    b = torch.tensor([bb.as_tuple() for bb in boxes], dtype=torch.float32).reshape(-1, 4)
    c = torch.tensor([bb.class_id for bb in boxes], dtype=torch.long)
    return b, c


def build_model(cfg: ModelConfig, seed: int | None = None) -> MultiTaskNet:
    if seed is None:
        return MultiTaskNet(cfg)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return MultiTaskNet(cfg)


def load_state(net: MultiTaskNet, params: dict) -> MultiTaskNet:
    net.load_state_dict({k: torch.from_numpy(np.asarray(v)) for k, v in params.items()})
    return net


def forward_encoder(net: MultiTaskNet, rgb, sparse) -> EncoderFeatures:
    if not isinstance(rgb, torch.Tensor):
        rgb, sparse = to_tensors(rgb, sparse)
    return net.encode(rgb, sparse)


def forward_depth(net: MultiTaskNet, features: EncoderFeatures) -> torch.Tensor:
    return net.decode_depth(features)


def forward_detection(net: MultiTaskNet, features: EncoderFeatures, mode: str = "infer", gt_boxes=None):
    """Returns (pyramid, detections, loss terms).

    In "train" mode ``gt_boxes`` (one BoundingBox list per image) is required and
    the detections list is empty; in "infer" mode the loss dict is empty.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    targets = None
    if mode == "train":
        if gt_boxes is None:
            raise ValueError("train mode needs ground-truth boxes")
        targets = [boxes_to_target(b) for b in gt_boxes]
    return net.detect(features, targets)


@torch.no_grad()
def predict(net: MultiTaskNet, rgb: np.ndarray, sparse) -> tuple[DepthMap, list[BoundingBox]]:
    """Deterministic inference (dropout off). Returns dense depth and detections."""
    was_training = net.training
    net.eval()
    try:
        out = net(*to_tensors(rgb, sparse))
    finally:
        net.train(was_training)
    depth = DepthMap(out["depth"][0, 0].numpy())
    dets = out["detections"][0] if out["detections"] else []
    return depth, dets


def predict_sample(net: MultiTaskNet, sample: Sample, sparse: SparseDepthMap | None = None):
    return predict(net, sample.rgb, sparse if sparse is not None else sample.sparse_depth)
