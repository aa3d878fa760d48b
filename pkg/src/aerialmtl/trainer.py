"""Seeded single-/multi-task training loop with step-decay learning rate and checkpoints."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import dataio
from .dataio import Sample
from .degrade import DEFAULT_DENSITY, sparsify
from .losses import LossWeights, consistency_loss, detection_loss, smoothness_loss, total_loss
from .model import DETECTION_PREFIX, ModelConfig, MultiTaskNet, boxes_to_target, build_model, to_tensors

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "lr", "l_consistency", "l_smoothness", "l_detection", "total")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-4
    lr_period: int = 5
    lr_factor: float = 0.5
    batch_size: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    multitask: bool = True
    ckpt_every: int = 5  # epochs; 0 keeps only the final checkpoint
    seed: int = 0
    max_steps: int | None = None
    grad_clip: float = 10.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr * cfg.lr_factor ** (epoch // cfg.lr_period)


@dataclass
class TrainResult:
    checkpoint: Path | None
    metrics: list[dict]
    net: MultiTaskNet
    steps: int


def _ensure_sparse(samples: Sequence[Sample]) -> list[Sample]:
    out = []
    for i, s in enumerate(samples):
        if s.sparse_depth is None:
            s = Sample(s.rgb, s.dense_depth, sparsify(s.dense_depth, DEFAULT_DENSITY, seed=i), s.boxes, s.meta)
        out.append(s)
    return out


def _batch(samples: Sequence[Sample]):
    rgb, sparse = zip(*(to_tensors(s.rgb, s.sparse_depth) for s in samples))
    gt = torch.stack([torch.from_numpy(s.dense_depth.values) for s in samples])[:, None]
    targets = [boxes_to_target(s.boxes) for s in samples]
    return torch.cat(rgb), torch.cat(sparse), gt, targets


def step_losses(net: MultiTaskNet, batch, weights: LossWeights, multitask: bool) -> dict:
    rgb, sparse, gt, targets = batch
    feats = net.encode(rgb, sparse)
    pred = net.decode_depth(feats)
    parts = {
        "l_consistency": consistency_loss(pred, gt, weights.consistency_mode),
        "l_smoothness": smoothness_loss(pred),
        "l_detection": torch.tensor(0.0),
    }
    if multitask:
        _, _, terms = net.detect(feats, targets)
        parts["l_detection"] = detection_loss(terms, weights.lam)
    parts["total"] = total_loss(parts["l_consistency"], parts["l_smoothness"], parts["l_detection"],
                                weights, multitask)
    return parts


def write_metrics(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in METRIC_FIELDS})


def train(data, cfg: TrainConfig, model_cfg: ModelConfig | None = None, out_dir: str | Path | None = None) -> TrainResult:
    """Train on a dataset directory or a list of Samples.

    ``cfg.multitask`` overrides ``model_cfg.multitask``; the input size is taken from
    the data. Checkpoints go to ``out_dir/epoch_XXX`` and ``out_dir/final`` with a
    ``metrics.csv`` alongside.
    """
    samples = dataio.load_dataset(data) if isinstance(data, (str, Path)) else list(data)
    if not samples:
        raise TrainingError("empty dataset")
    samples = _ensure_sparse(samples)
    w, h = samples[0].size
    if any(s.size != (w, h) for s in samples):
        raise TrainingError("all samples must share one image size")
    model_cfg = replace(model_cfg or ModelConfig(), multitask=cfg.multitask, input_size=[w, h])
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        net = build_model(model_cfg)
        net.train()
        opt = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
        order_rng = np.random.default_rng(cfg.seed)
        rows, steps, ckpt = [], 0, None
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            order = order_rng.permutation(len(samples))
            sums = dict.fromkeys(METRIC_FIELDS[2:], 0.0)
            n_steps = 0
            for start in range(0, len(order), cfg.batch_size):
                if cfg.max_steps is not None and steps >= cfg.max_steps:
                    break
                batch = _batch([samples[i] for i in order[start:start + cfg.batch_size]])
                parts = step_losses(net, batch, cfg.weights, cfg.multitask)
                if not torch.isfinite(parts["total"]):
                    vals = {k: float(v) for k, v in parts.items()}
                    raise TrainingError(f"non-finite loss at epoch {epoch}, step {steps}: {vals}")
                opt.zero_grad(set_to_none=True)
                parts["total"].backward()
                torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
                opt.step()
                steps += 1
                n_steps += 1
                for k in sums:
                    sums[k] += float(parts[k].detach())
            if n_steps == 0:
                break
            row = {"epoch": epoch, "lr": lr, **{k: v / n_steps for k, v in sums.items()}}
            rows.append(row)
            log.info("epoch %d lr %.2e consistency %.4f smoothness %.4f detection %.4f total %.4f", epoch, lr,
                     row["l_consistency"], row["l_smoothness"], row["l_detection"], row["total"])
            if out_dir is not None:
                write_metrics(out_dir / "metrics.csv", rows)
                if cfg.ckpt_every and (epoch + 1) % cfg.ckpt_every == 0:
                    dataio.save_checkpoint(net.state_dict(), model_cfg, epoch + 1, out_dir / f"epoch_{epoch + 1:03d}")
        if out_dir is not None:
            ckpt = dataio.save_checkpoint(net.state_dict(), model_cfg, len(rows), out_dir / "final", steps=steps)
    net.eval()
    return TrainResult(ckpt, rows, net, steps)


def load_model(ckpt_dir: str | Path) -> MultiTaskNet:
    params, cfg, _ = dataio.load_checkpoint(ckpt_dir, ModelConfig)
    net = MultiTaskNet(cfg)
    net.load_state_dict({k: torch.from_numpy(v) for k, v in params.items()})
    return net.eval()


@torch.no_grad()
def dataset_consistency(net: MultiTaskNet, samples: Sequence[Sample], mode: str = "rmse") -> float:
    """Mean per-sample consistency loss with dropout off."""
    was = net.training
    net.eval()
    vals = []
    for s in _ensure_sparse(samples):
        pred = net.decode_depth(net.encode(*to_tensors(s.rgb, s.sparse_depth)))
        vals.append(float(consistency_loss(pred[0, 0], torch.from_numpy(s.dense_depth.values), mode)))
    net.train(was)
    return float(np.mean(vals))


def embed_single_into_multi(single_state: dict, multi_state: dict) -> dict:
    """Copy every shared (non-detection) parameter of a single-task state into a multi-task state."""
    shared_single = {k for k in single_state if not k.startswith(DETECTION_PREFIX)}
    shared_multi = {k for k in multi_state if not k.startswith(DETECTION_PREFIX)}
    if shared_single != shared_multi:
        diff = sorted(shared_single ^ shared_multi)[:5]
        raise KeyError(f"shared parameter keys differ, e.g. {diff}")
    out = dict(multi_state)
    for k in shared_single:
        if tuple(single_state[k].shape) != tuple(multi_state[k].shape):
            raise ValueError(f"shape mismatch for {k}: {tuple(single_state[k].shape)} vs {tuple(multi_state[k].shape)}")
        v = single_state[k]
        out[k] = v.clone() if hasattr(v, "clone") else np.array(v, copy=True)
    return out


def steps_to_epochs(steps: int, n_samples: int, batch_size: int = 1) -> int:
    return math.ceil(steps / math.ceil(n_samples / batch_size))
