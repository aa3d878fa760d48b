"""Evaluation: depth metrics, single- vs multi-task comparison under degraded inputs,
and MC-dropout uncertainty comparison."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dataio
from .dataio import Sample
from .degrade import CorruptionSpec, corrupt, rect_mask
from .detgeom import mean_average_precision
from .model import MultiTaskNet, predict
from .trainer import load_model
from .uncertainty import mc_dropout_predict, summarize_uncertainty

log = logging.getLogger(__name__)

NOISE_LEVELS = (0.0, 0.1, 0.2, 0.4)
MASK_MODES = (False, True)
METRICS = ("rmse", "mae", "rel", "delta1", "delta2", "delta3")


def depth_metrics(pred, gt, region_mask: np.ndarray | None = None) -> dict:
    """Metrics over gt-valid pixels, optionally restricted to ``region_mask``."""
    p = np.asarray(getattr(pred, "values", pred), dtype=np.float64)
    g = np.asarray(getattr(gt, "values", gt), dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    sel = g > 0
    if region_mask is not None:
        sel &= np.asarray(region_mask, dtype=bool)
    if not sel.any():
        raise ValueError("empty evaluation region")
    p, g = p[sel], g[sel]
    err = p - g
    with np.errstate(divide="ignore"):
        ratio = np.maximum(p / g, np.where(p > 0, g / p, np.inf))
    return {
        "rmse": float(np.sqrt(np.mean(err ** 2))),
        "mae": float(np.mean(np.abs(err))),
        "rel": float(np.mean(np.abs(err) / g)),
        "delta1": float(np.mean(ratio < 1.25)),
        "delta2": float(np.mean(ratio < 1.25 ** 2)),
        "delta3": float(np.mean(ratio < 1.25 ** 3)),
        "n": int(sel.sum()),
    }


@dataclass
class EvalReport:
    model: str
    provenance: dict
    cells: list[dict] = field(default_factory=list)
    uncertainty: dict | None = None

    def cell(self, noise_level: float, masks: bool) -> dict:
        for c in self.cells:
            if c["noise_level"] == noise_level and c["masks"] == masks:
                return c
        raise KeyError((noise_level, masks))


def input_hash(sparse) -> str:
    return hashlib.sha256(np.ascontiguousarray(sparse.values, dtype="<f4").tobytes()).hexdigest()


def corruption_for(index: int, noise_level: float, masks: bool, seed: int, mask_count: int,
                   mask_size: tuple[int, int], mask_placement: str) -> CorruptionSpec:
    # one seed per sample, shared by every grid cell, so cells differ only in level / masking
    return CorruptionSpec(noise_level=noise_level, mask_random=mask_count if masks else 0, mask_size=mask_size,
                          mask_placement=mask_placement, seed=seed + 7919 * index)


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate_cell(net: MultiTaskNet, samples: Sequence[Sample], specs: Sequence[CorruptionSpec]) -> tuple[dict, list[str]]:
    per_sample, hashes, pairs = [], [], []
    for s, spec in zip(samples, specs):
        sparse, rects = corrupt(s.dense_depth, s.sparse_depth, spec, s.boxes)
        hashes.append(input_hash(sparse))
        depth, dets = predict(net, s.rgb, sparse)
        rec = depth_metrics(depth, s.dense_depth)
        rec["masked_rmse"] = None
        if rects:
            h, w = s.dense_depth.shape
            rec["masked_rmse"] = depth_metrics(depth, s.dense_depth, rect_mask(rects, h, w))["rmse"]
        rec["n_detections"] = len(dets)
        per_sample.append(rec)
        pairs.append((dets, s.boxes))
    agg = {k: _mean(r[k] for r in per_sample) for k in METRICS + ("masked_rmse",)}
    agg["map50"] = mean_average_precision(pairs, 0.5) if net.cfg.multitask else None
    return {"aggregate": agg, "per_sample": per_sample}, hashes


def _delta(a, b):
    return None if a is None or b is None else b - a


def run_comparison(single_ckpt, multi_ckpt, data_dir, out_dir=None, noise_levels=NOISE_LEVELS,
                   mask_modes=MASK_MODES, seed: int = 0, mask_count: int = 2, mask_size=(24, 64),
                   mask_placement: str = "structures", n_passes: int | None = None) -> dict:
    """Evaluate both checkpoints on identical degraded inputs over the noise x mask grid.

    Each degraded input is produced separately for each model and the two are
    compared by sha256; any difference aborts the run.
    """
    single, multi = load_model(single_ckpt), load_model(multi_ckpt)
    samples = dataio.load_dataset(data_dir) if isinstance(data_dir, (str, Path)) else list(data_dir)
    if not samples:
        raise ValueError("empty test set")
    sizes = {tuple(single.cfg.input_size), tuple(multi.cfg.input_size)}
    if len(sizes) != 1:
        raise ValueError(f"checkpoints disagree on input size: {sizes}")
    for s in samples:
        if list(s.size) != list(single.cfg.input_size):
            raise ValueError(f"sample size {s.size} does not match checkpoint input size {single.cfg.input_size}")
        if s.sparse_depth is None:
            raise ValueError("test samples need a sparse depth map")

    reports = {
        "single": EvalReport("single", {"checkpoint": dataio.checkpoint_digest(single_ckpt)}),
        "multi": EvalReport("multi", {"checkpoint": dataio.checkpoint_digest(multi_ckpt)}),
    }
    deltas = []
    for masks in mask_modes:
        for level in noise_levels:
            specs = [corruption_for(i, level, masks, seed, mask_count, mask_size, mask_placement)
                     for i in range(len(samples))]
            res_s, hashes_s = evaluate_cell(single, samples, specs)
            res_m, hashes_m = evaluate_cell(multi, samples, specs)
            if hashes_s != hashes_m:
                raise RuntimeError(f"degraded inputs differ between models at noise={level}, masks={masks}")
            digest = hashlib.sha256("".join(hashes_s).encode()).hexdigest()
            for name, res in (("single", res_s), ("multi", res_m)):
                reports[name].cells.append({"noise_level": level, "masks": masks, "input_digest": digest,
                                            "corruption": asdict(specs[0]) | {"seed": seed}, **res})
            row = {"noise_level": level, "masks": masks, "input_digest": digest}
            for k in METRICS + ("masked_rmse", "map50"):
                a, b = res_s["aggregate"][k], res_m["aggregate"][k]
                row[f"single_{k}"], row[f"multi_{k}"], row[f"delta_{k}"] = a, b, _delta(a, b)
            deltas.append(row)
            log.info("noise %.1f masks %s: rmse single %.3f multi %.3f", level, masks,
                     row["single_rmse"], row["multi_rmse"])

    result = {"single": reports["single"], "multi": reports["multi"], "deltas": deltas}
    if n_passes:
        result["uncertainty"] = run_uncertainty_comparison(single_ckpt, multi_ckpt, samples, n_passes, seed=seed,
                                                           out_dir=out_dir, nets=(single, multi))
        for row in result["uncertainty"]["rows"]:
            rep = reports[row["model"]]
            rep.uncertainty = rep.uncertainty or {}
            rep.uncertainty[row["region"]] = row["mean_variance"]
            rep.uncertainty["ratio"] = row["ratio"]
    if out_dir is not None:
        write_comparison(result, Path(out_dir))
    return result


def write_comparison(result: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = result["deltas"]
    with open(out_dir / "report.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    payload = {"deltas": rows, "single": asdict(result["single"]), "multi": asdict(result["multi"])}
    if "uncertainty" in result:
        payload["uncertainty"] = result["uncertainty"]
    (out_dir / "report.json").write_text(json.dumps(payload, indent=1))
    plot_rmse_vs_noise(rows, out_dir / "rmse_vs_noise.png")


def plot_rmse_vs_noise(rows: list[dict], path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for masks, style in ((False, "-"), (True, "--")):
        sub = [r for r in rows if r["masks"] == masks]
        if not sub:
            continue
        x = [r["noise_level"] for r in sub]
        for model, colour in (("single", "tab:blue"), ("multi", "tab:orange")):
            axes[0].plot(x, [r[f"{model}_rmse"] for r in sub], style, color=colour, marker="o",
                         label=f"{model}{' + masks' if masks else ''}")
            if masks:
                axes[1].plot(x, [r[f"{model}_masked_rmse"] for r in sub], style, color=colour, marker="o", label=model)
    axes[0].set(xlabel="noise level (sigma / depth)", ylabel="RMSE [m]", title="full image")
    axes[1].set(xlabel="noise level (sigma / depth)", ylabel="RMSE [m]", title="masked boxes")
    for ax in axes:
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def run_uncertainty_comparison(single_ckpt, multi_ckpt, data_dir, n_passes: int = 20, seed: int = 0,
                               out_dir=None, nets=None, max_figures: int = 4) -> dict:
    """Inside-box vs outside-box mean MC-dropout variance for both models.

    Samples without ground-truth boxes are skipped. Ratios are None ("n/a") when
    the outside variance is zero.
    """
    single, multi = nets if nets is not None else (load_model(single_ckpt), load_model(multi_ckpt))
    samples = dataio.load_dataset(data_dir) if isinstance(data_dir, (str, Path)) else list(data_dir)
    usable = [s for s in samples if s.boxes and s.sparse_depth is not None]
    if not usable:
        raise ValueError("no test samples with boxes")
    rows, figures = [], []
    maps = {"single": [], "multi": []}
    for name, net in (("single", single), ("multi", multi)):
        inside, outside = [], []
        for i, s in enumerate(usable):
            umap = mc_dropout_predict(net, s.rgb, s.sparse_depth, n_passes, seed=seed + 1000 * i)
            summ = summarize_uncertainty(umap, s.boxes)
            inside.append(summ["inside"])
            outside.append(summ["outside"])
            if i < max_figures:
                maps[name].append(umap)
        v_in, v_out = float(np.mean(inside)), float(np.mean(outside))
        ratio = v_in / v_out if v_out > 0 else None
        rows.append({"model": name, "region": "inside", "mean_variance": v_in, "ratio": ratio})
        rows.append({"model": name, "region": "outside", "mean_variance": v_out, "ratio": ratio})
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "uncertainty.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["model", "region", "mean_variance", "ratio"])
            w.writeheader()
            for r in rows:
                w.writerow({**r, "ratio": "n/a" if r["ratio"] is None else r["ratio"]})
        for i in range(len(maps["single"])):
            path = out_dir / f"uncertainty_{i:02d}.png"
            plot_uncertainty_pair(maps["single"][i], maps["multi"][i], path)
            figures.append(str(path))
    return {"rows": rows, "n_passes": n_passes, "n_samples": len(usable), "figures": figures}


def plot_uncertainty_pair(single, multi, path: Path) -> None:
    """2x2 grid: rows single / multi, columns mean depth / variance."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    vmax = max(float(single.variance.max()), float(multi.variance.max()), 1e-12)
    fig, axes = plt.subplots(2, 2, figsize=(8, 6))
    for r, (name, umap) in enumerate((("single-task", single), ("multi-task", multi))):
        im0 = axes[r, 0].imshow(umap.mean, cmap="viridis")
        axes[r, 0].set_title(f"{name}: mean depth [m]", fontsize=9)
        fig.colorbar(im0, ax=axes[r, 0], fraction=0.04)
        im1 = axes[r, 1].imshow(umap.variance, cmap="inferno", vmin=0, vmax=vmax)
        axes[r, 1].set_title(f"{name}: variance [m^2]", fontsize=9)
        fig.colorbar(im1, ax=axes[r, 1], fraction=0.04)
    for ax in axes.flat:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_variance_png(variance: np.ndarray, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.imsave(path, variance, cmap="inferno", vmin=0, vmax=max(float(variance.max()), 1e-12))
