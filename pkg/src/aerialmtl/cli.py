"""Command line entry point: generate, degrade, train, uncertainty, compare."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataio
from .dataio import Sample


def _size(text: str) -> tuple[int, int]:
    w, h = text.lower().split("x")
    return int(w), int(h)


def _rect(text: str) -> tuple[int, int, int, int]:
    x, y, w, h = (int(v) for v in text.split(","))
    return x, y, w, h


def cmd_generate(args) -> None:
    from .degrade import sparsify
    from .scenegen import GeneratorParams, render, sample_scene

    params = GeneratorParams(size=args.size)
    out = Path(args.out)
    for i in range(args.count):
        seed = args.seed + i
        sample = render(sample_scene(seed, params))
        sample.sparse_depth = sparsify(sample.dense_depth, args.density, seed=seed)
        sample.meta.provenance["sparsify"] = {"density": args.density, "seed": seed}
        dataio.write_sample(sample, out / f"{i:05d}")
    print(f"wrote {args.count} samples to {out}")


def cmd_degrade(args) -> None:
    from .degrade import CorruptionSpec, corrupt

    spec = CorruptionSpec(density=args.density, noise_level=args.noise_level, mask_rects=args.mask_rect or [],
                          mask_random=args.mask_random, mask_placement=args.mask_placement,
                          resparsify=args.resparsify, seed=args.seed)
    out = Path(args.out)
    dirs = dataio.list_samples(args.inp)
    for i, d in enumerate(dirs):
        s = dataio.read_sample(d)
        spec_i = replace(spec, seed=args.seed + i)
        sparse, rects = corrupt(s.dense_depth, s.sparse_depth, spec_i, s.boxes)
        s.meta.provenance["corruption"] = {"density": spec_i.density, "noise_level": spec_i.noise_level,
                                           "mask_rects": [list(r) for r in rects], "seed": spec_i.seed}
        dataio.write_sample(Sample(s.rgb, s.dense_depth, sparse, s.boxes, s.meta), out / d.name)
    print(f"degraded {len(dirs)} samples into {out}")


def cmd_train(args) -> None:
    from .losses import LossWeights
    from .model import ModelConfig
    from .trainer import TrainConfig, train

    weights = LossWeights.parse(args.weights) if args.weights else LossWeights()
    if args.consistency == "literal":
        weights = replace(weights, consistency_mode="literal")
    cfg = TrainConfig(epochs=args.epochs, lr=args.lr, multitask=args.multitask == "on", seed=args.seed,
                      weights=weights, ckpt_every=args.ckpt_every, max_steps=args.max_steps,
                      batch_size=args.batch_size)
    model_cfg = ModelConfig(dropout=args.dropout)
    if args.model_config:
        model_cfg = ModelConfig.from_dict(json.loads(Path(args.model_config).read_text()))
    res = train(args.data, cfg, model_cfg, args.out)
    print(f"final checkpoint: {res.checkpoint} ({res.steps} steps)")


def cmd_uncertainty(args) -> None:
    from .harness import save_variance_png
    from .trainer import load_model
    from .uncertainty import mc_dropout_predict

    net = load_model(args.ckpt)
    s = dataio.read_sample(args.sample)
    if s.sparse_depth is None:
        raise SystemExit("sample has no sparse.raw")
    umap = mc_dropout_predict(net, s.rgb, s.sparse_depth, args.passes, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataio.write_raster(out / "mean.raw", umap.mean.astype(np.float32))
    dataio.write_raster(out / "variance.raw", umap.variance.astype(np.float32))
    save_variance_png(umap.variance, out / "variance.png")
    print(f"mean variance {umap.variance.mean():.6g} m^2 over {args.passes} passes -> {out}")


def cmd_compare(args) -> None:
    from .harness import run_comparison

    res = run_comparison(args.single, args.multi, args.data, out_dir=args.out, seed=args.seed,
                         mask_count=args.mask_count, mask_placement=args.mask_placement, n_passes=args.passes)
    print(f"{'noise':>6} {'masks':>6} {'rmse single':>12} {'rmse multi':>11} {'delta':>8} {'masked delta':>13}")
    for r in res["deltas"]:
        md = r["delta_masked_rmse"]
        print(f"{r['noise_level']:>6.1f} {str(r['masks']):>6} {r['single_rmse']:>12.3f} {r['multi_rmse']:>11.3f} "
              f"{r['delta_rmse']:>8.3f} {'' if md is None else f'{md:.3f}':>13}")
    if "uncertainty" in res:
        for r in res["uncertainty"]["rows"]:
            ratio = "n/a" if r["ratio"] is None else f"{r['ratio']:.3f}"
            print(f"uncertainty {r['model']:>6} {r['region']:>7}: {r['mean_variance']:.5g} (ratio {ratio})")
    print(f"report written to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aerialmtl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic samples")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--size", type=_size, default=(320, 240), help="WxH")
    g.add_argument("--density", type=float, default=0.007)
    g.set_defaults(func=cmd_generate)

    d = sub.add_parser("degrade", help="apply noise / masking to a dataset")
    d.add_argument("--in", dest="inp", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--density", type=float, default=0.007)
    d.add_argument("--noise-level", type=float, default=0.0)
    m = d.add_mutually_exclusive_group()
    m.add_argument("--mask-random", type=int, default=0, metavar="K")
    m.add_argument("--mask-rect", type=_rect, action="append", metavar="x,y,w,h")
    d.add_argument("--mask-placement", choices=["structures", "uniform"], default="structures")
    d.add_argument("--resparsify", action="store_true", help="resample sparse points from dense depth")
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_degrade)

    t = sub.add_parser("train", help="train a single- or multi-task network")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--multitask", choices=["on", "off"], default="on")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--weights", help="w_c,w_s,w_d,lambda")
    t.add_argument("--consistency", choices=["rmse", "literal"], default="rmse")
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--batch-size", type=int, default=1)
    t.add_argument("--ckpt-every", type=int, default=5)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--dropout", type=float, default=0.2)
    t.add_argument("--model-config", help="JSON file with ModelConfig fields")
    t.set_defaults(func=cmd_train)

    u = sub.add_parser("uncertainty", help="MC-dropout mean / variance maps for one sample")
    u.add_argument("--ckpt", required=True)
    u.add_argument("--sample", required=True)
    u.add_argument("--passes", type=int, default=20)
    u.add_argument("--seed", type=int, default=0)
    u.add_argument("--out", required=True)
    u.set_defaults(func=cmd_uncertainty)

    c = sub.add_parser("compare", help="single- vs multi-task comparison over the corruption grid")
    c.add_argument("--single", required=True)
    c.add_argument("--multi", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--passes", type=int, help="also run the MC-dropout comparison")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--mask-count", type=int, default=2)
    c.add_argument("--mask-placement", choices=["structures", "uniform"], default="structures")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
