"""Acceptance suite: one test (or a small group) per criterion, each tagged with
``@pytest.mark.criterion``; the terminal summary prints a pass/fail line per criterion."""
import time

import numpy as np
import pytest
import torch

from aerialmtl import dataio
from aerialmtl.degrade import add_distance_noise, sparsify
from aerialmtl.detgeom import iou, nms
from aerialmtl.harness import run_comparison
from aerialmtl.losses import consistency_loss, smoothness_loss
from aerialmtl.model import ModelConfig, build_model, load_state, predict, to_tensors
from aerialmtl.scenegen import render, sample_scene
from aerialmtl.trainer import TrainConfig, dataset_consistency, load_model, lr_at, train
from aerialmtl.uncertainty import mc_dropout_predict

from test_detgeom import bb, random_dets, reference_nms, _key

OVERFIT_SEEDS = range(8)
OVERFIT_STEPS = 200
OVERFIT_BUDGET_S = 15 * 60


def _overfit_samples():
    out = []
    for seed in OVERFIT_SEEDS:
        s = render(sample_scene(seed))
        s.sparse_depth = sparsify(s.dense_depth, 0.007, seed=seed)
        out.append(s)
    return out


@pytest.fixture(scope="session")
def overfit(tmp_path_factory):
    """Train single- and multi-task networks on 8 samples for 200 steps each."""
    root = tmp_path_factory.mktemp("overfit")
    samples = _overfit_samples()
    runs = {}
    for name, multitask in (("single", False), ("multi", True)):
        # the 5-epoch halving schedule; 200 steps over 8 samples spans 25 epochs
        cfg = TrainConfig(epochs=25, max_steps=OVERFIT_STEPS, multitask=multitask, seed=0, ckpt_every=0)
        t0 = time.perf_counter()
        init = dataset_consistency(build_model(ModelConfig(multitask=multitask), seed=cfg.seed), samples)
        res = train(samples, cfg, ModelConfig(), root / name)
        final = dataset_consistency(res.net, samples)
        runs[name] = {"init": init, "final": final, "steps": res.steps, "net": res.net,
                      "ckpt": res.checkpoint, "seconds": time.perf_counter() - t0}
        print(f"\n[overfit {name}] loss {init:.3f} -> {final:.3f} (x{final / init:.4f}) "
              f"in {runs[name]['seconds']:.0f}s, {res.steps} steps")
    runs["samples"] = samples
    runs["root"] = root
    return runs


# ----------------------------------------------------------------------------- 1

@pytest.mark.criterion(1, "loss identities")
def test_loss_identities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = torch.tensor(rng.uniform(1, 80, (12, 16)), dtype=torch.float64)
        assert float(consistency_loss(x, x, "rmse")) == 0.0
        assert float(consistency_loss(x, x, "literal")) == 0.0
        a, b, c = rng.uniform(-5, 5, 3)
        y, xx = torch.meshgrid(torch.arange(12.0, dtype=torch.float64), torch.arange(16.0, dtype=torch.float64),
                               indexing="ij")
        assert float(smoothness_loss(a * xx + b * y + c)) <= 1e-6
    pred = torch.tensor([[1.0, 1.0], [1.0, 1.0]])
    gt = torch.tensor([[1.0, 1.0], [1.0, 3.0]])  # residuals (0, 0, 0, 2)
    assert float(consistency_loss(pred, gt, "rmse")) == pytest.approx(1.0, abs=1e-7)
    assert float(consistency_loss(pred, gt, "literal")) == pytest.approx(0.5, abs=1e-7)
    assert time.perf_counter() - t0 < 1.0


# ----------------------------------------------------------------------------- 2

@pytest.mark.criterion(2, "gradient check against finite differences")
@pytest.mark.parametrize("mode", ["rmse", "literal"])
def test_gradient_check(mode):
    t0 = time.perf_counter()
    w_c, w_s, eps = 1.0, 0.1, 1e-6
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(20):
        gt = torch.tensor(np.where(rng.random((8, 8)) < 0.7, rng.uniform(5, 60, (8, 8)), 0.0))
        pred = torch.tensor(rng.uniform(5, 60, (8, 8)), requires_grad=True)

        def objective(p):
            return w_c * consistency_loss(p, gt, mode) + w_s * smoothness_loss(p)

        objective(pred).backward()
        analytic = pred.grad.clone()
        numeric = torch.zeros_like(analytic)
        base = pred.detach().clone()
        for idx in np.ndindex(8, 8):
            hi, lo = base.clone(), base.clone()
            hi[idx] += eps
            lo[idx] -= eps
            numeric[idx] = (float(objective(hi)) - float(objective(lo))) / (2 * eps)
        rel = float((analytic - numeric).norm() / numeric.norm())
        worst = max(worst, rel)
    print(f"\n[gradient {mode}] worst relative error {worst:.2e}")
    assert worst < 1e-3
    assert time.perf_counter() - t0 < 30


# ----------------------------------------------------------------------------- 3

@pytest.mark.criterion(3, "sparsifier count, subset and quadrant balance")
def test_sparsifier():
    rng = np.random.default_rng(0)
    dense = dataio.DepthMap(rng.uniform(5, 90, (240, 320)).astype(np.float32))
    # hypergeometric: 538 draws from 76800 pixels, 19200 per quadrant
    n, N, K = 538, 76800, 19200
    mean = n * K / N
    sigma = np.sqrt(n * (K / N) * (1 - K / N) * (N - n) / (N - 1))
    assert mean == 134.5
    worst = 0.0
    for seed in range(100):
        sp = sparsify(dense, 0.007, seed=seed)
        assert sp.num_valid() == 538
        keep = sp.valid_mask
        assert np.array_equal(sp.values[keep], dense.values[keep])
        for q in (keep[:120, :160], keep[:120, 160:], keep[120:, :160], keep[120:, 160:]):
            dev = abs(int(q.sum()) - mean) / sigma
            worst = max(worst, dev)
            assert dev < 4.0
    print(f"\n[sparsifier] sigma {sigma:.2f}, worst quadrant deviation {worst:.2f} sigma")


# ----------------------------------------------------------------------------- 4

@pytest.mark.criterion(4, "distance-dependent noise calibration")
def test_noise_calibration():
    sp = dataio.SparseDepthMap(np.full((100, 1000), 10.0, np.float32), 1.0)
    out = add_distance_noise(sp, 0.1, seed=0)
    std = float(np.std(out.values.astype(np.float64) - 10.0))
    print(f"\n[noise] empirical std {std:.4f} m over {out.values.size} draws")
    assert abs(std - 1.0) / 1.0 < 0.03
    same = add_distance_noise(sparsify(dataio.DepthMap(np.full((240, 320), 37.0, np.float32)), 0.007, 1), 0.0, 9)
    ref = sparsify(dataio.DepthMap(np.full((240, 320), 37.0, np.float32)), 0.007, 1)
    assert same.values.tobytes() == ref.values.tobytes()


# ----------------------------------------------------------------------------- 5

@pytest.fixture(scope="module")
def full_net():
    return build_model(ModelConfig(), seed=0).eval()


@pytest.mark.criterion(5, "output shape equals input shape; five pyramid levels")
@pytest.mark.parametrize("w,h", [(320, 240), (64, 64), (96, 160)])
def test_shapes(full_net, w, h):
    rng = np.random.default_rng(w * h)
    rgb = rng.integers(0, 256, (h, w, 3)).astype(np.uint8)
    sparse = sparsify(dataio.DepthMap(rng.uniform(20, 60, (h, w)).astype(np.float32)), 0.05, 0)
    with torch.no_grad():
        f = full_net.encode(*to_tensors(rgb, sparse))
        depth = full_net.decode_depth(f)
        pyramid, dets, _ = full_net.detect(f)
    assert tuple(depth.shape[-2:]) == (h, w)
    assert len(pyramid) == 5
    assert len(dets) == 1


# ----------------------------------------------------------------------------- 6

@pytest.mark.criterion(6, "NMS equals exhaustive reference; IoU hand cases")
def test_nms_and_iou_oracle():
    a = bb(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, bb(10, 0, 20, 10)) == 0.0
    assert iou(a, bb(5, 5, 15, 15)) == 1 / 7
    rng = np.random.default_rng(2024)
    for _ in range(200):
        dets = random_dets(rng, int(rng.integers(1, 50)))
        thr = float(rng.uniform(0.2, 0.8))
        assert sorted(map(_key, nms(dets, thr))) == sorted(map(_key, reference_nms(dets, thr)))


# ----------------------------------------------------------------------------- 7

@pytest.mark.criterion(7, "learning-rate schedule")
def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == pytest.approx(1e-4, rel=1e-12)
    assert lr_at(5, cfg) == pytest.approx(5e-5, rel=1e-12)
    assert lr_at(12, cfg) == pytest.approx(2.5e-5, rel=1e-12)


# ----------------------------------------------------------------------------- 8

@pytest.mark.criterion(8, "overfit smoke test (single- and multi-task)")
@pytest.mark.parametrize("name", ["single", "multi"])
def test_overfit(overfit, name):
    run = overfit[name]
    assert run["steps"] == OVERFIT_STEPS
    assert run["seconds"] < OVERFIT_BUDGET_S
    assert run["final"] < 0.1 * run["init"], f"{run['final']:.3f} vs initial {run['init']:.3f}"


@pytest.mark.criterion(8, "overfit smoke test (single- and multi-task)")
def test_overfit_detects(overfit):
    best = 0.0
    for s in overfit["samples"]:
        _, dets = predict(overfit["multi"]["net"], s.rgb, s.sparse_depth)
        for d in dets:
            for g in s.boxes:
                best = max(best, iou(d, g))
    print(f"\n[overfit multi] best detection IoU on the training set {best:.3f}")
    assert best >= 0.5


# ----------------------------------------------------------------------------- 9

@pytest.mark.criterion(9, "MC-dropout variance")
def test_mc_dropout(overfit):
    s = overfit["samples"][0]
    trained = overfit["multi"]["net"]
    params = {k: v.numpy() for k, v in trained.state_dict().items()}
    no_drop = load_state(build_model(ModelConfig(dropout=0.0)), params)
    u0 = mc_dropout_predict(no_drop, s.rgb, s.sparse_depth, n_passes=20, seed=0)
    assert np.all(u0.variance == 0)

    assert trained.cfg.dropout == 0.2
    a = mc_dropout_predict(trained, s.rgb, s.sparse_depth, n_passes=20, seed=0)
    b = mc_dropout_predict(trained, s.rgb, s.sparse_depth, n_passes=20, seed=0)
    frac = float((a.variance > 0).mean())
    print(f"\n[mc dropout] {frac:.1%} of pixels with positive variance")
    assert frac > 0.5
    assert a.variance.tobytes() == b.variance.tobytes() and a.mean.tobytes() == b.mean.tobytes()


# ----------------------------------------------------------------------------- 10

@pytest.mark.criterion(10, "comparison protocol: 8-cell delta table with hash-verified inputs")
def test_comparison_protocol(overfit):
    root = overfit["root"]
    test_dir = root / "test"
    for i, seed in enumerate((1001, 1002, 1003)):
        s = render(sample_scene(seed))
        s.sparse_depth = sparsify(s.dense_depth, 0.007, seed=seed)
        dataio.write_sample(s, test_dir / f"{i:05d}")
    res = run_comparison(overfit["single"]["ckpt"], overfit["multi"]["ckpt"], test_dir, out_dir=root / "report")
    rows = res["deltas"]
    assert len(rows) == 8
    assert {(r["noise_level"], r["masks"]) for r in rows} == {(n, m) for n in (0.0, 0.1, 0.2, 0.4)
                                                             for m in (False, True)}
    assert len({r["input_digest"] for r in rows}) == 8
    for cs, cm in zip(res["single"].cells, res["multi"].cells):
        assert cs["input_digest"] == cm["input_digest"]
    for r in rows:
        assert all(r[k] is not None for k in ("single_rmse", "multi_rmse", "delta_rmse"))
        if r["masks"]:
            assert r["delta_masked_rmse"] is not None
    print("\n noise masks  rmse(s)  rmse(m)  masked(s)  masked(m)")
    for r in rows:
        ms, mm = r["single_masked_rmse"], r["multi_masked_rmse"]
        print(f" {r['noise_level']:.1f}  {str(r['masks']):5}  {r['single_rmse']:7.3f}  {r['multi_rmse']:7.3f}  "
              f"{'' if ms is None else f'{ms:9.3f}'}  {'' if mm is None else f'{mm:9.3f}'}")
    assert (root / "report" / "report.csv").exists()
    # checkpoints reload to the same network
    reloaded = load_model(overfit["multi"]["ckpt"])
    ref = overfit["multi"]["net"].state_dict()
    assert all(torch.equal(ref[k], v) for k, v in reloaded.state_dict().items())
