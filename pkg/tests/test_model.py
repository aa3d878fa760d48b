import math

import numpy as np
import pytest
import torch

from aerialmtl import detgeom
from aerialmtl.losses import consistency_loss, detection_loss
from aerialmtl.model import (DETECTION_PREFIX, ModelConfig, build_model, forward_depth, forward_detection,
                             forward_encoder, padded_size, predict, to_tensors)

from conftest import make_sample


def _inputs(w, h, seed=0):
    rng = np.random.default_rng(seed)
    rgb = rng.integers(0, 256, (h, w, 3)).astype(np.uint8)
    sparse = np.where(rng.random((h, w)) < 0.05, rng.uniform(20, 60, (h, w)), 0).astype(np.float32)
    return to_tensors(rgb, sparse)


@pytest.mark.parametrize("w,h,expect", [
    (320, 240, [(128, 160), (64, 80), (32, 40), (16, 20), (8, 10)]),
    (64, 64, [(32, 32), (16, 16), (8, 8), (4, 4), (2, 2)]),
])
def test_stage_sizes(w, h, expect):
    net = build_model(ModelConfig.tiny(), seed=0).eval()
    with torch.no_grad():
        f = forward_encoder(net, *_inputs(w, h))
    assert [tuple(s.shape[-2:]) for s in f.stages] == expect
    assert tuple(f.bottleneck.shape[-2:]) == expect[-1]
    assert f.padded_hw == padded_size(h, w)


@pytest.mark.parametrize("w,h", [(320, 240), (64, 64), (96, 160), (50, 37)])
def test_depth_output_matches_input(w, h):
    net = build_model(ModelConfig.tiny(), seed=0).eval()
    with torch.no_grad():
        out = net(*_inputs(w, h))
    assert out["depth"].shape == (1, 1, h, w)
    assert torch.all(out["depth"] > 0)


def test_full_config_shapes_and_size():
    net = build_model(ModelConfig(), seed=0).eval()
    n = sum(p.numel() for p in net.parameters())
    assert 20e6 < n < 40e6
    with torch.no_grad():
        f = forward_encoder(net, *_inputs(320, 240))
        depth = forward_depth(net, f)
        pyramid, dets, losses = forward_detection(net, f)
    assert [s.shape[1] for s in f.stages] == [64, 64, 128, 256, 512]
    assert depth.shape == (1, 1, 240, 320)
    assert len(pyramid) == 5
    assert [tuple(p.shape[-2:]) for p in pyramid] == [(64, 80), (32, 40), (16, 20), (8, 10), (4, 5)]
    assert losses == {} and isinstance(dets[0], list)


def test_zero_weights_give_scale_times_softplus_zero():
    net = build_model(ModelConfig.tiny(), seed=0).eval()
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
        rgb, sparse = _inputs(64, 64)
        f = net.encode(rgb, sparse)
        assert all(float(s.abs().max()) == 0 for s in f.stages)
        depth = net.decode_depth(f)
    scale = float(sparse[sparse > 0].mean())
    assert torch.allclose(depth, torch.full_like(depth, math.log(2) * scale), rtol=1e-5)


def test_depth_scale_equivariance_at_init():
    # multiplying every sparse depth by k multiplies the prediction by k
    net = build_model(ModelConfig.tiny(), seed=1).eval()
    rgb, sparse = _inputs(64, 64)
    with torch.no_grad():
        a = net(rgb, sparse)["depth"]
        b = net(rgb, sparse * 3.0)["depth"]
    assert torch.allclose(b, 3.0 * a, rtol=1e-4)


def test_skip_connections_reach_output():
    net = build_model(ModelConfig.tiny(), seed=0).eval()
    rgb, sparse = _inputs(64, 64)
    with torch.no_grad():
        f = net.encode(rgb, sparse)
        base = net.decode_depth(f)
        for i in range(5):
            f2 = net.encode(rgb, sparse)
            f2.stages[i] = f2.stages[i] + 1.0
            assert not torch.allclose(net.decode_depth(f2), base), f"stage {i + 1} skip has no effect"
        f2 = net.encode(rgb, sparse)
        f2.stem = f2.stem + 1.0
        assert not torch.allclose(net.decode_depth(f2), base)


def test_untrained_detections_respect_nms():
    net = build_model(ModelConfig.tiny(box_score_thresh=0.0), seed=0)
    s = make_sample(1)
    _, dets = predict(net, s.rgb, s.sparse_depth)
    assert len(dets) <= net.cfg.detections_per_image
    for i, a in enumerate(dets):
        assert a.inside(64, 64)
        for b in dets[i + 1:]:
            assert a.class_id != b.class_id or detgeom.iou(a, b) <= net.cfg.box_nms + 1e-6


def test_train_mode_requires_gt():
    net = build_model(ModelConfig.tiny(), seed=0)
    f = forward_encoder(net, *_inputs(64, 64))
    with pytest.raises(ValueError):
        forward_detection(net, f, mode="train")
    with pytest.raises(ValueError):
        forward_detection(net, f, mode="bogus")


def test_no_gt_gives_zero_box_losses():
    net = build_model(ModelConfig.tiny(), seed=0).train()
    f = forward_encoder(net, *_inputs(64, 64))
    _, dets, losses = forward_detection(net, f, mode="train", gt_boxes=[[]])
    assert dets == []
    losses = {k: float(v.detach()) for k, v in losses.items()}
    assert losses["rpn_box"] == 0 and losses["roi_box"] == 0
    assert losses["rpn_objectness"] > 0


def test_multitask_flag_does_not_change_depth():
    on = build_model(ModelConfig.tiny(multitask=True), seed=3).eval()
    off = build_model(ModelConfig.tiny(multitask=False), seed=3).eval()
    assert on.state_dict().keys() == off.state_dict().keys()
    rgb, sparse = _inputs(64, 64)
    with torch.no_grad():
        a, b = on(rgb, sparse), off(rgb, sparse)
    assert torch.equal(a["depth"], b["depth"])
    assert b["detections"] == [] and b["losses"] == {}


def test_build_is_deterministic():
    a = build_model(ModelConfig.tiny(), seed=7).state_dict()
    b = build_model(ModelConfig.tiny(), seed=7).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    c = build_model(ModelConfig.tiny(), seed=8).state_dict()
    assert any(not torch.equal(a[k], c[k]) for k in a)


def test_both_losses_reach_the_encoder():
    net = build_model(ModelConfig.tiny(), seed=0).train()
    s = make_sample(5)
    assert s.boxes
    rgb, sparse = to_tensors(s.rgb, s.sparse_depth)
    gt = torch.from_numpy(s.dense_depth.values)[None, None]
    probe = net.encoder[2][0].conv1.weight

    def grad_of(loss):
        net.zero_grad()
        loss.backward()
        return probe.grad.clone()

    f = net.encode(rgb, sparse)
    g_depth = grad_of(consistency_loss(net.decode_depth(f), gt))
    f = net.encode(rgb, sparse)
    _, _, terms = forward_detection(net, f, "train", [s.boxes])
    g_det = grad_of(detection_loss(terms))
    assert g_depth.abs().sum() > 0 and g_det.abs().sum() > 0
    # the depth loss never touches detection parameters
    net.zero_grad(set_to_none=True)
    consistency_loss(net(rgb, sparse)["depth"], gt).backward()
    assert all(p.grad is None for n, p in net.named_parameters() if n.startswith(DETECTION_PREFIX))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(encoder_channels=[1, 2, 3])
    with pytest.raises(ValueError):
        ModelConfig(dropout=1.0)
