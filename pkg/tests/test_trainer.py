import csv

import numpy as np
import pytest
import torch

from aerialmtl import dataio
from aerialmtl.model import DETECTION_PREFIX, ModelConfig, build_model
from aerialmtl.trainer import (TrainConfig, TrainingError, embed_single_into_multi, load_model, lr_at,
                               steps_to_epochs, train)

from conftest import make_sample


@pytest.fixture(scope="module")
def samples():
    return [make_sample(s) for s in (1, 2, 5)]


def test_lr_values():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == pytest.approx(1e-4, rel=1e-12)
    assert lr_at(4, cfg) == pytest.approx(1e-4, rel=1e-12)
    assert lr_at(5, cfg) == pytest.approx(5e-5, rel=1e-12)
    assert lr_at(12, cfg) == pytest.approx(2.5e-5, rel=1e-12)
    seq = [lr_at(e, cfg) for e in range(40)]
    assert all(a >= b for a, b in zip(seq, seq[1:]))
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_steps_to_epochs():
    assert steps_to_epochs(200, 8) == 25
    assert steps_to_epochs(160, 8) == 20
    assert steps_to_epochs(5, 8, batch_size=4) == 3


def _params(net):
    return {k: v.detach().clone() for k, v in net.state_dict().items()}


def test_single_task_leaves_detection_untouched(samples):
    cfg = TrainConfig(epochs=1, multitask=False, seed=3, ckpt_every=0)
    res = train(samples, cfg, ModelConfig.tiny())
    init = _params(build_model(ModelConfig.tiny(multitask=False, input_size=[64, 64]), seed=3))
    after = _params(res.net)
    assert res.steps == 3 and not res.net.cfg.multitask
    for k in init:
        if k.startswith(DETECTION_PREFIX):
            assert torch.equal(init[k], after[k]), k
    assert any(not torch.equal(init[k], after[k]) for k in init if not k.startswith(DETECTION_PREFIX))
    assert all(r["l_detection"] == 0 for r in res.metrics)


def test_multitask_step_moves_shared_and_detection(samples):
    cfg = TrainConfig(epochs=1, max_steps=1, seed=3, ckpt_every=0)
    res = train(samples, cfg, ModelConfig.tiny())
    init = _params(build_model(ModelConfig.tiny(input_size=[64, 64]), seed=3))
    after = _params(res.net)
    assert res.steps == 1
    assert not torch.equal(init["encoder.2.0.conv1.weight"], after["encoder.2.0.conv1.weight"])
    assert not torch.equal(init["detection.rpn.conv.weight"], after["detection.rpn.conv.weight"])
    assert res.metrics[0]["l_detection"] > 0


def test_training_is_deterministic(samples):
    cfg = TrainConfig(epochs=2, seed=1, ckpt_every=0, max_steps=4)
    a, b = train(samples, cfg, ModelConfig.tiny()), train(samples, cfg, ModelConfig.tiny())
    pa, pb = _params(a.net), _params(b.net)
    assert all(torch.equal(pa[k], pb[k]) for k in pa)
    assert a.metrics == b.metrics


def test_checkpoints_and_metrics_written(samples, tmp_path):
    cfg = TrainConfig(epochs=2, seed=0, ckpt_every=1)
    res = train(samples, cfg, ModelConfig.tiny(), out_dir=tmp_path)
    assert (tmp_path / "epoch_001").is_dir() and (tmp_path / "epoch_002").is_dir()
    assert res.checkpoint == tmp_path / "final"
    with open(tmp_path / "metrics.csv") as f:
        rows = list(csv.DictReader(f))
    assert [r["epoch"] for r in rows] == ["0", "1"]
    assert set(rows[0]) == {"epoch", "lr", "l_consistency", "l_smoothness", "l_detection", "total"}
    _, model_cfg, epoch = dataio.load_checkpoint(tmp_path / "final", ModelConfig)
    assert epoch == 2 and model_cfg.input_size == [64, 64]
    net = load_model(tmp_path / "final")
    ref = res.net.state_dict()
    assert all(torch.equal(ref[k], v) for k, v in net.state_dict().items())


def test_empty_dataset_raises():
    with pytest.raises(TrainingError):
        train([], TrainConfig(epochs=1), ModelConfig.tiny())


def test_mixed_sizes_rejected(samples):
    from aerialmtl.scenegen import GeneratorParams
    other = make_sample(9, GeneratorParams(size=(96, 64)))
    with pytest.raises(TrainingError):
        train([samples[0], other], TrainConfig(epochs=1), ModelConfig.tiny())


def test_embed_single_into_multi():
    single = build_model(ModelConfig.tiny(multitask=False), seed=1).state_dict()
    multi_net = build_model(ModelConfig.tiny(), seed=2)
    multi = multi_net.state_dict()
    merged = embed_single_into_multi(single, multi)
    for k in merged:
        src = single if not k.startswith(DETECTION_PREFIX) else multi
        assert torch.equal(merged[k], src[k]), k
    # the embedded multi-task net predicts the same depth as the single-task one
    multi_net.load_state_dict(merged)
    single_net = build_model(ModelConfig.tiny(multitask=False), seed=1).eval()
    multi_net.eval()
    rng = np.random.default_rng(0)
    rgb = torch.tensor(rng.uniform(0, 255, (1, 3, 64, 64)), dtype=torch.float32)
    sparse = torch.tensor(np.where(rng.random((1, 1, 64, 64)) < 0.05, 30.0, 0.0), dtype=torch.float32)
    with torch.no_grad():
        assert torch.equal(single_net(rgb, sparse)["depth"], multi_net(rgb, sparse)["depth"])


def test_embed_mismatch_errors():
    single = build_model(ModelConfig.tiny(), seed=1).state_dict()
    wide = build_model(ModelConfig.tiny(bottleneck=32), seed=1).state_dict()
    with pytest.raises(ValueError):
        embed_single_into_multi(wide, single)
    partial = {k: v for k, v in single.items() if k != "depth_head.bias"}
    with pytest.raises(KeyError):
        embed_single_into_multi(partial, single)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
