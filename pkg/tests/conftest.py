import numpy as np
import pytest
import torch

from aerialmtl.dataio import BoundingBox, DepthMap, Sample, SceneMeta, SparseDepthMap
from aerialmtl.degrade import sparsify
from aerialmtl.model import ModelConfig
from aerialmtl.scenegen import GeneratorParams, render, sample_scene

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        prev = _CRITERIA.get(number)
        # a criterion passes only if every test carrying it passes
        if prev is None or prev[1] == "PASS":
            _CRITERIA[number] = (title, status, item.name)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, name = _CRITERIA[number]
        terminalreporter.write_line(f"[{status}] criterion {number:2d}: {title}  ({name})")


@pytest.fixture
def tiny_cfg():
    return ModelConfig.tiny()


@pytest.fixture
def small_params():
    return GeneratorParams(size=(64, 64), hfov_deg=60.0, altitude=(40.0, 50.0), building_side=(8.0, 12.0))


def make_sample(seed=0, params=None, density=0.05):
    s = render(sample_scene(seed, params or GeneratorParams(size=(64, 64))))
    s.sparse_depth = sparsify(s.dense_depth, density, seed=seed)
    return s


@pytest.fixture
def small_sample(small_params):
    return make_sample(3, small_params)


def random_sample(rng, w=7, h=5):
    dense = rng.uniform(1, 100, size=(h, w)).astype(np.float32)
    sparse = np.where(rng.random((h, w)) < 0.3, dense, 0).astype(np.float32)
    boxes = []
    for _ in range(rng.integers(0, 3)):
        x0, y0 = rng.uniform(0, w - 1), rng.uniform(0, h - 1)
        boxes.append(BoundingBox(x0, y0, rng.uniform(x0 + 0.1, w), rng.uniform(y0 + 0.1, h),
                                 class_id=int(rng.integers(1, 3))))
    return Sample(rgb=rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8), dense_depth=DepthMap(dense),
                  sparse_depth=SparseDepthMap(sparse, 0.3), boxes=boxes,
                  meta=SceneMeta(fx=100.0, fy=101.5, cx=w / 2, cy=h / 2, seed=int(rng.integers(1000)),
                                 provenance={"generator": "test"}))


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
