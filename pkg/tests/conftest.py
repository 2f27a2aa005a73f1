import time

import numpy as np
import pytest
import torch
from hypothesis import settings

from mugl.cli import DESK_RUN
from mugl.data import desk_spec, synth_generate
from mugl.model import ModelConfig
from mugl.training import TrainConfig, fit

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

torch.set_num_threads(1)

DESK_SEED = 7
DESK_TRAIN = dict(DESK_RUN)


@pytest.fixture(scope="session")
def desk():
    return synth_generate(desk_spec(), DESK_SEED)


@pytest.fixture(scope="session")
def trained(desk):
    """Desk model trained once per session and shared by model, training and acceptance tests."""
    manifest, samples = desk
    cfg = TrainConfig(**DESK_TRAIN)
    t0 = time.perf_counter()
    result = fit(samples, manifest.skeleton, ModelConfig(), cfg, leg_classes=manifest.leg_classes)
    result.model.eval()
    result.elapsed = time.perf_counter() - t0
    return result


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record():
    """Store one pass/fail line per acceptance criterion and echo it immediately."""

    def _record(num: int, ok: bool, detail: str):
        ACCEPTANCE[num] = (ok, detail)
        print(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
