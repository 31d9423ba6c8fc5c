from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from biplanar3d.encoder import ModelConfig

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


TOY = ModelConfig(8, (1, 1, 1, 1), (1, 1, 2, 2), window=4, volume_dims=(16, 16, 20),
                  num_classes=2)


@pytest.fixture
def toy_cfg() -> ModelConfig:
    return TOY


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


# -- acceptance summary ------------------------------------------------------------

ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion; printed after the run."""
    lines = request.config.stash.setdefault(ACCEPTANCE, {})

    class Recorder:
        def __call__(self, number: int, title: str, ok: bool, detail: str = "") -> None:
            lines[number] = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + \
                (f"  ({detail})" if detail else "")
            print(lines[number])
            assert ok, lines[number]

    return Recorder()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
