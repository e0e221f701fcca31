import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from tlut import best_tiling, build_unified_layout, load_profile, quantize  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def hw():
    return load_profile("sd8gen3")


@pytest.fixture(scope="session")
def cpu():
    return load_profile("cpu-ref")


def make_model(M, K, scheme, hw, seed=0, weights=None):
    W = np.random.default_rng(seed).standard_normal((M, K)) if weights is None else weights
    q = quantize(W, scheme)
    return q, build_unified_layout(q, best_tiling(M, K, hw, scheme), hw)


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in results.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
