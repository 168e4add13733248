import numpy as np
import pytest

from rydflux import presets as P
from rydflux.effective import build_effective_model

# (criterion number, title, passed, detail) rows collected by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d} {title}: {detail}")


@pytest.fixture
def triangle():
    geo, cfg, law = P.triangle_geometry(), P.triangle_config(), P.default_law()
    return geo, cfg, law, build_effective_model(cfg, law, geo)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
