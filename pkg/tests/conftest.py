import numpy as np
import pytest
from hypothesis import settings

from spinetrack.model import BBox, Detection2D, ImageStack

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

# filled by test_acceptance.py, printed after the run
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def det(det_id, z, box, *, stack="s", t=0, obj=None, track=None):
    return Detection2D(det_id, stack, t, z, BBox(*box), 1.0, obj, track)


def stack_of(pixels, stack_id="s", t=0):
    return ImageStack(stack_id, t, np.asarray(pixels, dtype=np.uint16), (0.1075, 0.1075, 0.5))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
