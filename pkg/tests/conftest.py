import re

import numpy as np
import pytest
import torch
from hypothesis import settings

from anchor_retarget import synthetic

torch.set_num_threads(1)
settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = re.match(r"test_criterion_(\d+)", item.name)
    if m and (rep.when == "call" or rep.failed or rep.skipped):
        n = int(m.group(1))
        prev = _CRITERIA.get(n)
        status = "FAIL" if rep.failed else ("SKIP" if rep.skipped else "PASS")
        if prev in (None, "PASS"):
            _CRITERIA[n] = status


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {n:2d}: {_CRITERIA[n]}")


@pytest.fixture(scope="session")
def humanoid():
    return synthetic.humanoid("humanoid", samples_per_bone=1, rays_per_sample=4)


@pytest.fixture(scope="session")
def walk(humanoid):
    return synthetic.walk_motion(humanoid.skeleton, n_frames=6)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
