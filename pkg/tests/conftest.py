import os

import numpy as np
import pytest
from hypothesis import settings

from stochdomain import domain_map, fem

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def square_model():
    return domain_map.build_square_testcase()


@pytest.fixture(scope="session")
def mesh17():
    return fem.build_mesh(17)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    # one line per acceptance criterion, in criterion order
    for mod in list(__import__("sys").modules.values()):
        results = getattr(mod, "ACCEPTANCE_RESULTS", None)
        if results:
            terminalreporter.section("acceptance criteria")
            for num in sorted(results):
                terminalreporter.write_line(results[num])
            break
