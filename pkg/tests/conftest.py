import pytest
from hypothesis import settings

from arwlab import Configuration, Volume, make_ssrw_kernel

settings.register_profile("arw", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("arw")


@pytest.fixture(scope="session")
def k1():
    return make_ssrw_kernel(1)


@pytest.fixture(scope="session")
def k2():
    return make_ssrw_kernel(2)


@pytest.fixture
def b1_single():
    vol = Volume.box(1, 1)
    return vol, Configuration.single(vol)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in RESULTS:
        terminalreporter.write_line(line)
