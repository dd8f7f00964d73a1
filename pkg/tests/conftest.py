import sys

import pytest

import toydata
from malvis.corpus import ingest, split, undersample


@pytest.fixture(scope="session")
def toy_tree(tmp_path_factory):
    """Three synthetic families of twelve PNGs each."""
    return toydata.write_images(tmp_path_factory.mktemp("toy"), families=3, per_family=12, seed=0)


@pytest.fixture(scope="session")
def toy_split(toy_tree):
    return split(undersample(ingest(toy_tree), 10, 42), 0.9, 42)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
