"""
Shared fixtures for EndoNav tests.

Provides:
- Toy and straight anatomies (no files needed)
- A generated aortic-arch anatomy (session-scoped, it is the slowest to build)
- The y_tree.json anatomy document fixture
- --runslow for the learnability / full-pipeline acceptance runs
"""

import json
import sys
from pathlib import Path

import numpy as np
import pytest

# Allow imports from project root and tests dir
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))
sys.path.insert(0, str(Path(__file__).resolve().parent))

from helpers import make_straight_tree, make_y_tree
from vessel import AnatomySpec, generate_synthetic_anatomy

FIXTURES = Path(__file__).resolve().parent / "fixtures"


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def y_tree():
    return make_y_tree()


@pytest.fixture
def straight_tree():
    return make_straight_tree()


@pytest.fixture(scope="session")
def arch_tree():
    return generate_synthetic_anatomy(AnatomySpec(), np.random.default_rng(7))


# ---------------------------------------------------------------------------
# Anatomy documents on disk
# ---------------------------------------------------------------------------

@pytest.fixture
def y_tree_document():
    with open(FIXTURES / "y_tree.json") as f:
        return json.load(f)


@pytest.fixture
def anatomy_file(tmp_path, y_tree_document):
    path = tmp_path / "y_tree.json"
    path.write_text(json.dumps(y_tree_document))
    return path
