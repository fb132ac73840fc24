import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def tiny_world(tmp_path_factory):
    """Synthetic data and three briefly trained models.

    Accuracy is modest, so experiments use small eval sets; the point is the
    plumbing, not the rates.
    """
    from helpers import make_tiny_world

    return make_tiny_world(tmp_path_factory.mktemp("world"))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
