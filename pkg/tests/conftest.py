import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from psiot_orch.netsim import run  # noqa: E402
from psiot_orch.scenario import build_paper_poc  # noqa: E402

ACCEPTANCE: dict[str, str] = {}


@pytest.fixture(scope="session")
def poc():
    """The built-in scenario run once with seed 0, plus its wall-clock time."""
    s = build_paper_poc()
    t0 = time.perf_counter()
    result = run(s, 0)
    return s, result, time.perf_counter() - t0


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, line in ACCEPTANCE.items():
        terminalreporter.write_line(line)
