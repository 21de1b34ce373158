import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from m2gan.corpus import CorpusSpec, generate_corpus  # noqa: E402


@pytest.fixture(scope="session")
def default_corpus():
    return generate_corpus(CorpusSpec())


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "ACCEPTANCE_RESULTS", None)
    if module is None:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, 12):
        title, status, detail = results.get(number, ("", "NOT RUN", ""))
        terminalreporter.write_line(f"criterion {number:2d} {title:<40s} {status}  {detail}".rstrip())
