from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
ADULT = ROOT / "data" / "adult.csv.gz"
CONFIGS = ROOT / "configs"

_criteria = []


def record_criterion(number, title, passed, detail=""):
    line = f"criterion {number:>2} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    _criteria.append((number, line))
    print(line)
    return passed


@pytest.fixture
def criterion():
    return record_criterion


@pytest.fixture(scope="session")
def adult_available():
    if not ADULT.exists():
        pytest.skip("data/adult.csv.gz missing; run `racodp fetch adult --out data`")
    return ADULT


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_criteria):
        terminalreporter.write_line(line)
