import os
from pathlib import Path

import pytest

CANONICAL_NAME = "heart_failure_clinical_records_dataset.csv"
_LINES: list[str] = []


def canonical_dataset():
    """Path to the real clinical-records CSV if one is available, else None."""
    env = os.environ.get("HFATTN_DATA")
    candidates = [Path(env)] if env else []
    candidates.append(Path(__file__).resolve().parents[1] / "data" / CANONICAL_NAME)
    for p in candidates:
        if p.is_file():
            return p
    return None


@pytest.fixture
def criterion():
    """Record one acceptance line; returns the verdict so the test can assert on it."""

    def record(tag: str, title: str, ok, detail: str = "") -> bool:
        verdict = {True: "PASS", False: "FAIL", None: "SKIP"}[ok]
        line = f"[criterion {tag}] {verdict}  {title}"
        if detail:
            line += f"  ({detail})"
        _LINES.append(line)
        print(line)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: s.split("]")[0]):
            terminalreporter.write_line(line)
