"""Shared test wiring: the acceptance report printed after the run.

Acceptance tests call ``acceptance_report.record(...)`` before asserting, so
the end-of-run summary shows one PASS/FAIL line per criterion even when a
criterion's test fails partway through.
"""
from __future__ import annotations

import pytest

_CRITERIA = [
    ("C1", "gradient checks on every differentiable op"),
    ("C2", "sparse attention vs dense oracle and flop scaling"),
    ("C3", "masking plans: counts, disjointness, substitution"),
    ("C4", "loss assembly matches closed-form compositions"),
    ("C5", "ranking metrics vs exhaustive oracles"),
    ("C6", "end-to-end learnability on a planted cohort"),
    ("C7", "pretraining transfer gain at low label fraction"),
    ("C8", "generator/pipeline invariants on 1000 stays"),
    ("C9", "bitwise reproducibility of runs and checkpoints"),
    ("C10", "component ablation report and value dependence"),
]


class _AcceptanceReport:
    def __init__(self) -> None:
        self.results: dict[str, tuple[bool, str]] = {}

    def record(self, criterion: str, passed: bool, detail: str = "") -> None:
        self.results[criterion] = (bool(passed), detail)


_REPORT = _AcceptanceReport()


@pytest.fixture(scope="session")
def acceptance_report() -> _AcceptanceReport:
    return _REPORT


def pytest_terminal_summary(terminalreporter, exitstatus, config) -> None:  # noqa: ARG001
    if not _REPORT.results:
        return
    terminalreporter.section("acceptance criteria")
    for key, title in _CRITERIA:
        if key in _REPORT.results:
            passed, detail = _REPORT.results[key]
            status = "PASS" if passed else "FAIL"
            suffix = f" ({detail})" if detail else ""
        else:
            status, suffix = "NOT RUN", ""
        terminalreporter.write_line(f"{key} {status}: {title}{suffix}")
