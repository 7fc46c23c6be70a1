from __future__ import annotations

import time
from pathlib import Path

import pytest

from garcpg.embedder import HashEmbedder
from garcpg.snippet_kb import Category, Snippet, SnippetMetadata, StructuredText

FIXTURES = Path(__file__).parent / "fixtures"
SUITE_BUDGET_S = 120.0

ACCEPTANCE_LINES: list[str] = []
_SESSION_START = time.perf_counter()


def record_criterion(number: int, description: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    line = f"[{status}] criterion {number}: {description}"
    if detail:
        line += f" ({detail})"
    ACCEPTANCE_LINES.append(line)


@pytest.fixture
def criterion_report():
    return record_criterion


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
    elapsed = time.perf_counter() - _SESSION_START
    ok = elapsed < SUITE_BUDGET_S
    terminalreporter.write_line(
        f"[{'PASS' if ok else 'FAIL'}] criterion 9: full suite runtime {elapsed:.1f}s < {SUITE_BUDGET_S:.0f}s"
    )


def pytest_sessionfinish(session, exitstatus):
    elapsed = time.perf_counter() - _SESSION_START
    if elapsed >= SUITE_BUDGET_S and session.exitstatus == 0:
        session.exitstatus = 1


ESH = SnippetMetadata(
    "Hypertension", "2023 ESH Guidelines for the management of arterial hypertension", 2023,
    "European Society of Hypertension",
)


def make_snippet(sid: int, content: str, category: Category = Category.OTHER, **kw) -> Snippet:
    return Snippet(
        id=sid,
        metadata=kw.pop("metadata", ESH),
        text=StructuredText(kw.pop("chapter", "CHAPTER"), kw.pop("section", "Section"), content,
                            kw.pop("content_kind", "text")),
        category=category,
        **kw,
    )


@pytest.fixture
def embedder() -> HashEmbedder:
    return HashEmbedder(256, 7)
