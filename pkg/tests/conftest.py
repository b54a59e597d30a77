from __future__ import annotations

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

# criterion id -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict = {}


def record(cid: str, passed: bool, detail: str):
    ACCEPTANCE[cid] = (bool(passed), detail)
    print(f"ACCEPTANCE {cid}: {'PASS' if passed else 'FAIL'} | {detail}")


@pytest.fixture
def acceptance():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: [int(p) if p.isdigit() else p for p in c.split(".")]):
        ok, detail = ACCEPTANCE[cid]
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {cid}: {detail}")
