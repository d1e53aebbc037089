"""Acceptance batteries, one per criterion, at full size.

Each test prints a single PASS/FAIL line with its measurements; run the file
directly (``python3 tests/test_acceptance.py``) to get just those lines.
"""
from __future__ import annotations

import sys

import pytest

from stopgames import suites

SEED = 0

CRITERIA = [
    ("round_identities", suites.round_identities),
    ("best_response_oracle", suites.best_response_oracle),
    ("threat_example", suites.threat_example),
    ("union_inequalities", suites.union_inequalities),
    ("heavy_nonempty", suites.heavy_nonempty),
    ("punishment_mass", suites.punishment_mass),
    ("accretion_certificates", suites.accretion_certificates),
    ("approximation_error", suites.approximation_error),
    ("deviation_bound", suites.deviation_bound),
    ("ramsey_suite", suites.ramsey_suite),
    ("synthesis_suite", suites.synthesis_suite),
]


@pytest.mark.parametrize("number,name,battery", [(i + 1, n, f) for i, (n, f) in enumerate(CRITERIA)],
                         ids=[n for n, _ in CRITERIA])
def test_criterion(number, name, battery, capsys):
    res = battery(SEED, 1.0)
    with capsys.disabled():
        print(f"\n[{number:2d}] {res.line()}")
    assert res.passed, res.line()


if __name__ == "__main__":
    ok = True
    for i, (name, battery) in enumerate(CRITERIA, 1):
        res = battery(SEED, 1.0)
        print(f"[{i:2d}] {res.line()}", flush=True)
        ok &= res.passed
    sys.exit(0 if ok else 1)
