"""Acceptance criteria at their stated tolerances.

The full profile runs by default and takes several minutes on one core.
Set ``FILTERDUAL_ACCEPTANCE_PROFILE=quick`` for criteria 1-6 only.
"""

import json
import os

import jsonschema
import pytest

from filterdual.experiment.acceptance import PROFILES, run_acceptance
from filterdual.experiment.config import load_schema

PROFILE = os.environ.get("FILTERDUAL_ACCEPTANCE_PROFILE", "full")


@pytest.fixture(scope="module")
def acceptance_run():
    report, timings = run_acceptance(PROFILE, seed=7, threads=1)
    return report, timings


def test_report_matches_schema(acceptance_run, capsys):
    report, timings = acceptance_run
    with capsys.disabled():
        print(f"\n{PROFILE} profile timings (s): {json.dumps(timings)}")
    jsonschema.validate(report, load_schema("acceptance_report"))
    assert [c["id"] for c in report["criteria"]] == list(PROFILES[PROFILE].criteria)
    assert json.loads(json.dumps(report)) == report


@pytest.mark.parametrize("criterion", range(1, 11))
def test_criterion(acceptance_run, criterion, capsys):
    report, _ = acceptance_run
    if criterion not in PROFILES[PROFILE].criteria:
        pytest.skip(f"criterion {criterion} is not part of the {PROFILE} profile")
    entry = next(c for c in report["criteria"] if c["id"] == criterion)
    verdict = "PASS" if entry["passed"] else "FAIL"
    with capsys.disabled():
        print(f"\ncriterion {criterion:2d} [{verdict}] {entry['name']}  {json.dumps(entry['metrics'])[:400]}")
    assert entry["passed"], json.dumps(entry, indent=1)
