"""Acceptance criteria on the default scenario, one PASS/FAIL line per criterion.

Checks share one Context so the value functions, bundles and ledger are
built once. Criterion 3 runs after the others because it inspects every
bundle they produced.
"""
import time
from pathlib import Path

import pytest

from ctrlcouple.scenario import load_scenario
from ctrlcouple.verify import CHECKS, Context, check_determinism

SCENARIO = Path(__file__).resolve().parents[1] / "scenarios" / "ou_fk.yaml"

# seconds
BUDGET = {1: 1.0, 2: 30.0, 4: 60.0, 8: 120.0, 12: 300.0}

ORDER = list(CHECKS) + [14]


@pytest.fixture(scope="module")
def ctx():
    return Context(load_scenario(SCENARIO))


@pytest.mark.slow
@pytest.mark.parametrize("cid", ORDER, ids=[f"c{c:02d}" for c in ORDER])
def test_criterion(cid, ctx, capsys):
    t0 = time.perf_counter()
    res = check_determinism(ctx.sc) if cid == 14 else CHECKS[cid](ctx)
    took = time.perf_counter() - t0
    with capsys.disabled():
        print(f"\n{'PASS' if res.passed else 'FAIL'} {cid:>2} {res.name} ({took:.1f}s)")
    assert res.id == cid
    assert res.passed, res.details
    if cid in BUDGET:
        assert took < BUDGET[cid], f"criterion {cid} took {took:.1f}s, budget {BUDGET[cid]}s"
