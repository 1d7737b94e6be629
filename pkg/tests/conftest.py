"""Shared fixtures: the hand-encoded two-trajectory example graph and helpers."""

from pathlib import Path

import pytest

from graphgpo.rollout import Outcome, Step, Trajectory, TrajectorySet, canonical_state_key

DATA = Path(__file__).parent / "data"


def k(name: str):
    return canonical_state_key([("node", name)])


def merged_set(r_succ: float = 10.0) -> TrajectorySet:
    """Two rollouts from s1 that merge at s1 and s2.

    tau1 (success): s1 -a1-> b -a2-> s2 -a3-> s4 -a4-> s2 -a5-> succ
    tau2 (failure): s1 -a6-> s2 -a7-> s3, a dead end

    Unit costs give d(s1)=2 via s1->s2->succ and d_max=2; s3 cannot reach
    the goal so its effective distance is d_max+1=3.
    """
    s1, b, s2, s4, succ, s3 = (k(x) for x in ("s1", "b", "s2", "s4", "succ", "s3"))
    tau1 = Trajectory(
        (Step(s1, 1, b), Step(b, 2, s2), Step(s2, 3, s4), Step(s4, 4, s2), Step(s2, 5, succ)),
        Outcome.SUCCESS,
    )
    tau2 = Trajectory((Step(s1, 6, s2), Step(s2, 7, s3)), Outcome.FAIL_TERMINAL)
    return TrajectorySet("merged-example", (tau1, tau2), r_succ=r_succ)


@pytest.fixture
def merged():
    return merged_set()


# --- acceptance reporting: one PASS/FAIL line per criterion ---------------

ACCEPTANCE_DETAIL: dict[str, str] = {}
_ACCEPTANCE_OUTCOME: dict[str, str] = {}


@pytest.fixture
def detail(request):
    """Record a one-line summary for the acceptance line of this test."""
    name = request.node.name

    def put(text: str):
        ACCEPTANCE_DETAIL[name] = text
        print(f"{name}: {text}")

    return put


def pytest_runtest_logreport(report):
    if "test_acceptance" in report.nodeid and report.when == "call":
        _ACCEPTANCE_OUTCOME[report.nodeid.split("::")[-1]] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_OUTCOME:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE_OUTCOME, key=lambda n: int(n.split("_")[2])):
        verdict = "PASS" if _ACCEPTANCE_OUTCOME[name] == "passed" else "FAIL"
        terminalreporter.write_line(f"{verdict}  {name}  {ACCEPTANCE_DETAIL.get(name, '')}")
