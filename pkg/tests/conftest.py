import os

import pytest
from hypothesis import HealthCheck, settings

from metaspin import ModelParams, activation_barriers, find_axis_fixed_points

settings.register_profile(
    "default",
    deadline=None,
    max_examples=int(os.environ.get("METASPIN_HYPOTHESIS_EXAMPLES", "40")),
    suppress_health_check=[HealthCheck.too_slow],
    derandomize=True,
)
settings.load_profile("default")

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def ref():
    """Drive 0.25, nonlinear rate 9 (both in units of the pump rate)."""
    return ModelParams(omega=0.25, big_gamma=9.0)


@pytest.fixture(scope="session")
def ref_fps(ref):
    return {fp.label: fp for fp in find_axis_fixed_points(ref)}


@pytest.fixture(scope="session")
def ref_table(ref):
    return activation_barriers(ref, alphas=("H", "P"), keep_trajectories=True)


def trajectory(table, method, start, terminal):
    for rec in table.candidates:
        if rec["method"] == method and rec["from"] == start and rec["terminal"] == terminal:
            return rec["trajectory"]
    raise LookupError(f"no {method} trajectory {start}->{terminal}")
