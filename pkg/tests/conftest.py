import pytest

from mfcontrol import quadratic_preset

_CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA):
        ok, detail = _CRITERIA[key]
        terminalreporter.write_line(f"criterion {key:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def criterion():
    """Record the verdict of one acceptance criterion for the summary block."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _CRITERIA[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)

    return record


def smooth_running_d2():
    return [{"kind": "quadratic", "kappa": 1.0, "center": [0.7, 0.3]}]


def smooth_terminal_d2():
    return [
        {"kind": "quadratic", "kappa": 1.0, "center": [0.2, 0.8]},
        {"kind": "constant", "b": [0.0, 0.5]},
    ]


@pytest.fixture
def smooth_d2():
    return quadratic_preset(2, running=smooth_running_d2(), terminal=smooth_terminal_d2(), flag="C")


@pytest.fixture
def smooth_d3():
    return quadratic_preset(
        3,
        running=[{"kind": "quadratic", "kappa": 1.0, "center": [0.5, 0.3, 0.2]}],
        terminal=[
            {"kind": "quadratic", "kappa": 1.0, "center": [0.2, 0.3, 0.5]},
            {"kind": "constant", "b": [0.0, 0.3, 0.6]},
        ],
        flag="C",
    )


@pytest.fixture
def zero_cost_d2():
    return quadratic_preset(2)
