import time

import pytest


@pytest.fixture(scope="session")
def gradcheck_suite():
    """The full op and end-to-end gradient audit, run once per session: (reports, seconds)."""
    from pharnet.gradcheck import run_suite

    t0 = time.perf_counter()
    reports = run_suite(scale=8, seed=0)
    return reports, time.perf_counter() - t0


@pytest.fixture(scope="session")
def smoke_run():
    """The 200-step V4 desk-scale training with its probes: (result, seconds)."""
    from pharnet.config import desk_config
    from pharnet.evalsuite import run_smoke_training

    config = desk_config()
    t0 = time.perf_counter()
    result = run_smoke_training(config)
    return result, time.perf_counter() - t0


_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(number, title, passed, detail)``."""

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"ACCEPTANCE {number:>2} {'PASS' if passed else 'FAIL'} {title}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
