import time

import pytest

from mgvsim.runner import bundled_scenario, load_scenario, run
from mgvsim.signals import load_signal_dictionary

_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture(scope="session")
def sigdb():
    return load_signal_dictionary()


@pytest.fixture
def record_acceptance():
    """Store one criterion outcome so the terminal summary can list it."""

    def record(number: int, title: str, ok: bool, detail: str = ""):
        _ACCEPTANCE[number] = (title, bool(ok), detail)
        print(f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}: {detail}")


class _Runs:
    """Memoised scenario runs shared across test modules."""

    def __init__(self):
        self.cache = {}

    def get(self, name, baseline=False, **ecu):
        key = (name, baseline, tuple(sorted(ecu.items())))
        if key not in self.cache:
            cfg = load_scenario(bundled_scenario(name))
            cfg.raw["ecu"].update(ecu)
            if baseline:
                cfg = cfg.without_attacks()
            t0 = time.perf_counter()
            art = run(cfg, write=False)
            self.cache[key] = (art, time.perf_counter() - t0)
        return self.cache[key]


@pytest.fixture(scope="session")
def runs():
    return _Runs()
