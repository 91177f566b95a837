import contextlib
import time

import pytest

_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS] = []


@pytest.fixture
def criterion(request, capsys):
    """``with criterion(n, title, budget_s=...)`` records PASS or FAIL for an
    acceptance criterion, including its wall-clock budget."""
    results = request.config.stash[_RESULTS]

    @contextlib.contextmanager
    def check(number, title, budget_s=None):
        start = time.perf_counter()
        try:
            yield
            elapsed = time.perf_counter() - start
            if budget_s is not None and elapsed > budget_s:
                raise AssertionError(f"took {elapsed:.1f} s, budget {budget_s:.0f} s")
        except BaseException as exc:
            line = f"FAIL criterion {number}: {title} ({type(exc).__name__}: {exc})"
            raise
        else:
            line = f"PASS criterion {number}: {title} ({elapsed:.2f} s)"
        finally:
            results.append(line.splitlines()[0])
            with capsys.disabled():
                print(f"\n{line.splitlines()[0]}")

    return check


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, [])
    if results:
        terminalreporter.section("acceptance criteria")
        for line in sorted(results, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
