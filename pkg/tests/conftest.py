import pytest
import torch

_RESULTS: list[tuple[str, bool, str]] = []


class Reporter:
    def __call__(self, name: str, ok: bool, detail: str = "") -> bool:
        _RESULTS.append((name, bool(ok), detail))
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        return bool(ok)


@pytest.fixture(autouse=True)
def _seed_global_rng():
    # tests that draw from torch's global generator see the same values in any order
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def report() -> Reporter:
    return Reporter()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _RESULTS:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
