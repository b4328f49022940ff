from collections import defaultdict

import pytest

_RESULTS: dict[int, list[tuple[str, bool, str]]] = defaultdict(list)


@pytest.fixture
def criterion():
    """``record(k, part, ok, detail)`` collects one acceptance check for the summary."""

    def record(k: int, part: str, ok: bool, detail: str) -> bool:
        _RESULTS[k].append((part, bool(ok), detail))
        print(f"criterion {k:2d} [{part}]: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(_RESULTS):
        parts = _RESULTS[k]
        verdict = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{p} {'ok' if ok else 'FAILED'} ({d})" for p, ok, d in parts)
        tr.write_line(f"criterion {k:2d}: {verdict}  {detail}")
