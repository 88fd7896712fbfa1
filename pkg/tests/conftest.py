import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture()
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion.

    A test that errors before reporting still gets a FAIL line.
    """
    lines = request.config.stash.setdefault(_LINES, [])
    seen = []

    def record(number, title, ok, detail=""):
        seen.append(number)
        lines.append((number, title, bool(ok), detail))
        return ok

    yield record
    if not seen:
        lines.append((request.node.name, "did not report", False, "raised before reporting"))


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(lines, key=lambda r: str(r[0]).zfill(3)):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} {title} {detail}".rstrip())
