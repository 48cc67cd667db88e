import pytest

# criterion number -> (passed, detail), filled by the acceptance suite
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def verdict(request):
    """Record a criterion outcome; prints one PASS/FAIL line immediately."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def record(num: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[num] = (ok, detail)
        with capman.global_and_fixture_disabled():
            print(f"\ncriterion {num:>2}: {'PASS' if ok else 'FAIL'}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
