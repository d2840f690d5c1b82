import pytest

# criterion id -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"criterion {cid:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def criterion():
    """Record a criterion outcome; the test's own asserts decide pass or fail."""

    class _Recorder:
        def __init__(self):
            self.cid = None
            self.detail = ""

        def __call__(self, cid, detail=""):
            self.cid, self.detail = cid, detail
            ACCEPTANCE[cid] = (False, detail)

        def ok(self, detail=None):
            ACCEPTANCE[self.cid] = (True, self.detail if detail is None else detail)

    return _Recorder()
