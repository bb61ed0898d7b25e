"""Collects acceptance outcomes and prints one line per criterion after the run."""
import pytest

_CRITERIA = {}


@pytest.fixture
def criterion(request, record_property):
    """Tag an acceptance test with its criterion number; ``note`` adds a detail string."""

    class Recorder:
        def __init__(self):
            self.number = None

        def __call__(self, number, title):
            self.number = number
            record_property("criterion", number)
            record_property("title", title)

        def note(self, text):
            record_property("detail", text)

    return Recorder()


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        reason = ""
        if report.failed and report.longrepr is not None:
            crash = getattr(report.longrepr, "reprcrash", None)
            reason = (crash.message if crash else str(report.longrepr)).splitlines()[0][:160]
        _CRITERIA[props["criterion"]] = (props.get("title", ""), report.outcome, props.get("detail", ""), reason)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, outcome, detail, reason = _CRITERIA[n]
        status = "PASS" if outcome == "passed" else "FAIL"
        line = f"criterion {n:>2} {status}: {title}"
        if detail:
            line += f" | {detail}"
        if reason and outcome != "passed":
            line += f" | {reason}"
        terminalreporter.write_line(line)
