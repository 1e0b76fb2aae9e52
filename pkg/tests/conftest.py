import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running simulation tests")


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        n = props["criterion"]
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        prev = _CRITERIA.get(n)
        # a criterion fails if any of its tests fails
        if prev is None or prev[0] == "PASS":
            _CRITERIA[n] = (status, props.get("title", ""), props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[n]
        line = f"criterion {n:2d} {status}: {title}"
        if detail:
            line += f" [{detail}]"
        terminalreporter.write_line(line)


@pytest.fixture
def criterion(record_property):
    """Tag a test as acceptance criterion ``n``; ``detail`` records measured values."""

    def tag(n, title):
        record_property("criterion", n)
        record_property("title", title)

        def detail(text):
            record_property("detail", text)

        return detail

    return tag
