"""Collect acceptance-criterion outcomes and print one line per criterion."""

_criteria = {}  # number -> [title, passed]
_nodes = {}  # nodeid -> number


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("acceptance")
        if mark is None:
            continue
        number, title = mark.args
        _nodes[item.nodeid] = number
        _criteria.setdefault(number, [title, None])


def pytest_runtest_logreport(report):
    number = _nodes.get(report.nodeid)
    if number is None:
        return
    if report.failed or (report.when == "call" and report.skipped):
        _criteria[number][1] = False
    elif report.when == "call" and _criteria[number][1] is None:
        _criteria[number][1] = True


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, passed = _criteria[number]
        verdict = {True: "PASS", False: "FAIL", None: "NOT RUN"}[passed]
        terminalreporter.write_line(f"criterion {number}: {verdict}: {title}")
