import pytest

RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[RESULTS] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the test outcome decides PASS or FAIL.

    Tests call ``criterion(name)`` first, then ``criterion(detail=...)`` as
    measurements come in, so a failing test still reports its name.
    """
    entry = {"name": request.node.name, "detail": ""}

    def record(name=None, detail=None):
        if name is not None:
            entry["name"] = name
        if detail is not None:
            entry["detail"] = detail

    yield record
    rep = getattr(request.node, "rep_call", None)
    passed = rep is not None and rep.passed
    request.config.stash[RESULTS].append((passed, entry["name"], entry["detail"]))


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    if rep.when == "call":
        item.rep_call = rep
    return rep


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(RESULTS, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for passed, name, detail in results:
        line = f"{'PASS' if passed else 'FAIL'}  {name}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)
